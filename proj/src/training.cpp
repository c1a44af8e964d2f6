#include "dualenc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_set>

#include "dualenc/errors.hpp"

namespace dualenc {

void LossConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be a positive finite number, got " +
                      std::to_string(temperature));
  }
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be > 0");
}

double linear_decay_lr(double peak_lr, std::size_t step, std::size_t steps) {
  return peak_lr * (1.0 - static_cast<double>(step) / static_cast<double>(steps));
}

Batch make_batch(std::span<const TokenizedText> questions,
                 std::span<const TokenizedText> answers,
                 std::span<const std::size_t> indices) {
  Batch b;
  b.questions = pack_batch(questions, indices);
  b.answers = pack_batch(answers, indices);
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

Tensor similarity_matrix(const Tensor& q, const Tensor& a) {
  return matmul(l2_normalize_rows(q), transpose(l2_normalize_rows(a)));
}

Tensor in_batch_softmax_loss(const Tensor& sims, double temperature) {
  if (sims.rank() != 2 || sims.size(0) != sims.size(1)) {
    throw DimensionError("in-batch loss needs a square similarity matrix, got " +
                         shape_string(sims.shape()));
  }
  const Tensor probs = softmax_rows(sims, temperature);
  return scale(mean(log(pick_diagonal(probs))), -1.0);
}

Tensor batch_loss(const DualEncoderModel& model, const Batch& batch,
                  const LossConfig& loss) {
  loss.validate();
  const auto q = encode_batch(model, Tower::kQuestion, batch.questions).embedding;
  const auto a = encode_batch(model, Tower::kAnswer, batch.answers).embedding;
  Tensor qn, an;
  try {
    qn = l2_normalize_rows(q);
  } catch (const DegenerateError& e) {
    const auto i = static_cast<std::size_t>(e.index());
    throw DegenerateError("zero-norm question embedding at batch row " + std::to_string(i) +
                              " (example " + std::to_string(batch.indices.at(i)) + ")",
                          static_cast<long>(batch.indices.at(i)));
  }
  try {
    an = l2_normalize_rows(a);
  } catch (const DegenerateError& e) {
    const auto i = static_cast<std::size_t>(e.index());
    throw DegenerateError("zero-norm answer embedding at batch row " + std::to_string(i) +
                              " (example " + std::to_string(batch.indices.at(i)) + ")",
                          static_cast<long>(batch.indices.at(i)));
  }
  return in_batch_softmax_loss(matmul(qn, transpose(an)), loss.temperature);
}

namespace {

// Yields fixed-size index batches, reshuffling at every epoch boundary and
// dropping the incomplete tail.
class BatchSampler {
 public:
  BatchSampler(std::span<const QAPair> data, std::size_t batch_size,
               std::uint64_t seed, bool dedup)
      : data_(data), batch_size_(batch_size), rng_(seed), dedup_(dedup),
        order_(data.size()) {
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }

  std::vector<std::size_t> next() {
    for (;;) {
      std::vector<std::size_t> batch;
      std::unordered_set<std::string_view> answers;
      while (batch.size() < batch_size_ && cursor_ < order_.size()) {
        const std::size_t i = order_[cursor_++];
        if (dedup_ && !answers.insert(data_[i].answer).second) continue;
        batch.push_back(i);
      }
      if (batch.size() == batch_size_) return batch;
      reshuffle();
    }
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::span<const QAPair> data_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
  bool dedup_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace

TrainResult train(DualEncoderModel& model, std::span<const QAPair> dataset,
                  const Tokenizer& tokenizer, const TrainConfig& config,
                  const LossConfig& loss, const StepCallback& on_step) {
  config.validate();
  loss.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  if (dataset.size() < config.batch_size) {
    throw ConfigError("training dataset has " + std::to_string(dataset.size()) +
                      " pairs, fewer than batch_size " + std::to_string(config.batch_size));
  }
  if (config.dedup_batch) {
    std::unordered_set<std::string_view> distinct;
    for (const auto& p : dataset) distinct.insert(p.answer);
    if (distinct.size() < config.batch_size) {
      throw ConfigError("dedup_batch needs at least batch_size distinct answers, found " +
                        std::to_string(distinct.size()));
    }
  }
  if (tokenizer.vocab_size() != model.config().vocab_size) {
    throw ConfigError("tokenizer vocabulary (" + std::to_string(tokenizer.vocab_size()) +
                      ") does not match model vocab_size (" +
                      std::to_string(model.config().vocab_size) + ")");
  }

  const std::size_t max_len = model.config().max_seq_len;
  std::vector<TokenizedText> questions, answers;
  questions.reserve(dataset.size());
  answers.reserve(dataset.size());
  for (const auto& p : dataset) {
    questions.push_back(tokenizer.tokenize(p.question, max_len));
    answers.push_back(tokenizer.tokenize(p.answer, max_len));
  }

  auto optimizer = make_optimizer(config.optimizer, config.adafactor, config.adam);
  BatchSampler sampler(dataset, config.batch_size, config.seed, config.dedup_batch);
  TrainResult result;
  result.log.reserve(config.steps);
  const auto trainable = model.params().trainable();

  for (std::size_t t = 0; t < config.steps; ++t) {
    const auto start = std::chrono::steady_clock::now();
    StepRecord rec;
    rec.step = t + 1;
    rec.lr = linear_decay_lr(config.peak_lr, t, config.steps);
    try {
      const auto indices = sampler.next();
      const Batch batch = make_batch(questions, answers, indices);
      model.params().zero_grad();
      const Tensor value = batch_loss(model, batch, loss);
      backward(value);
      rec.loss = value.item();
      optimizer->step(model.params(), rec.lr);
      for (const auto& [name, tensor] : trainable) {
        for (double v : tensor.data()) {
          if (!std::isfinite(v)) throw NumericError("non-finite value in parameter " + name);
        }
      }
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(rec.step) + ": " +
                         e.what());
    }
    if (config.log_wall_time) {
      rec.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - start)
                        .count();
    }
    result.log.push_back(rec);
    if (on_step) on_step(rec);
  }
  model.params().zero_grad();
  return result;
}

void write_metrics_csv(const std::filesystem::path& path,
                       std::span<const StepRecord> log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metrics " + path.string());
  out << "step,lr,loss,wall_ms\n";
  char buf[128];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.3f\n", r.step, r.lr, r.loss, r.wall_ms);
    out << buf;
  }
}

}  // namespace dualenc
