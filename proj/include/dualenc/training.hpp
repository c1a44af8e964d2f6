#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "dualenc/data.hpp"
#include "dualenc/encoder.hpp"
#include "dualenc/optim.hpp"
#include "dualenc/sharing.hpp"
#include "dualenc/tensor.hpp"
#include "dualenc/tokenizer.hpp"

namespace dualenc {

struct LossConfig {
  double temperature = 0.05;

  void validate() const;
};

// Row i of `questions` is paired with row i of `answers`; every other answer
// in the batch is a negative for question i.
struct Batch {
  TokenBatch questions;
  TokenBatch answers;
  std::vector<std::size_t> indices;  // into the dataset
};

Batch make_batch(std::span<const TokenizedText> questions,
                 std::span<const TokenizedText> answers,
                 std::span<const std::size_t> indices);

// Cosine similarity matrix S[i][j] between rows of q [B x E] and a [B x E].
Tensor similarity_matrix(const Tensor& q, const Tensor& a);

// Mean over rows of -log softmax(S / temperature)[i][i].
Tensor in_batch_softmax_loss(const Tensor& sims, double temperature);

Tensor batch_loss(const DualEncoderModel& model, const Batch& batch,
                  const LossConfig& loss);

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  double peak_lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdafactor;
  std::uint64_t seed = 0;
  bool dedup_batch = false;
  bool log_wall_time = false;  // wall_ms stays 0 unless set, keeping logs reproducible
  AdafactorConfig adafactor;
  AdamConfig adam;

  void validate() const;
};

// Learning rate applied at 0-based step t: peak * (1 - t / steps).
double linear_decay_lr(double peak_lr, std::size_t step, std::size_t steps);

struct StepRecord {
  std::size_t step = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

using StepCallback = std::function<void(const StepRecord&)>;

struct TrainResult {
  std::vector<StepRecord> log;
};

// Runs exactly config.steps optimizer steps. Epochs are seed-deterministic
// shuffles of the dataset; a trailing partial batch is dropped.
TrainResult train(DualEncoderModel& model, std::span<const QAPair> dataset,
                  const Tokenizer& tokenizer, const TrainConfig& config,
                  const LossConfig& loss, const StepCallback& on_step = {});

void write_metrics_csv(const std::filesystem::path& path,
                       std::span<const StepRecord> log);

}  // namespace dualenc
