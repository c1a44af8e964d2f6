#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <variant>

#include "dualenc/cli.hpp"
#include "dualenc/errors.hpp"
#include "dualenc/optim.hpp"

namespace dualenc::cli {

namespace {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed fields share the integer parser");
using FieldRef = std::variant<std::string*, std::size_t*, double*, bool*>;

struct Field {
  const char* name;
  FieldRef ref;
  const char* help;
};

// The single table that defines key names, order and types.
std::vector<Field> fields(RunConfig& c) {
  return {
      {"variant", &c.variant, "SDE, ADE, ADE-STE, ADE-FTE or ADE-SPL"},
      {"size", &c.size, "model preset: small, base or large"},
      {"max_seq_len", &c.max_seq_len, "tokens kept per text"},
      {"tokenizer", &c.tokenizer, "whitespace or byte"},
      {"seed", &c.seed, "model init and batch order seed"},
      {"steps", &c.steps, "optimizer steps"},
      {"batch_size", &c.batch_size, "pairs per in-batch softmax"},
      {"peak_lr", &c.peak_lr, "learning rate before linear decay"},
      {"optimizer", &c.optimizer, "adafactor or adam"},
      {"parameter_scale", &c.parameter_scale, "scale Adafactor updates by parameter RMS"},
      {"dedup_batch", &c.dedup_batch, "drop repeated answers within a batch"},
      {"temperature", &c.temperature, "softmax temperature"},
      {"log_wall_time", &c.log_wall_time, "record step wall time in metrics.csv"},
      {"train_path", &c.train_path, "training JSONL; empty selects the synthetic task"},
      {"eval_path", &c.eval_path, "evaluation JSONL"},
      {"corpus_path", &c.corpus_path, "answer corpus, one per line; default unique eval answers"},
      {"synthetic_n_train", &c.synthetic_n_train, "synthetic training pairs"},
      {"synthetic_n_eval", &c.synthetic_n_eval, "synthetic evaluation pairs"},
      {"synthetic_vocab_q", &c.synthetic_vocab_q, "question key vocabulary size"},
      {"synthetic_vocab_a", &c.synthetic_vocab_a, "answer key vocabulary size"},
      {"synthetic_key_len", &c.synthetic_key_len, "key tokens per text"},
      {"synthetic_slot_tokens", &c.synthetic_slot_tokens, "separate key tokens per slot"},
      {"synthetic_slot_mappings", &c.synthetic_slot_mappings, "separate question-to-answer maps per slot"},
      {"synthetic_answer_template", &c.synthetic_answer_template, "wrap answers in a template word"},
      {"synthetic_noise_tokens", &c.synthetic_noise_tokens, "distractor tokens per text"},
      {"synthetic_noise_vocab", &c.synthetic_noise_vocab, "distractor vocabulary size per side"},
      {"synthetic_seed", &c.synthetic_seed, "synthetic task seed"},
      {"checkpoint", &c.checkpoint, "checkpoint file to write or read"},
      {"shards", &c.shards, "index shards for retrieval"},
      {"sample_per_side", &c.sample_per_side, "embeddings per side for analysis"},
      {"tsne_perplexity", &c.tsne_perplexity, "t-SNE perplexity"},
      {"tsne_iterations", &c.tsne_iterations, "t-SNE iterations"},
      {"kmeans_restarts", &c.kmeans_restarts, "k-means restarts"},
      {"variants", &c.variants, "comma-separated variants"},
      {"sizes", &c.sizes, "comma-separated size presets"},
      {"seeds", &c.seeds, "seeds per variant"},
      {"jobs", &c.jobs, "parallel training runs"},
      {"save_checkpoints", &c.save_checkpoints, "keep one checkpoint per run"},
      {"output_dir", &c.output_dir, "directory for all outputs"},
  };
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_unsigned(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) {
    throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) {
    throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("key '" + key + "' expects true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    RunConfig c;
    std::vector<std::string> out;
    for (const auto& f : fields(c)) out.emplace_back(f.name);
    return out;
  }();
  return names;
}

std::string RunConfig::help(const std::string& key) {
  RunConfig c;
  for (const auto& f : fields(c)) {
    if (key == f.name) return f.help;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::get(const std::string& key) const {
  for (const auto& f : fields(const_cast<RunConfig&>(*this))) {
    if (key != f.name) continue;
    return std::visit(
        [](auto* p) -> std::string {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, std::string>) {
            return *p;
          } else if constexpr (std::is_same_v<T, bool>) {
            return *p ? "true" : "false";
          } else if constexpr (std::is_same_v<T, double>) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.17g", *p);
            return buf;
          } else {
            return std::to_string(*p);
          }
        },
        f.ref);
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  for (auto& f : fields(*this)) {
    if (key != f.name) continue;
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, std::string>) {
            *p = value;
          } else if constexpr (std::is_same_v<T, bool>) {
            *p = parse_bool(key, value);
          } else if constexpr (std::is_same_v<T, double>) {
            *p = parse_double(key, value);
          } else {
            *p = parse_unsigned<T>(key, value);
          }
        },
        f.ref);
    explicit_keys.insert(key);
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : keys()) out += k + " = " + get(k) + "\n";
  return out;
}

void RunConfig::validate() const {
  (void)parse_variant(variant);
  (void)variant_list();
  (void)parse_tokenizer_mode(tokenizer);
  (void)parse_optimizer(optimizer);
  const auto presets = preset_names();
  for (const auto& s : size_list()) {
    if (std::find(presets.begin(), presets.end(), s) == presets.end()) {
      throw ConfigError("unknown size preset '" + s + "'; valid: small, base, large");
    }
  }
  if (std::find(presets.begin(), presets.end(), size) == presets.end()) {
    throw ConfigError("unknown size preset '" + size + "'; valid: small, base, large");
  }
  train_config(seed).validate();
  loss_config().validate();
  tsne_config().validate();
  if (seeds < 1) throw ConfigError("seeds must be >= 1");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (shards < 1) throw ConfigError("shards must be >= 1");
  if (kmeans_restarts < 1) throw ConfigError("kmeans_restarts must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

EncoderConfig RunConfig::encoder_config(std::size_t vocab_size) const {
  return encoder_config(vocab_size, size);
}

EncoderConfig RunConfig::encoder_config(std::size_t vocab_size, const std::string& preset) const {
  return EncoderConfig::preset(preset, vocab_size, max_seq_len);
}

TrainConfig RunConfig::train_config(std::uint64_t run_seed) const {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = batch_size;
  t.peak_lr = peak_lr;
  t.optimizer = parse_optimizer(optimizer);
  t.seed = run_seed;
  t.dedup_batch = dedup_batch;
  t.log_wall_time = log_wall_time;
  t.adafactor.multiply_by_parameter_scale = parameter_scale;
  return t;
}

LossConfig RunConfig::loss_config() const {
  LossConfig l;
  l.temperature = temperature;
  return l;
}

SyntheticTaskConfig RunConfig::synthetic_config() const {
  SyntheticTaskConfig s;
  s.n_train = synthetic_n_train;
  s.n_eval = synthetic_n_eval;
  s.vocab_q = synthetic_vocab_q;
  s.vocab_a = synthetic_vocab_a;
  s.key_len = synthetic_key_len;
  s.slot_tokens = synthetic_slot_tokens;
  s.slot_mappings = synthetic_slot_mappings;
  s.answer_template = synthetic_answer_template;
  s.noise_tokens = synthetic_noise_tokens;
  s.noise_vocab = synthetic_noise_vocab;
  s.seed = synthetic_seed;
  return s;
}

TsneConfig RunConfig::tsne_config() const {
  TsneConfig t;
  t.perplexity = tsne_perplexity;
  t.iterations = tsne_iterations;
  t.seed = seed;
  t.sample_per_side = sample_per_side;
  return t;
}

std::vector<Variant> RunConfig::variant_list() const {
  std::vector<Variant> out;
  for (const auto& name : split_list(variants)) {
    const Variant v = parse_variant(name);
    if (std::find(out.begin(), out.end(), v) != out.end()) {
      throw ConfigError("variant '" + name + "' listed twice");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("variants list is empty");
  return out;
}

std::vector<std::string> RunConfig::size_list() const {
  auto out = split_list(sizes);
  if (out.empty()) throw ConfigError("sizes list is empty");
  return out;
}

}  // namespace dualenc::cli
