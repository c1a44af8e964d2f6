#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dualenc/analysis.hpp"
#include "dualenc/data.hpp"
#include "dualenc/encoder.hpp"
#include "dualenc/sharing.hpp"
#include "dualenc/training.hpp"

namespace dualenc::cli {

// Every tunable of every subcommand. Serialised as `key = value` lines.
struct RunConfig {
  // model
  std::string variant = "ADE";
  std::string size = "small";
  std::size_t max_seq_len = 16;
  std::string tokenizer = "whitespace";
  std::uint64_t seed = 0;

  // training
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  double peak_lr = 1e-3;
  std::string optimizer = "adafactor";
  bool parameter_scale = false;
  bool dedup_batch = false;
  double temperature = 0.05;
  bool log_wall_time = false;

  // data; empty paths select the synthetic task
  std::string train_path;
  std::string eval_path;
  std::string corpus_path;  // one answer per line; default: unique eval answers
  std::size_t synthetic_n_train = 2000;
  std::size_t synthetic_n_eval = 500;
  std::size_t synthetic_vocab_q = 16;
  std::size_t synthetic_vocab_a = 16;
  std::size_t synthetic_key_len = 4;
  bool synthetic_slot_tokens = false;
  bool synthetic_slot_mappings = false;
  bool synthetic_answer_template = true;
  std::size_t synthetic_noise_tokens = 2;
  std::size_t synthetic_noise_vocab = 16;
  std::uint64_t synthetic_seed = 1234;

  // evaluation and analysis
  std::string checkpoint;
  std::size_t shards = 1;
  std::size_t sample_per_side = 400;
  double tsne_perplexity = 30.0;
  std::size_t tsne_iterations = 1000;
  std::size_t kmeans_restarts = 20;

  // compare and sweep
  std::string variants = "SDE,ADE,ADE-STE,ADE-FTE,ADE-SPL";
  std::string sizes = "small,base";
  std::size_t seeds = 5;
  std::size_t jobs = 1;
  bool save_checkpoints = false;

  std::string output_dir = "runs/latest";

  // Keys set by a config file or flag rather than left at their defaults.
  std::set<std::string> explicit_keys;

  static const std::vector<std::string>& keys();
  static std::string help(const std::string& key);
  std::string get(const std::string& key) const;
  // Throws ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);

  void load_file(const std::filesystem::path& path);
  std::string to_text() const;
  void validate() const;

  EncoderConfig encoder_config(std::size_t vocab_size) const;
  EncoderConfig encoder_config(std::size_t vocab_size, const std::string& preset) const;
  TrainConfig train_config(std::uint64_t run_seed) const;
  LossConfig loss_config() const;
  SyntheticTaskConfig synthetic_config() const;
  TsneConfig tsne_config() const;
  std::vector<Variant> variant_list() const;
  std::vector<std::string> size_list() const;
};

// Process exit code for an error type: 2 config, 3 data, 4 numeric, 1 other.
int exit_code_for(const std::exception& e);

struct Datasets {
  std::vector<QAPair> train;
  std::vector<QAPair> eval;
};
Datasets load_datasets(const RunConfig& config);
std::vector<std::string> load_corpus(const RunConfig& config, const std::vector<QAPair>& eval);

// Writes config.txt and version.txt into the output directory.
void prepare_output_dir(const RunConfig& config);
std::string version_tag();

struct CellResult {
  std::string size;
  Variant variant = Variant::kAde;
  std::uint64_t seed = 0;
  double p_at_1 = 0.0;
  double mrr = 0.0;
  double final_loss = 0.0;
};

// Trains and evaluates one (size, variant, seed) cell. The trained model is
// returned through `model_out` when non-null.
CellResult run_cell(const RunConfig& config, const Datasets& data, const Tokenizer& tokenizer,
                    const std::vector<std::string>& corpus, const std::string& size,
                    Variant variant, std::uint64_t seed,
                    std::function<void(DualEncoderModel&&)> model_out = {});

int cmd_train(const RunConfig& config, std::ostream& out);
int cmd_eval(const RunConfig& config, std::ostream& out);
int cmd_compare(const RunConfig& config, std::ostream& out);
int cmd_analyze(const RunConfig& config, std::ostream& out);
int cmd_sweep(const RunConfig& config, std::ostream& out);

// Entry point shared by the executable and the tests.
int run(int argc, char** argv);

}  // namespace dualenc::cli
