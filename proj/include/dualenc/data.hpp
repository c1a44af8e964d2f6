#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dualenc/tokenizer.hpp"

namespace dualenc {

struct QAPair {
  std::string question;
  std::string answer;
  std::string id;

  bool operator==(const QAPair&) const = default;
};

// One JSON object per line with string fields "question" and "answer" and an
// optional "id" (string or integer). Missing ids become the 0-based record
// index. Blank lines are skipped.
std::vector<QAPair> load_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const QAPair> pairs);

// Whitespace mode: distinct lowercased tokens of all questions and answers,
// most frequent first, ties alphabetical. Byte mode: the fixed 258-id table.
Tokenizer build_vocab(std::span<const QAPair> pairs, TokenizerMode mode);

// Key/value retrieval task. A key is `key_len` question-vocabulary tokens, one
// per slot; its answer maps every slot through a fixed random bijection onto
// the answer vocabulary. Questions wrap the key in a random template word.
struct SyntheticTaskConfig {
  std::size_t n_train = 2000;
  std::size_t n_eval = 500;
  std::size_t vocab_q = 48;  // key tokens, split evenly over the slots
  std::size_t vocab_a = 48;
  std::size_t key_len = 3;
  // true: each slot draws from its own token range; false: all slots share
  // one pool and meaning depends on position.
  bool slot_tokens = true;
  // true: every slot has its own bijection; false: one bijection for all.
  bool slot_mappings = true;
  // Prefix answers with a template word from the answer vocabulary too.
  bool answer_template = false;
  // Distractor tokens inserted at random positions on each side, drawn
  // from side-specific pools of `noise_vocab` tokens.
  std::size_t noise_tokens = 0;
  std::size_t noise_vocab = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticTask {
  std::vector<QAPair> train;
  std::vector<QAPair> eval;
};

SyntheticTask gen_synthetic(const SyntheticTaskConfig& config);

// Unique answers of a split in first-occurrence order: the default
// retrieval corpus.
std::vector<std::string> unique_answers(std::span<const QAPair> pairs);

}  // namespace dualenc
