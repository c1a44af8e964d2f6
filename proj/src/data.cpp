#include "dualenc/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "dualenc/errors.hpp"

namespace dualenc {

namespace {

std::string location(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

std::string required_string(const nlohmann::json& record, const char* field,
                            const std::filesystem::path& path, std::size_t line) {
  auto it = record.find(field);
  if (it == record.end()) {
    throw DataError(location(path, line) + ": missing field \"" + field + "\"");
  }
  if (!it->is_string()) {
    throw DataError(location(path, line) + ": field \"" + field + "\" must be a string");
  }
  std::string value = it->get<std::string>();
  if (value.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw DataError(location(path, line) + ": field \"" + field + "\" is empty");
  }
  return value;
}

}  // namespace

std::vector<QAPair> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read dataset " + path.string());
  std::vector<QAPair> pairs;
  std::unordered_set<std::string> seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(location(path, line) + ": malformed JSON (" + e.what() + ")");
    }
    if (!record.is_object()) throw DataError(location(path, line) + ": record is not an object");
    QAPair pair;
    pair.question = required_string(record, "question", path, line);
    pair.answer = required_string(record, "answer", path, line);
    if (auto it = record.find("id"); it != record.end()) {
      if (it->is_string()) {
        pair.id = it->get<std::string>();
      } else if (it->is_number_integer()) {
        pair.id = std::to_string(it->get<long long>());
      } else {
        throw DataError(location(path, line) + ": field \"id\" must be a string or integer");
      }
    } else {
      pair.id = std::to_string(pairs.size());
    }
    if (!seen.insert(pair.id).second) {
      throw DataError(location(path, line) + ": duplicate id \"" + pair.id + "\"");
    }
    pairs.push_back(std::move(pair));
  }
  if (pairs.empty()) throw ConfigError("empty dataset " + path.string());
  return pairs;
}

void write_jsonl(const std::filesystem::path& path, std::span<const QAPair> pairs) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset " + path.string());
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["id"] = p.id;
    j["question"] = p.question;
    j["answer"] = p.answer;
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("failed writing dataset " + path.string());
}

Tokenizer build_vocab(std::span<const QAPair> pairs, TokenizerMode mode) {
  if (mode == TokenizerMode::kByte) return Tokenizer::bytes();
  if (pairs.empty()) throw ConfigError("cannot build a vocabulary from no pairs");
  const Tokenizer splitter;
  std::map<std::string, std::size_t> counts;
  for (const auto& p : pairs) {
    for (const auto* text : {&p.question, &p.answer}) {
      for (auto& tok : splitter.split(*text)) ++counts[tok];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
  // The map already orders names, so a stable sort on count keeps ties alphabetical.
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& x, const auto& y) { return x.second > y.second; });
  std::vector<std::string> tokens;
  tokens.reserve(sorted.size());
  for (auto& [tok, n] : sorted) tokens.push_back(tok);
  return Tokenizer(std::move(tokens));
}

void SyntheticTaskConfig::validate() const {
  if (n_train == 0) throw ConfigError("synthetic task: n_train must be >= 1");
  if (n_eval == 0) throw ConfigError("synthetic task: n_eval must be >= 1");
  if (key_len == 0) throw ConfigError("synthetic task: key_len must be >= 1");
  if (vocab_q < key_len || (slot_tokens && vocab_q % key_len != 0)) {
    throw ConfigError("synthetic task: vocab_q (" + std::to_string(vocab_q) +
                      ") must be a positive multiple of key_len (" +
                      std::to_string(key_len) + ")");
  }
  if ((slot_tokens && vocab_a % key_len != 0) || vocab_a < vocab_q) {
    throw ConfigError("synthetic task: vocab_a (" + std::to_string(vocab_a) +
                      ") must be a multiple of key_len and at least vocab_q");
  }
  if (noise_tokens > 0 && noise_vocab == 0) {
    throw ConfigError("synthetic task: noise_tokens > 0 needs noise_vocab >= 1");
  }
  const std::size_t slot = slot_tokens ? vocab_q / key_len : vocab_q;
  const std::size_t needed = n_train + n_eval;
  double space = 1.0;
  for (std::size_t i = 0; i < key_len; ++i) space *= static_cast<double>(slot);
  if (space < static_cast<double>(needed)) {
    throw ConfigError("synthetic task: vocabulary too small: " + std::to_string(slot) +
                      "^" + std::to_string(key_len) + " distinct keys < " +
                      std::to_string(needed) + " pairs requested");
  }
}

SyntheticTask gen_synthetic(const SyntheticTaskConfig& config) {
  config.validate();
  static const char* const kTemplates[] = {"what", "which", "find", "name"};
  static const char* const kAnswerTemplates[] = {"it", "is", "this", "here"};
  const std::size_t L = config.key_len;
  const std::size_t slot_q = config.slot_tokens ? config.vocab_q / L : config.vocab_q;
  const std::size_t slot_a = config.slot_tokens ? config.vocab_a / L : config.vocab_a;
  const std::size_t stride_q = config.slot_tokens ? slot_q : 0;
  const std::size_t stride_a = config.slot_tokens ? slot_a : 0;
  std::mt19937_64 rng(config.seed);

  // Injection of question tokens into answer tokens, per slot or shared.
  std::vector<std::vector<std::size_t>> mapping(config.slot_mappings ? L : 1);
  for (auto& m : mapping) {
    std::vector<std::size_t> perm(slot_a);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    m.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(slot_q));
  }

  // Distinct keys, drawn without replacement.
  const std::size_t needed = config.n_train + config.n_eval;
  std::vector<std::vector<std::size_t>> keys;
  keys.reserve(needed);
  std::set<std::vector<std::size_t>> seen;
  std::uniform_int_distribution<std::size_t> pick(0, slot_q - 1);
  double space = 1.0;
  for (std::size_t i = 0; i < L; ++i) space *= static_cast<double>(slot_q);
  if (space <= 2.0 * static_cast<double>(needed)) {
    // Dense regime: enumerate every key and shuffle.
    const auto total = static_cast<std::size_t>(space);
    std::vector<std::size_t> codes(total);
    std::iota(codes.begin(), codes.end(), 0);
    std::shuffle(codes.begin(), codes.end(), rng);
    for (std::size_t c = 0; c < needed; ++c) {
      std::vector<std::size_t> key(L);
      std::size_t code = codes[c];
      for (std::size_t p = 0; p < L; ++p) {
        key[p] = code % slot_q;
        code /= slot_q;
      }
      keys.push_back(std::move(key));
    }
  } else {
    while (keys.size() < needed) {
      std::vector<std::size_t> key(L);
      for (auto& k : key) k = pick(rng);
      if (seen.insert(key).second) keys.push_back(std::move(key));
    }
  }

  std::uniform_int_distribution<std::size_t> pick_template(0, std::size(kTemplates) - 1);
  std::uniform_int_distribution<std::size_t> pick_noise(0, std::max<std::size_t>(config.noise_vocab, 1) - 1);
  // Distractors go to uniformly random gaps between key tokens.
  auto add_noise = [&](std::vector<std::string>& tokens, const char* prefix) {
    for (std::size_t n = 0; n < config.noise_tokens; ++n) {
      std::uniform_int_distribution<std::size_t> gap(0, tokens.size());
      const auto at = gap(rng);
      tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(at),
                    prefix + std::to_string(pick_noise(rng)));
    }
  };
  auto join = [](const std::vector<std::string>& tokens) {
    std::string out;
    for (const auto& t : tokens) out += (out.empty() ? "" : " ") + t;
    return out;
  };
  SyntheticTask task;
  for (std::size_t i = 0; i < needed; ++i) {
    QAPair pair;
    std::vector<std::string> q_key, a_key;
    const std::string q_template = kTemplates[pick_template(rng)];
    std::string a_template;
    if (config.answer_template) a_template = kAnswerTemplates[pick_template(rng)];
    for (std::size_t p = 0; p < L; ++p) {
      const auto& m = mapping[config.slot_mappings ? p : 0];
      q_key.push_back("q" + std::to_string(p * stride_q + keys[i][p]));
      a_key.push_back("a" + std::to_string(p * stride_a + m[keys[i][p]]));
    }
    add_noise(q_key, "x");
    add_noise(a_key, "y");
    pair.question = q_template + " " + join(q_key);
    pair.answer = a_template.empty() ? join(a_key) : a_template + " " + join(a_key);
    if (i < config.n_train) {
      pair.id = "train-" + std::to_string(i);
      task.train.push_back(std::move(pair));
    } else {
      pair.id = "eval-" + std::to_string(i - config.n_train);
      task.eval.push_back(std::move(pair));
    }
  }
  return task;
}

std::vector<std::string> unique_answers(std::span<const QAPair> pairs) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& p : pairs) {
    if (seen.insert(p.answer).second) out.push_back(p.answer);
  }
  return out;
}

}  // namespace dualenc
