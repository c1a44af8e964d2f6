#include "dualenc/tokenizer.hpp"

#include <cctype>
#include <fstream>

#include "dualenc/errors.hpp"

namespace dualenc {

std::string_view to_string(TokenizerMode mode) {
  return mode == TokenizerMode::kByte ? "byte" : "whitespace";
}

TokenizerMode parse_tokenizer_mode(std::string_view name) {
  if (name == "whitespace") return TokenizerMode::kWhitespace;
  if (name == "byte") return TokenizerMode::kByte;
  throw ConfigError("unknown tokenizer mode '" + std::string(name) +
                    "' (expected whitespace or byte)");
}

Tokenizer::Tokenizer(std::vector<std::string> tokens)
    : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto& tok = tokens_[i];
    if (tok.empty()) throw ConfigError("vocabulary contains an empty token");
    for (unsigned char c : tok) {
      if (std::isspace(c)) {
        throw ConfigError("vocabulary token '" + tok + "' contains whitespace");
      }
    }
    if (!ids_.emplace(tok, static_cast<int>(i) + kFirstTokenId).second) {
      throw ConfigError("duplicate vocabulary token '" + tok + "'");
    }
  }
}

Tokenizer Tokenizer::bytes() {
  Tokenizer t;
  t.mode_ = TokenizerMode::kByte;
  return t;
}

std::size_t Tokenizer::vocab_size() const {
  if (mode_ == TokenizerMode::kByte) return 256 + kFirstTokenId;
  return tokens_.size() + kFirstTokenId;
}

int Tokenizer::id_of(std::string_view token) const {
  if (mode_ == TokenizerMode::kByte) {
    if (token.size() != 1) return kUnkId;
    return static_cast<unsigned char>(token[0]) + kFirstTokenId;
  }
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

std::vector<std::string> Tokenizer::split(std::string_view text) const {
  std::vector<std::string> pieces;
  if (mode_ == TokenizerMode::kByte) {
    for (char c : text) pieces.emplace_back(1, c);
    return pieces;
  }
  std::string current;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      if (!current.empty()) pieces.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) pieces.push_back(std::move(current));
  return pieces;
}

TokenizedText Tokenizer::tokenize(std::string_view text,
                                  std::size_t max_len) const {
  if (max_len < 1) throw ArgumentError("tokenize: max_len must be >= 1");
  const auto pieces = split(text);
  if (pieces.empty()) {
    throw EmptyInputError("tokenize: text is empty after normalization");
  }
  TokenizedText out;
  out.ids.assign(max_len, kPadId);
  out.mask.assign(max_len, 0);
  const std::size_t n = std::min(max_len, pieces.size());
  for (std::size_t i = 0; i < n; ++i) {
    out.ids[i] = id_of(pieces[i]);
    out.mask[i] = 1;
  }
  return out;
}

void write_vocab_file(const std::filesystem::path& path,
                      const Tokenizer& tokenizer) {
  if (tokenizer.mode() != TokenizerMode::kWhitespace) {
    throw ConfigError("vocabulary files exist only for whitespace mode");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (const auto& tok : tokenizer.tokens()) out << tok << '\n';
}

Tokenizer read_vocab_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": empty vocabulary line");
    }
    tokens.push_back(line);
  }
  return Tokenizer(std::move(tokens));
}

}  // namespace dualenc
