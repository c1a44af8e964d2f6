#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dualenc {

enum class TokenizerMode { kWhitespace, kByte };

std::string_view to_string(TokenizerMode mode);
TokenizerMode parse_tokenizer_mode(std::string_view name);

struct TokenizedText {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
};

// Token <-> id table. Ids 0 and 1 are reserved for padding and unknown
// tokens; real tokens start at 2. Whitespace mode lowercases and splits on
// ASCII whitespace; byte mode maps each byte b to id b + 2.
class Tokenizer {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kUnkId = 1;
  static constexpr int kFirstTokenId = 2;

  Tokenizer() : Tokenizer(std::vector<std::string>{}) {}
  explicit Tokenizer(std::vector<std::string> tokens);
  static Tokenizer bytes();

  TokenizerMode mode() const { return mode_; }
  std::size_t vocab_size() const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  int id_of(std::string_view token) const;

  // Normalized pieces of `text` before id lookup.
  std::vector<std::string> split(std::string_view text) const;
  // Fixed-length ids/mask, truncated from the right and padded with kPadId.
  TokenizedText tokenize(std::string_view text, std::size_t max_len) const;

  bool operator==(const Tokenizer& other) const {
    return mode_ == other.mode_ && tokens_ == other.tokens_;
  }

 private:
  TokenizerMode mode_ = TokenizerMode::kWhitespace;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// One token per line; line n (0-based) holds the token with id n + 2.
void write_vocab_file(const std::filesystem::path& path,
                      const Tokenizer& tokenizer);
Tokenizer read_vocab_file(const std::filesystem::path& path);

}  // namespace dualenc
