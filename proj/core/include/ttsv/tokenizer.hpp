#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ttsv {

/// Fixed character-level vocabulary: digits, letters a-j, task tags, a few
/// symbols, plus the four specials. Specials are never produced by encode().
class Tokenizer {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kBos = 1;
  static constexpr int32_t kEos = 2;
  static constexpr int32_t kSep = 3;

  Tokenizer();

  int32_t vocab_size() const { return static_cast<int32_t>(id_to_char_.size() + 4); }

  /// Throws on characters outside the vocabulary.
  std::vector<int32_t> encode(std::string_view text) const;

  /// Total over any id sequence; specials render as <PAD>/<BOS>/<EOS>/<SEP>
  /// markers (the '<' character is not in the vocabulary, so a marker can
  /// never collide with a plain string).
  std::string decode(std::span<const int32_t> ids) const;

 private:
  std::vector<char> id_to_char_;
  int32_t char_to_id_[256];
};

}  // namespace ttsv
