#include "ttsv/tokenizer.hpp"

#include <stdexcept>

namespace ttsv {

Tokenizer::Tokenizer() {
  const std::string chars =
      "0123456789"
      "abcdefghij"
      "CRSPA"
      "+%=:# ?";
  id_to_char_.assign(chars.begin(), chars.end());
  for (auto& x : char_to_id_) {
    x = -1;
  }
  for (size_t i = 0; i < id_to_char_.size(); ++i) {
    char_to_id_[static_cast<uint8_t>(id_to_char_[i])] = static_cast<int32_t>(i) + 4;
  }
}

std::vector<int32_t> Tokenizer::encode(std::string_view text) const {
  std::vector<int32_t> out;
  out.reserve(text.size());
  for (char c : text) {
    const int32_t id = char_to_id_[static_cast<uint8_t>(c)];
    if (id < 0) {
      throw std::invalid_argument(std::string("Tokenizer: character '") + c +
                                  "' not in vocabulary");
    }
    out.push_back(id);
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int32_t> ids) const {
  std::string out;
  for (int32_t id : ids) {
    switch (id) {
      case kPad: out += "<PAD>"; break;
      case kBos: out += "<BOS>"; break;
      case kEos: out += "<EOS>"; break;
      case kSep: out += "<SEP>"; break;
      default: {
        const int64_t idx = id - 4;
        if (idx < 0 || idx >= static_cast<int64_t>(id_to_char_.size())) {
          out += "<?>";
        } else {
          out.push_back(id_to_char_[static_cast<size_t>(idx)]);
        }
      }
    }
  }
  return out;
}

}  // namespace ttsv
