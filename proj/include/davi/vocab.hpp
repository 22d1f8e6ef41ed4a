#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "davi/common.hpp"

namespace davi {

// Closed word-level vocabulary shared by questions and answers.
constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kUnkId = 3;

class Tokenizer {
 public:
  Tokenizer() {
    static const char* words[] = {
        "<pad>", "<bos>", "<eos>", "<unk>",
        // question words
        "what", "color", "is", "the", "shape", "object", "where",
        // shapes
        "circle", "square", "triangle",
        // colors
        "red", "green", "blue", "yellow",
        // locations
        "left", "right", "top", "bottom"};
    for (const char* w : words) {
      index_[w] = static_cast<int>(words_.size());
      words_.emplace_back(w);
    }
  }

  static const Tokenizer& instance() {
    static const Tokenizer tok;
    return tok;
  }

  int vocab_size() const { return static_cast<int>(words_.size()); }

  const std::string& word(int id) const {
    if (id < 0 || id >= vocab_size())
      throw bounds_error("token id " + std::to_string(id) + " outside vocabulary");
    return words_[static_cast<std::size_t>(id)];
  }

  int id(std::string_view w) const {
    auto it = index_.find(std::string(w));
    return it == index_.end() ? kUnkId : it->second;
  }

  struct Encoded {
    std::vector<int> ids;
    bool had_unknown = false;
    bool truncated = false;
  };

  // [BOS, words..., EOS, PAD...] padded (or truncated, keeping the EOS) to
  // pad_to ids. pad_to <= 0 means no padding or truncation.
  Encoded encode(std::string_view text, int pad_to = 0) const {
    Encoded enc;
    enc.ids.push_back(kBosId);
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && text[i] == ' ') ++i;
      std::size_t j = i;
      while (j < text.size() && text[j] != ' ') ++j;
      if (j > i) {
        int id = this->id(text.substr(i, j - i));
        if (id == kUnkId) enc.had_unknown = true;
        enc.ids.push_back(id);
      }
      i = j;
    }
    enc.ids.push_back(kEosId);
    if (pad_to > 0) {
      if (static_cast<int>(enc.ids.size()) > pad_to) {
        enc.ids.resize(static_cast<std::size_t>(pad_to));
        enc.ids.back() = kEosId;
        enc.truncated = true;
      }
      while (static_cast<int>(enc.ids.size()) < pad_to) enc.ids.push_back(kPadId);
    }
    return enc;
  }

  // Inverse of encode on in-vocabulary text: joins words, skipping specials.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kPadId || id == kBosId) continue;
      if (id == kEosId) break;
      if (!out.empty()) out += ' ';
      out += word(id);
    }
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

inline std::vector<std::uint8_t> pad_mask_of(const std::vector<int>& ids) {
  std::vector<std::uint8_t> mask(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = ids[i] == kPadId ? 1 : 0;
  return mask;
}

}  // namespace davi
