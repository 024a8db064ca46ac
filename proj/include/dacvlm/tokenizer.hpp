#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace dacvlm {

// Fixed word-level tokenizer over the synthetic grammar with byte fallback.
// The vocabulary is deterministic and padded to exactly 512 entries so the
// model config never drifts from the tokenizer.
class Tokenizer {
  public:
    static constexpr std::int64_t pad_id = 0;
    static constexpr std::int64_t bos_id = 1;
    static constexpr std::int64_t eos_id = 2;
    static constexpr std::int64_t vocab_size = 512;

    static const Tokenizer& instance();

    // Splits on whitespace; in-vocabulary words map to one id, anything else
    // falls back to one id per byte.
    std::vector<std::int64_t> encode(const std::string& text) const;
    std::string decode(const std::vector<std::int64_t>& ids) const;

    bool has_word(const std::string& word) const;
    std::int64_t word_id(const std::string& word) const;
    const std::string& token_string(std::int64_t id) const;

  private:
    Tokenizer();
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, std::int64_t> word_to_id_;
    std::int64_t byte_base_ = 0;
};

}  // namespace dacvlm
