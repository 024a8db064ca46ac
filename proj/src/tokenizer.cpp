#include "dacvlm/tokenizer.hpp"

#include <sstream>

#include "dacvlm/errors.hpp"

namespace dacvlm {

namespace {

const char* kWords[] = {
    // colors
    "red", "green", "blue", "yellow", "purple", "orange", "black", "gray",
    // shapes
    "circle", "square", "triangle", "circles", "squares", "triangles", "shapes",
    // numbers
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen",
    "eighteen", "nineteen", "twenty",
    // grammar
    "a", "an", "empty", "canvas", "at", "row", "column", "what", "color", "is", "the",
    "how", "many", "shape", "are", "there", "yes", "no", "left", "of", "right", "above",
    "below", "plus", "minus", "times", "equals", "please", "describe", "image", "in",
    "answer", "question", "nothing", "and", "this", "shown", ",", "?", ".", ":",
};

}  // namespace

Tokenizer::Tokenizer() {
    id_to_token_.reserve(vocab_size);
    id_to_token_.push_back("<pad>");
    id_to_token_.push_back("<bos>");
    id_to_token_.push_back("<eos>");
    for (const char* w : kWords) {
        word_to_id_[w] = static_cast<std::int64_t>(id_to_token_.size());
        id_to_token_.push_back(w);
    }
    byte_base_ = static_cast<std::int64_t>(id_to_token_.size());
    for (int b = 0; b < 256; ++b) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "<0x%02X>", b);
        id_to_token_.push_back(buf);
    }
    while (id_to_token_.size() < vocab_size) {
        id_to_token_.push_back("<reserved_" + std::to_string(id_to_token_.size()) + ">");
    }
    if (id_to_token_.size() != vocab_size) {
        throw ConfigError("tokenizer: grammar vocabulary exceeds the fixed size of 512");
    }
}

const Tokenizer& Tokenizer::instance() {
    static Tokenizer tok;
    return tok;
}

std::vector<std::int64_t> Tokenizer::encode(const std::string& text) const {
    std::vector<std::int64_t> ids;
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
        auto it = word_to_id_.find(word);
        if (it != word_to_id_.end()) {
            ids.push_back(it->second);
        } else {
            for (unsigned char c : word) {
                ids.push_back(byte_base_ + static_cast<std::int64_t>(c));
            }
        }
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<std::int64_t>& ids) const {
    std::string out;
    bool last_was_byte = false;
    for (std::int64_t id : ids) {
        if (id < 0 || id >= vocab_size) {
            throw DimensionError("decode: token id " + std::to_string(id) + " out of range");
        }
        if (id == pad_id || id == bos_id || id == eos_id) continue;
        const bool is_byte = id >= byte_base_ && id < byte_base_ + 256;
        if (is_byte) {
            if (!last_was_byte && !out.empty()) out += ' ';
            out += static_cast<char>(id - byte_base_);
        } else {
            if (!out.empty()) out += ' ';
            out += id_to_token_[static_cast<std::size_t>(id)];
        }
        last_was_byte = is_byte;
    }
    return out;
}

bool Tokenizer::has_word(const std::string& word) const { return word_to_id_.count(word) > 0; }

std::int64_t Tokenizer::word_id(const std::string& word) const {
    auto it = word_to_id_.find(word);
    if (it == word_to_id_.end()) {
        throw ConfigError("tokenizer: unknown word '" + word + "'");
    }
    return it->second;
}

const std::string& Tokenizer::token_string(std::int64_t id) const {
    return id_to_token_.at(static_cast<std::size_t>(id));
}

}  // namespace dacvlm
