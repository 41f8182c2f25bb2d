#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "gridflow/rules.hpp"
#include "gridflow/types.hpp"

namespace gridflow {

// Word-level tokenizer over a closed vocabulary assembled from a fixed core
// word list plus everything the rule tables can emit. Ids are stable for a
// given rule table.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEot = 2;  // segment-end token
    static constexpr int kUnk = 3;

    static Tokenizer build(const RuleTable& rules, int vocab_limit = 256);

    int vocab_size() const { return static_cast<int>(words_.size()); }

    // strict: unknown word is an error. lenient: maps to <unk>.
    std::vector<int> encode(const std::vector<std::string>& words, bool strict = true) const;
    std::vector<std::string> decode(const std::vector<int>& ids) const;
    std::string decode_to_string(const std::vector<int>& ids) const;

    int id(const std::string& word) const;        // throws on unknown
    bool has(const std::string& word) const;
    const std::string& word(int id) const;

    static std::vector<std::string> split(const std::string& text);

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

// English word for small numbers used in instructions (0..12).
const std::string& number_word(int n);

// Relation rendered as instruction words, e.g. left_of -> {"left","of"}.
std::vector<std::string> relation_words(Relation r);

}  // namespace gridflow
