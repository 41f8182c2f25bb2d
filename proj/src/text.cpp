#include "gridflow/text.hpp"

#include <algorithm>
#include <sstream>

#include "gridflow/error.hpp"

namespace gridflow {

namespace {

// Every non-rule-table word any template, derivation, reflection or directive
// can produce. Closed by construction; the corpus builders only compose
// sentences out of these plus rule-table words.
const std::vector<std::string>& core_words() {
    static const std::vector<std::string> w = {
        ".", ":",
        "a", "an", "the", "and", "at", "of", "is", "are", "in", "on", "to",
        "with", "draw", "show", "there", "then",
        "row", "col", "exactly", "left", "right", "above", "below", "adjacent",
        "beside", "viewed", "after", "segments", "steps",
        "path", "from", "walls", "avoiding", "valid",
        "add", "remove", "move", "recolor", "keep", "nothing",
        "missing", "wrong", "extra", "misplaced", "empty", "looks", "good",
        "checking", "draft", "done", "item", "so", "means", "becomes",
        "minus", "plus", "law", "applies", "change",
        "zero", "one", "two", "three", "four", "five", "six", "seven",
        "eight", "nine", "ten", "eleven", "twelve",
    };
    return w;
}

}  // namespace

Tokenizer Tokenizer::build(const RuleTable& rules, int vocab_limit) {
    Tokenizer t;
    t.words_ = {"<pad>", "<bos>", "<eot>", "<unk>"};
    auto add = [&t](const std::string& w) {
        if (t.index_.count(w)) return;
        t.index_[w] = static_cast<int>(t.words_.size());
        t.words_.push_back(w);
    };
    for (int i = 0; i < 4; ++i) t.index_[t.words_[i]] = i;

    for (const auto& w : core_words()) add(w);
    for (const auto& w : color_words()) add(w);
    for (const auto& w : shape_words()) add(w);
    for (const auto& w : shape_plural_words()) add(w);

    auto rule_words = rules.vocabulary_words();
    for (const auto& law : rules.laws) rule_words.push_back(law.name);
    std::sort(rule_words.begin(), rule_words.end());
    for (const auto& w : rule_words) add(w);

    if (t.vocab_size() > vocab_limit)
        throw ConfigError("vocabulary " + std::to_string(t.vocab_size()) +
                          " exceeds limit " + std::to_string(vocab_limit));
    return t;
}

std::vector<int> Tokenizer::encode(const std::vector<std::string>& words, bool strict) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) {
        auto it = index_.find(w);
        if (it == index_.end()) {
            if (strict) throw InputError("unknown word '" + w + "'");
            ids.push_back(kUnk);
        } else {
            ids.push_back(it->second);
        }
    }
    return ids;
}

std::vector<std::string> Tokenizer::decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(word(id));
    return out;
}

std::string Tokenizer::decode_to_string(const std::vector<int>& ids) const {
    std::string s;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) s += ' ';
        s += word(ids[i]);
    }
    return s;
}

int Tokenizer::id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw InputError("unknown word '" + word + "'");
    return it->second;
}

bool Tokenizer::has(const std::string& word) const { return index_.count(word) > 0; }

const std::string& Tokenizer::word(int id) const {
    if (id < 0 || id >= vocab_size()) throw InputError("token id out of range");
    return words_[static_cast<size_t>(id)];
}

std::vector<std::string> Tokenizer::split(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

const std::string& number_word(int n) {
    static const std::vector<std::string> words = {
        "zero", "one", "two", "three", "four", "five", "six",
        "seven", "eight", "nine", "ten", "eleven", "twelve"};
    if (n < 0 || n >= static_cast<int>(words.size()))
        throw InputError("no word for number " + std::to_string(n));
    return words[static_cast<size_t>(n)];
}

std::vector<std::string> relation_words(Relation r) {
    switch (r) {
        case Relation::left_of: return {"left", "of"};
        case Relation::right_of: return {"right", "of"};
        case Relation::above: return {"above"};
        case Relation::below: return {"below"};
        case Relation::adjacent: return {"adjacent", "to"};
    }
    throw InputError("bad relation");
}

}  // namespace gridflow
