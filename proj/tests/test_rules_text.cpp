#include <doctest.h>

#include "gridflow/rules.hpp"
#include "gridflow/text.hpp"

using namespace gridflow;

TEST_CASE("builtin rule table parses with all sections") {
    const RuleTable& t = RuleTable::builtin();
    CHECK(t.version == 1);
    CHECK(t.lexicon.size() >= 8);
    CHECK(t.nouns.size() >= 6);
    CHECK(t.laws.size() >= 3);
    CHECK(t.transforms.size() >= 2);
    CHECK(t.temporals.size() >= 2);
    // The documented example entry.
    bool found = false;
    for (const auto& e : t.lexicon)
        if (e.phrase == std::vector<std::string>{"harvest", "lantern"}) {
            found = true;
            CHECK(e.entity == EntityDesc{Color::red, Shape::diamond});
        }
    CHECK(found);
}

TEST_CASE("rule table grammar errors are reported") {
    CHECK_THROWS_AS(RuleTable::parse("version 1\nlexicon x = nothere diamond\n"), ConfigError);
    CHECK_THROWS_AS(RuleTable::parse("version 2\nlexicon a b = red star\n"), ConfigError);
    CHECK_THROWS_AS(RuleTable::parse("version 1\nwhatkey a = b\n"), ConfigError);
    CHECK_THROWS_AS(RuleTable::parse("version 1\nlexicon a red star\n"), ConfigError);
    // Laws must reference declared nouns.
    CHECK_THROWS_AS(RuleTable::parse("version 1\n"
                                     "lexicon a b = red star\n"
                                     "noun stone = orange square\n"
                                     "law sink = stone ghost below\n"
                                     "transform m = left_of:right_of\n"
                                     "temporal candle = yellow square 5 -1 6\n"),
                    ConfigError);
}

TEST_CASE("transforms map every stated relation they claim to") {
    const RuleTable& t = RuleTable::builtin();
    for (const auto& tr : t.transforms) {
        for (int r = 0; r < 4; ++r) {
            auto rel = static_cast<Relation>(r);
            CHECK(tr.rewrite.count(rel) == 1);
        }
    }
    // The mirror swaps horizontal relations and keeps vertical ones.
    const SpatialTransform* mirror = nullptr;
    for (const auto& tr : t.transforms)
        if (tr.phrase == std::vector<std::string>{"in", "the", "mirror"}) mirror = &tr;
    REQUIRE(mirror != nullptr);
    CHECK(mirror->rewrite.at(Relation::left_of) == Relation::right_of);
    CHECK(mirror->rewrite.at(Relation::above) == Relation::above);
}

TEST_CASE("tokenizer covers the closed template vocabulary within the limit") {
    const RuleTable& t = RuleTable::builtin();
    Tokenizer tok = Tokenizer::build(t);
    CHECK(tok.vocab_size() <= 256);
    CHECK(tok.id("<pad>") == Tokenizer::kPad);
    CHECK(tok.id("<bos>") == Tokenizer::kBos);
    CHECK(tok.id("<eot>") == Tokenizer::kEot);
    CHECK(tok.id("<unk>") == Tokenizer::kUnk);
    for (const auto& w :
         {"harvest", "lantern", "stone", "mirror", "candle", "red", "diamond", "row", "col"})
        CHECK(tok.has(w));
}

TEST_CASE("tokenizer round trips and handles unknown words per mode") {
    Tokenizer tok = Tokenizer::build(RuleTable::builtin());
    std::vector<std::string> words = {"draw", "the", "harvest", "lantern", "at",
                                      "row", "four", "col", "seven"};
    auto ids = tok.encode(words);
    CHECK(tok.decode(ids) == words);
    CHECK(tok.decode_to_string(ids) == "draw the harvest lantern at row four col seven");

    CHECK_THROWS_AS(tok.encode({"xylophone"}), InputError);
    auto lenient = tok.encode({"draw", "xylophone"}, /*strict=*/false);
    CHECK(lenient[1] == Tokenizer::kUnk);
}

TEST_CASE("tokenizer ids are stable across rebuilds") {
    Tokenizer a = Tokenizer::build(RuleTable::builtin());
    Tokenizer b = Tokenizer::build(RuleTable::builtin());
    CHECK(a.vocab_size() == b.vocab_size());
    for (int i = 0; i < a.vocab_size(); ++i) CHECK(a.word(i) == b.word(i));
}

TEST_CASE("number words cover the coordinate range") {
    for (int i = 0; i <= 12; ++i) CHECK(!number_word(i).empty());
    CHECK_THROWS_AS(number_word(13), InputError);
    CHECK_THROWS_AS(number_word(-1), InputError);
}
