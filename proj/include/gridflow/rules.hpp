#pragma once

#include <map>
#include <string>
#include <vector>

#include "gridflow/types.hpp"

namespace gridflow {

struct LexiconEntry {
    std::vector<std::string> phrase;  // instruction words, e.g. {"harvest", "lantern"}
    EntityDesc entity;
};

struct ScienceNoun {
    std::string name;
    EntityDesc entity;
};

struct ScienceLaw {
    std::string name;
    std::string noun_a;
    std::string noun_b;
    Relation relation;  // holds between noun_a and noun_b
};

struct SpatialTransform {
    std::vector<std::string> phrase;           // e.g. {"in", "the", "mirror"}
    std::map<Relation, Relation> rewrite;      // stated relation -> true relation
};

struct TemporalObject {
    std::string name;
    EntityDesc entity;   // one segment
    int start_segments;
    int delta_per_step;
    int max_segments;
};

struct MazeRules {
    int region = 6;  // mazes live in the top-left region x region subgrid
    EntityDesc wall{Color::black, Shape::square};
    EntityDesc path{Color::yellow, Shape::circle};
    EntityDesc start{Color::green, Shape::star};
    EntityDesc goal{Color::red, Shape::star};
};

// Parsed, versioned rule tables. Single source of truth for the hidden
// knowledge used by instruction sampling, compilation and oracles.
class RuleTable {
public:
    static RuleTable parse(const std::string& text);
    static RuleTable load(const std::string& path);
    // The table compiled into the binary from data/rules.v1.txt.
    static const RuleTable& builtin();

    int version = 0;
    std::vector<LexiconEntry> lexicon;
    std::vector<ScienceNoun> nouns;
    std::vector<ScienceLaw> laws;
    std::vector<SpatialTransform> transforms;
    std::vector<TemporalObject> temporals;
    MazeRules maze;

    const ScienceNoun& noun(const std::string& name) const;

    // Every word the tables can put into instruction or reasoning text.
    std::vector<std::string> vocabulary_words() const;
};

}  // namespace gridflow
