#include "gridflow/rules.hpp"

#include <fstream>
#include <sstream>

#include "gridflow/error.hpp"

namespace gridflow {

namespace {

std::vector<std::string> split_words(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

EntityDesc parse_desc(const std::string& color_w, const std::string& shape_w,
                      const std::string& where) {
    auto c = color_from_word(color_w);
    auto s = shape_from_word(shape_w);
    if (!c || !s) throw ConfigError("rule table: bad entity '" + color_w + " " + shape_w + "' in " + where);
    return EntityDesc{*c, *s};
}

}  // namespace

RuleTable RuleTable::parse(const std::string& text) {
    RuleTable t;
    std::istringstream is(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        auto hash = raw.find('#');
        if (hash != std::string::npos) raw = raw.substr(0, hash);
        auto words = split_words(raw);
        if (words.empty()) continue;
        const std::string& head = words[0];
        auto ctx = "line " + std::to_string(lineno);

        if (head == "version") {
            if (words.size() != 2) throw ConfigError("rule table: bad version, " + ctx);
            t.version = std::stoi(words[1]);
            continue;
        }
        // All other entries have the form: head key... = value...
        auto eq = std::find(words.begin(), words.end(), "=");
        if (eq == words.end()) throw ConfigError("rule table: missing '=', " + ctx);
        std::vector<std::string> key(words.begin() + 1, eq);
        std::vector<std::string> val(eq + 1, words.end());
        if (key.empty() || val.empty()) throw ConfigError("rule table: empty entry, " + ctx);

        if (head == "lexicon") {
            if (val.size() != 2) throw ConfigError("rule table: lexicon wants '<color> <shape>', " + ctx);
            t.lexicon.push_back({key, parse_desc(val[0], val[1], ctx)});
        } else if (head == "noun") {
            if (key.size() != 1 || val.size() != 2)
                throw ConfigError("rule table: noun wants 'noun <name> = <color> <shape>', " + ctx);
            t.nouns.push_back({key[0], parse_desc(val[0], val[1], ctx)});
        } else if (head == "law") {
            if (key.size() != 1 || val.size() != 3)
                throw ConfigError("rule table: law wants 'law <name> = <a> <b> <relation>', " + ctx);
            auto rel = relation_from_word(val[2]);
            if (!rel) throw ConfigError("rule table: bad relation '" + val[2] + "', " + ctx);
            t.laws.push_back({key[0], val[0], val[1], *rel});
        } else if (head == "transform") {
            SpatialTransform tr;
            tr.phrase = key;
            for (const auto& pair : val) {
                auto colon = pair.find(':');
                if (colon == std::string::npos)
                    throw ConfigError("rule table: transform wants rel:rel pairs, " + ctx);
                auto from = relation_from_word(pair.substr(0, colon));
                auto to = relation_from_word(pair.substr(colon + 1));
                if (!from || !to) throw ConfigError("rule table: bad relation pair '" + pair + "', " + ctx);
                tr.rewrite[*from] = *to;
            }
            t.transforms.push_back(std::move(tr));
        } else if (head == "temporal") {
            if (key.size() != 1 || val.size() != 5)
                throw ConfigError("rule table: temporal wants '<color> <shape> <start> <delta> <max>', " + ctx);
            TemporalObject obj;
            obj.name = key[0];
            obj.entity = parse_desc(val[0], val[1], ctx);
            obj.start_segments = std::stoi(val[2]);
            obj.delta_per_step = std::stoi(val[3]);
            obj.max_segments = std::stoi(val[4]);
            t.temporals.push_back(std::move(obj));
        } else if (head == "maze") {
            if (key.size() != 1) throw ConfigError("rule table: maze wants one key, " + ctx);
            if (key[0] == "region") {
                if (val.size() != 1) throw ConfigError("rule table: maze region wants one value, " + ctx);
                t.maze.region = std::stoi(val[0]);
            } else if (val.size() == 2) {
                auto d = parse_desc(val[0], val[1], ctx);
                if (key[0] == "wall") t.maze.wall = d;
                else if (key[0] == "path") t.maze.path = d;
                else if (key[0] == "start") t.maze.start = d;
                else if (key[0] == "goal") t.maze.goal = d;
                else throw ConfigError("rule table: unknown maze key '" + key[0] + "', " + ctx);
            } else {
                throw ConfigError("rule table: bad maze entry, " + ctx);
            }
        } else {
            throw ConfigError("rule table: unknown entry '" + head + "', " + ctx);
        }
    }
    if (t.version != 1) throw ConfigError("rule table: unsupported version " + std::to_string(t.version));
    if (t.lexicon.empty() || t.nouns.empty() || t.laws.empty() || t.transforms.empty() ||
        t.temporals.empty())
        throw ConfigError("rule table: missing sections");
    for (const auto& law : t.laws) {
        t.noun(law.noun_a);
        t.noun(law.noun_b);
    }
    return t;
}

RuleTable RuleTable::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open rule table: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

const ScienceNoun& RuleTable::noun(const std::string& name) const {
    for (const auto& n : nouns)
        if (n.name == name) return n;
    throw ConfigError("rule table: unknown noun '" + name + "'");
}

std::vector<std::string> RuleTable::vocabulary_words() const {
    std::vector<std::string> out;
    for (const auto& e : lexicon)
        for (const auto& w : e.phrase) out.push_back(w);
    for (const auto& n : nouns) out.push_back(n.name);
    for (const auto& tr : transforms)
        for (const auto& w : tr.phrase) out.push_back(w);
    for (const auto& obj : temporals) out.push_back(obj.name);
    return out;
}

extern const char kBuiltinRuleText[];  // generated from data/rules.v1.txt

const RuleTable& RuleTable::builtin() {
    static const RuleTable t = parse(kBuiltinRuleText);
    return t;
}

}  // namespace gridflow
