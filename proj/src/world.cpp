#include "gridflow/world.hpp"

#include <algorithm>
#include <deque>
#include <set>
#include <sstream>

#include "gridflow/error.hpp"

namespace gridflow {

void Scene::validate() const {
    std::set<std::pair<int, int>> seen;
    for (const auto& e : entities) {
        if (e.row < 0 || e.row >= grid_h || e.col < 0 || e.col >= grid_w)
            throw InputError("entity out of bounds");
        if (!seen.insert({e.row, e.col}).second)
            throw InputError("two entities share cell (" + std::to_string(e.row) + "," +
                             std::to_string(e.col) + ")");
    }
}

bool Scene::occupied(Cell c) const { return at(c) != nullptr; }

const Entity* Scene::at(Cell c) const {
    for (const auto& e : entities)
        if (e.row == c.row && e.col == c.col) return &e;
    return nullptr;
}

Entity* Scene::at(Cell c) {
    for (auto& e : entities)
        if (e.row == c.row && e.col == c.col) return &e;
    return nullptr;
}

std::optional<EntityDesc> GridImage::desc_of_code(int code) {
    if (code <= 0 || code >= code_count()) return std::nullopt;
    int v = code - 1;
    return EntityDesc{static_cast<Color>(v / kNumShapes), static_cast<Shape>(v % kNumShapes)};
}

const std::string& category_name(KnowledgeCategory c) {
    static const std::vector<std::string> names = {"cultural", "natural_science", "spatial",
                                                   "temporal", "logical"};
    return names[static_cast<size_t>(c)];
}

KnowledgeCategory category_from_name(const std::string& name) {
    for (int i = 0; i < kNumCategories; ++i)
        if (category_name(static_cast<KnowledgeCategory>(i)) == name)
            return static_cast<KnowledgeCategory>(i);
    throw InputError("unknown category '" + name + "'");
}

const std::string& compositional_name(CompositionalKind k) {
    static const std::vector<std::string> names = {"single_object", "two_object", "counting",
                                                   "colors",        "position",   "attribution"};
    return names[static_cast<size_t>(k)];
}

std::vector<std::string> Selector::phrase_words() const {
    std::vector<std::string> out;
    if (color) out.push_back(to_word(*color));
    if (shape) out.push_back(to_word(*shape));
    else out.push_back("item");
    return out;
}

namespace {

std::vector<std::string> plural_phrase_words(const Selector& s) {
    std::vector<std::string> out;
    if (s.color) out.push_back(to_word(*s.color));
    if (s.shape) out.push_back(shape_plural_words()[static_cast<int>(*s.shape)]);
    else out.push_back("items");
    return out;
}

void append(std::vector<std::string>& to, const std::vector<std::string>& from) {
    to.insert(to.end(), from.begin(), from.end());
}

void append_cell(std::vector<std::string>& to, Cell c) {
    append(to, {"row", number_word(c.row), "col", number_word(c.col)});
}

}  // namespace

Constraint Constraint::present(Selector s, std::optional<Cell> at) {
    Constraint c;
    c.kind = Kind::entity_present;
    c.a = s;
    c.at_cell = at;
    return c;
}

Constraint Constraint::attribute(Selector s, AttrKind k, int v) {
    Constraint c;
    c.kind = Kind::attribute_equals;
    c.a = s;
    c.attr = k;
    c.value = v;
    return c;
}

Constraint Constraint::related(Selector a, Relation r, Selector b) {
    Constraint c;
    c.kind = Kind::relation;
    c.a = a;
    c.b = b;
    c.rel = r;
    return c;
}

Constraint Constraint::count(Selector s, int n) {
    Constraint c;
    c.kind = Kind::count_equals;
    c.a = s;
    c.value = n;
    return c;
}

Constraint Constraint::path(Cell start, Cell goal) {
    Constraint c;
    c.kind = Kind::path_valid;
    c.start = start;
    c.goal = goal;
    return c;
}

Constraint Constraint::after_steps(const std::string& object, int start_segments, int steps) {
    Constraint c;
    c.kind = Kind::state_after_steps;
    c.object = object;
    c.start_segments = start_segments;
    c.value = steps;
    return c;
}

int temporal_segments_after(const TemporalObject& obj, int start_segments, int steps) {
    int n = start_segments + obj.delta_per_step * steps;
    return std::clamp(n, 0, obj.max_segments);
}

std::vector<std::string> Constraint::serialize_words(const RuleTable& rules) const {
    std::vector<std::string> out;
    switch (kind) {
        case Kind::entity_present:
            append(out, {"there", "is", "a"});
            append(out, a.phrase_words());
            if (at_cell) {
                out.push_back("at");
                append_cell(out, *at_cell);
            }
            break;
        case Kind::attribute_equals:
            append(out, {"the"});
            append(out, a.phrase_words());
            if (attr == AttrKind::row) {
                append(out, {"is", "at", "row", number_word(value)});
            } else if (attr == AttrKind::col) {
                append(out, {"is", "at", "col", number_word(value)});
            } else if (attr == AttrKind::color) {
                append(out, {"is", to_word(static_cast<Color>(value))});
            } else {
                append(out, {"is", "a", to_word(static_cast<Shape>(value))});
            }
            break;
        case Kind::relation:
            append(out, {"the"});
            append(out, a.phrase_words());
            out.push_back("is");
            append(out, relation_words(rel));
            out.push_back("the");
            append(out, b.phrase_words());
            break;
        case Kind::count_equals:
            if (value == 1) {
                append(out, {"there", "is", "exactly", "one"});
                append(out, a.phrase_words());
            } else {
                append(out, {"there", "are", "exactly", number_word(value)});
                append(out, plural_phrase_words(a));
            }
            break;
        case Kind::path_valid:
            append(out, {"the", "path", "from"});
            append_cell(out, start);
            out.push_back("to");
            append_cell(out, goal);
            append(out, {"is", "valid"});
            break;
        case Kind::state_after_steps: {
            for (const auto& obj : rules.temporals) {
                if (obj.name == object) {
                    int final_n = temporal_segments_after(obj, start_segments, value);
                    return Constraint::count(Selector::of(obj.entity), final_n)
                        .serialize_words(rules);
                }
            }
            throw ConfigError("unknown temporal object '" + object + "'");
        }
    }
    return out;
}

std::vector<Constraint> InstructionSpec::hidden_constraints() const {
    std::vector<Constraint> out;
    for (size_t i = 0; i < constraints.size(); ++i)
        if (hidden[i]) out.push_back(constraints[i]);
    return out;
}

bool InstructionSpec::has_hidden() const {
    return std::any_of(hidden.begin(), hidden.end(), [](bool b) { return b; });
}

std::string InstructionSpec::text() const {
    std::string s;
    for (size_t i = 0; i < text_words.size(); ++i) {
        if (i) s += ' ';
        s += text_words[i];
    }
    return s;
}

// ---------------------------------------------------------------------------
// Instruction sampling

namespace {

// Canonical-scene stream. One fixed stream for every spec: placements that
// constraints leave free then depend only on the constraint structure, never
// on the instruction wording, so target scenes stay predictable for the
// model across prompts.
uint64_t derive_scene_seed(const InstructionSpec&) { return 0x6F11CE5EEDULL; }

Selector random_selector(Rng& rng) {
    return Selector{static_cast<Color>(rng.uniform_int(0, kNumColors - 1)),
                    static_cast<Shape>(rng.uniform_int(0, kNumShapes - 1))};
}

// Stated coordinates come from a coarse lattice: the instruction space stays
// small enough for desk-scale corpora to cover it densely, which is what lets
// the model compose phrase resolution with placement on held-out prompts.
int lattice_coord(Rng& rng, int extent) {
    static const int lattice[4] = {1, 4, 7, 10};
    for (;;) {
        int v = lattice[rng.uniform_int(0, 3)];
        if (v < extent) return v;
    }
}

InstructionSpec sample_cultural(Rng& rng, const RuleTable& rules, GridConfig grid,
                                SampleMode mode) {
    InstructionSpec spec;
    spec.category = KnowledgeCategory::cultural;
    int r = lattice_coord(rng, grid.h);
    int c = lattice_coord(rng, grid.w);
    const auto& entry = rng.pick(rules.lexicon);
    Selector sel = Selector::of(entry.entity);
    if (mode == SampleMode::with_knowledge) {
        spec.text_words = {"draw", "the"};
        append(spec.text_words, entry.phrase);
        append(spec.text_words, {"at"});
        append_cell(spec.text_words, Cell{r, c});
        spec.constraints = {Constraint::present(sel),
                            Constraint::attribute(sel, AttrKind::row, r),
                            Constraint::attribute(sel, AttrKind::col, c)};
        spec.hidden = {true, true, true};
    } else {
        spec.text_words = {"draw", "a"};
        append(spec.text_words, sel.phrase_words());
        append(spec.text_words, {"at"});
        append_cell(spec.text_words, Cell{r, c});
        spec.constraints = {Constraint::present(sel),
                            Constraint::attribute(sel, AttrKind::row, r),
                            Constraint::attribute(sel, AttrKind::col, c)};
        spec.hidden = {false, false, false};
    }
    return spec;
}

InstructionSpec sample_science(Rng& rng, const RuleTable& rules, GridConfig grid,
                               SampleMode mode) {
    InstructionSpec spec;
    spec.category = KnowledgeCategory::natural_science;
    if (mode == SampleMode::with_knowledge) {
        const auto& law = rng.pick(rules.laws);
        const auto& a = rules.noun(law.noun_a);
        const auto& b = rules.noun(law.noun_b);
        spec.text_words = {"show", "the", a.name, "and", "the", b.name};
        spec.constraints = {Constraint::present(Selector::of(a.entity)),
                            Constraint::present(Selector::of(b.entity)),
                            Constraint::related(Selector::of(a.entity), law.relation,
                                                Selector::of(b.entity))};
        spec.hidden = {true, true, true};
        // Optional position anchor for variety.
        if (rng.uniform() < 0.5) {
            bool anchor_a = rng.uniform() < 0.5;
            const auto& n = anchor_a ? a : b;
            int r = lattice_coord(rng, grid.h - 1);
            append(spec.text_words, {".", "the", n.name, "is", "at", "row", number_word(r)});
            spec.constraints.push_back(
                Constraint::attribute(Selector::of(n.entity), AttrKind::row, r));
            spec.hidden.push_back(true);
        }
    } else {
        Selector a = random_selector(rng);
        Selector b = random_selector(rng);
        while (b == a) b = random_selector(rng);
        auto rel = static_cast<Relation>(rng.uniform_int(0, 4));
        spec.text_words = {"show", "a"};
        append(spec.text_words, a.phrase_words());
        append(spec.text_words, {"and", "a"});
        append(spec.text_words, b.phrase_words());
        append(spec.text_words, {".", "the"});
        append(spec.text_words, a.phrase_words());
        spec.text_words.push_back("is");
        append(spec.text_words, relation_words(rel));
        spec.text_words.push_back("the");
        append(spec.text_words, b.phrase_words());
        spec.constraints = {Constraint::present(a), Constraint::present(b),
                            Constraint::related(a, rel, b)};
        spec.hidden = {false, false, false};
    }
    return spec;
}

InstructionSpec sample_spatial(Rng& rng, const RuleTable& rules, GridConfig,
                               SampleMode mode) {
    InstructionSpec spec;
    spec.category = KnowledgeCategory::spatial;
    Selector a = random_selector(rng);
    Selector b = random_selector(rng);
    while (b == a) b = random_selector(rng);
    auto stated = static_cast<Relation>(rng.uniform_int(0, 3));  // directional only
    spec.text_words = {"a"};
    append(spec.text_words, a.phrase_words());
    append(spec.text_words, relation_words(stated));
    spec.text_words.push_back("a");
    append(spec.text_words, b.phrase_words());
    if (mode == SampleMode::with_knowledge) {
        const auto& tr = rng.pick(rules.transforms);
        spec.text_words.push_back("viewed");
        append(spec.text_words, tr.phrase);
        Relation actual = tr.rewrite.at(stated);
        spec.constraints = {Constraint::present(a), Constraint::present(b),
                            Constraint::related(a, actual, b)};
        spec.hidden = {false, false, true};
    } else {
        spec.constraints = {Constraint::present(a), Constraint::present(b),
                            Constraint::related(a, stated, b)};
        spec.hidden = {false, false, false};
    }
    return spec;
}

InstructionSpec sample_temporal(Rng& rng, const RuleTable& rules, GridConfig grid,
                                SampleMode mode) {
    InstructionSpec spec;
    spec.category = KnowledgeCategory::temporal;
    const auto& obj = rng.pick(rules.temporals);
    int col = lattice_coord(rng, grid.w);
    int start = 0, steps = 0, final_n = 0;
    for (int tries = 0; tries < 64; ++tries) {
        start = static_cast<int>(rng.uniform_int(1, std::min(obj.max_segments, 5)));
        steps = static_cast<int>(rng.uniform_int(1, 3));
        final_n = temporal_segments_after(obj, start, steps);
        if (final_n >= 1 && final_n <= grid.h && final_n != start) break;
    }
    Selector sel = Selector::of(obj.entity);
    if (mode == SampleMode::with_knowledge) {
        spec.text_words = {"a", obj.name, "of", number_word(start), "segments",
                           "at", "col", number_word(col), "after", number_word(steps),
                           "steps"};
        spec.constraints = {Constraint::after_steps(obj.name, start, steps),
                            Constraint::attribute(sel, AttrKind::col, col)};
        spec.hidden = {true, true};
    } else {
        spec.text_words = {"exactly", number_word(final_n)};
        append(spec.text_words, plural_phrase_words(sel));
        append(spec.text_words, {"at", "col", number_word(col)});
        spec.constraints = {Constraint::count(sel, final_n),
                            Constraint::attribute(sel, AttrKind::col, col)};
        spec.hidden = {false, false};
    }
    return spec;
}

InstructionSpec sample_logical(Rng& rng, const RuleTable& rules, GridConfig grid,
                               SampleMode mode) {
    InstructionSpec spec;
    spec.category = KnowledgeCategory::logical;
    int region = std::min(rules.maze.region, std::min(grid.h, grid.w));
    Cell start{}, goal{};
    std::vector<Cell> walls;
    for (int tries = 0;; ++tries) {
        if (tries > 200) throw Error("maze sampling failed to find a solvable layout");
        start = {static_cast<int>(rng.uniform_int(0, region - 1)),
                 static_cast<int>(rng.uniform_int(0, region - 1))};
        goal = {static_cast<int>(rng.uniform_int(0, region - 1)),
                static_cast<int>(rng.uniform_int(0, region - 1))};
        int dist = std::abs(start.row - goal.row) + std::abs(start.col - goal.col);
        if (dist < 3) continue;
        int n_walls = static_cast<int>(rng.uniform_int(3, 4));
        walls.clear();
        while (static_cast<int>(walls.size()) < n_walls) {
            Cell c{static_cast<int>(rng.uniform_int(0, region - 1)),
                   static_cast<int>(rng.uniform_int(0, region - 1))};
            if (c == start || c == goal) continue;
            if (std::find(walls.begin(), walls.end(), c) != walls.end()) continue;
            walls.push_back(c);
        }
        auto path = bfs_path(start, goal, walls, GridConfig{region, region});
        if (path.empty() || path.size() > 8) continue;
        break;
    }
    spec.text_words = {"the", "path", "from"};
    append_cell(spec.text_words, start);
    spec.text_words.push_back("to");
    append_cell(spec.text_words, goal);
    append(spec.text_words, {"avoiding", "walls", "at"});
    for (const auto& wcell : walls) append_cell(spec.text_words, wcell);

    spec.constraints = {Constraint::present(Selector::of(rules.maze.start), start),
                        Constraint::present(Selector::of(rules.maze.goal), goal)};
    spec.hidden = {false, false};
    for (const auto& wcell : walls) {
        spec.constraints.push_back(Constraint::present(Selector::of(rules.maze.wall), wcell));
        spec.hidden.push_back(false);
    }
    if (mode == SampleMode::with_knowledge) {
        spec.constraints.push_back(Constraint::path(start, goal));
        spec.hidden.push_back(true);
    }
    return spec;
}

}  // namespace

InstructionSpec sample_instruction(KnowledgeCategory category, Rng& rng,
                                   const RuleTable& rules, GridConfig grid, SampleMode mode) {
    InstructionSpec spec;
    switch (category) {
        case KnowledgeCategory::cultural: spec = sample_cultural(rng, rules, grid, mode); break;
        case KnowledgeCategory::natural_science: spec = sample_science(rng, rules, grid, mode); break;
        case KnowledgeCategory::spatial: spec = sample_spatial(rng, rules, grid, mode); break;
        case KnowledgeCategory::temporal: spec = sample_temporal(rng, rules, grid, mode); break;
        case KnowledgeCategory::logical: spec = sample_logical(rng, rules, grid, mode); break;
        default: throw InputError("unknown category");
    }
    spec.scene_seed = derive_scene_seed(spec);
    return spec;
}

InstructionSpec sample_compositional(CompositionalKind kind, Rng& rng, GridConfig grid) {
    InstructionSpec spec;
    spec.category = KnowledgeCategory::spatial;  // tag unused for compositional suites
    Selector a = random_selector(rng);
    Selector b = random_selector(rng);
    switch (kind) {
        case CompositionalKind::single_object:
            spec.text_words = {"a"};
            append(spec.text_words, a.phrase_words());
            spec.constraints = {Constraint::present(a)};
            break;
        case CompositionalKind::two_object:
            while (b == a) b = random_selector(rng);
            spec.text_words = {"a"};
            append(spec.text_words, a.phrase_words());
            append(spec.text_words, {"and", "a"});
            append(spec.text_words, b.phrase_words());
            spec.constraints = {Constraint::present(a), Constraint::present(b)};
            break;
        case CompositionalKind::counting: {
            int n = static_cast<int>(rng.uniform_int(2, 4));
            spec.text_words = {"exactly", number_word(n)};
            append(spec.text_words, plural_phrase_words(a));
            spec.constraints = {Constraint::count(a, n)};
            break;
        }
        case CompositionalKind::colors: {
            b.shape = a.shape;
            while (b.color == a.color) b.color = static_cast<Color>(rng.uniform_int(0, kNumColors - 1));
            spec.text_words = {"a"};
            append(spec.text_words, a.phrase_words());
            append(spec.text_words, {"and", "a"});
            append(spec.text_words, b.phrase_words());
            spec.constraints = {Constraint::present(a), Constraint::present(b)};
            break;
        }
        case CompositionalKind::position: {
            Selector sa = Selector::of_shape(*a.shape);
            Selector sb = Selector::of_shape(*b.shape);
            while (*sb.shape == *sa.shape) sb.shape = static_cast<Shape>(rng.uniform_int(0, kNumShapes - 1));
            auto rel = static_cast<Relation>(rng.uniform_int(0, 3));
            spec.text_words = {"a", to_word(*sa.shape)};
            append(spec.text_words, relation_words(rel));
            append(spec.text_words, {"a", to_word(*sb.shape)});
            spec.constraints = {Constraint::present(sa), Constraint::present(sb),
                                Constraint::related(sa, rel, sb)};
            break;
        }
        case CompositionalKind::attribution: {
            while (*b.shape == *a.shape) b.shape = static_cast<Shape>(rng.uniform_int(0, kNumShapes - 1));
            while (*b.color == *a.color) b.color = static_cast<Color>(rng.uniform_int(0, kNumColors - 1));
            spec.text_words = {"a"};
            append(spec.text_words, a.phrase_words());
            append(spec.text_words, {"and", "a"});
            append(spec.text_words, b.phrase_words());
            spec.constraints = {Constraint::present(Selector::of_shape(*a.shape)),
                                Constraint::present(Selector::of_shape(*b.shape)),
                                Constraint::attribute(Selector::of_shape(*a.shape), AttrKind::color,
                                                      static_cast<int>(*a.color)),
                                Constraint::attribute(Selector::of_shape(*b.shape), AttrKind::color,
                                                      static_cast<int>(*b.color))};
            break;
        }
    }
    spec.hidden.assign(spec.constraints.size(), false);
    (void)grid;
    spec.scene_seed = derive_scene_seed(spec);
    return spec;
}

ConstraintSet compile_constraints(const InstructionSpec& spec, const RuleTable& rules) {
    if (spec.constraints.size() != spec.hidden.size())
        throw InputError("spec hidden flags out of sync");
    ConstraintSet out;
    out.reserve(spec.constraints.size());
    for (const auto& c : spec.constraints) {
        if (c.kind == Constraint::Kind::state_after_steps) {
            bool found = false;
            for (const auto& obj : rules.temporals) {
                if (obj.name == c.object) {
                    int final_n = temporal_segments_after(obj, c.start_segments, c.value);
                    out.push_back(Constraint::count(Selector::of(obj.entity), final_n));
                    found = true;
                    break;
                }
            }
            if (!found) throw ConfigError("unknown temporal object '" + c.object + "'");
        } else {
            out.push_back(c);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scene generation

namespace {

bool relation_holds(const Entity& a, const Entity& b, Relation rel) {
    switch (rel) {
        case Relation::left_of: return a.col < b.col;
        case Relation::right_of: return a.col > b.col;
        case Relation::above: return a.row < b.row;
        case Relation::below: return a.row > b.row;
        case Relation::adjacent:
            return std::abs(a.row - b.row) + std::abs(a.col - b.col) == 1;
    }
    return false;
}

EntityDesc concretize(const Selector& s, Rng& rng) {
    Color c = s.color ? *s.color : static_cast<Color>(rng.uniform_int(0, kNumColors - 1));
    Shape sh = s.shape ? *s.shape : static_cast<Shape>(rng.uniform_int(0, kNumShapes - 1));
    return EntityDesc{c, sh};
}

struct SceneBuilder {
    Scene scene;
    GridConfig grid;

    bool free_cell(Cell c) const {
        return c.row >= 0 && c.row < grid.h && c.col >= 0 && c.col < grid.w &&
               !scene.occupied(c);
    }

    bool place(EntityDesc d, Cell c) {
        if (!free_cell(c)) return false;
        scene.entities.push_back(Entity{d.shape, d.color, c.row, c.col});
        return true;
    }

    std::vector<Cell> free_cells() const {
        std::vector<Cell> out;
        for (int r = 0; r < grid.h; ++r)
            for (int c = 0; c < grid.w; ++c)
                if (!scene.occupied({r, c})) out.push_back({r, c});
        return out;
    }

    const Entity* find(const Selector& s) const {
        for (const auto& e : scene.entities)
            if (s.matches(e)) return &e;
        return nullptr;
    }

    int count(const Selector& s) const {
        int n = 0;
        for (const auto& e : scene.entities)
            if (s.matches(e)) ++n;
        return n;
    }
};

// One randomized construction attempt; result still gets oracle-checked.
std::optional<Scene> propose_scene(const ConstraintSet& cs, Rng& rng, const RuleTable& rules,
                                   GridConfig grid) {
    SceneBuilder sb;
    sb.scene.grid_h = grid.h;
    sb.scene.grid_w = grid.w;
    sb.grid = grid;

    // Pinned presences first (maze walls and markers land here).
    for (const auto& c : cs) {
        if (c.kind == Constraint::Kind::entity_present && c.at_cell) {
            const Entity* existing = sb.scene.at(*c.at_cell);
            if (existing) {
                if (!c.a.matches(*existing)) return std::nullopt;
                continue;
            }
            if (!sb.place(concretize(c.a, rng), *c.at_cell)) return std::nullopt;
        }
    }

    // Paths: trace the canonical breadth-first route between the endpoints.
    for (const auto& c : cs) {
        if (c.kind != Constraint::Kind::path_valid) continue;
        std::vector<Cell> walls;
        for (const auto& e : sb.scene.entities)
            if (e.desc() == rules.maze.wall) walls.push_back(e.cell());
        auto path = bfs_path(c.start, c.goal, walls, grid);
        if (path.empty()) return std::nullopt;
        for (size_t i = 1; i + 1 < path.size(); ++i) {
            if (sb.scene.occupied(path[i])) return std::nullopt;
            if (!sb.place(rules.maze.path, path[i])) return std::nullopt;
        }
    }

    // Group attribute constraints by selector; a group plus its presence
    // constraint yields one placed entity honoring the pinned coordinates.
    std::vector<std::pair<Selector, std::vector<const Constraint*>>> groups;
    for (const auto& c : cs) {
        if (c.kind != Constraint::Kind::attribute_equals) continue;
        auto it = std::find_if(groups.begin(), groups.end(),
                               [&](const auto& g) { return g.first == c.a; });
        if (it == groups.end()) groups.push_back({c.a, {&c}});
        else it->second.push_back(&c);
    }
    auto group_satisfied = [&](const Selector& sel,
                               const std::vector<const Constraint*>& attrs) {
        for (const auto& e : sb.scene.entities) {
            if (!sel.matches(e)) continue;
            bool all = true;
            for (const auto* c : attrs) {
                Entity probe = e;
                if (c->attr == AttrKind::row) all &= probe.row == c->value;
                else if (c->attr == AttrKind::col) all &= probe.col == c->value;
                else if (c->attr == AttrKind::color) all &= static_cast<int>(probe.color) == c->value;
                else all &= static_cast<int>(probe.shape) == c->value;
            }
            if (all) return true;
        }
        return false;
    };
    bool has_count_for = false;
    for (auto& [sel, attrs] : groups) {
        // Count constraints on the same selector do their own placement.
        has_count_for = std::any_of(cs.begin(), cs.end(), [&](const Constraint& c) {
            return c.kind == Constraint::Kind::count_equals && c.a == sel;
        });
        if (has_count_for) continue;
        if (group_satisfied(sel, attrs)) continue;
        Selector concrete = sel;
        std::optional<int> row, col;
        for (const auto* c : attrs) {
            if (c->attr == AttrKind::row) row = c->value;
            else if (c->attr == AttrKind::col) col = c->value;
            else if (c->attr == AttrKind::color) concrete.color = static_cast<Color>(c->value);
            else concrete.shape = static_cast<Shape>(c->value);
        }
        std::vector<Cell> candidates;
        for (const auto& cell : sb.free_cells()) {
            if (row && cell.row != *row) continue;
            if (col && cell.col != *col) continue;
            candidates.push_back(cell);
        }
        if (candidates.empty()) return std::nullopt;
        if (!sb.place(concretize(concrete, rng), rng.pick(candidates))) return std::nullopt;
    }

    // Relations. Never duplicates an existing matching entity: if both ends
    // already exist but the relation fails, the attempt fails.
    for (const auto& c : cs) {
        if (c.kind != Constraint::Kind::relation) continue;
        bool holds = false;
        for (const auto& ea : sb.scene.entities)
            for (const auto& eb : sb.scene.entities)
                if (&ea != &eb && c.a.matches(ea) && c.b.matches(eb) &&
                    relation_holds(ea, eb, c.rel))
                    holds = true;
        if (holds) continue;
        const Entity* ea = sb.find(c.a);
        const Entity* eb = sb.find(c.b);
        if (ea && eb) return std::nullopt;
        if (!eb && !ea) {
            auto cells = sb.free_cells();
            if (cells.empty()) return std::nullopt;
            Cell bc = rng.pick(cells);
            if (!sb.place(concretize(c.b, rng), bc)) return std::nullopt;
            eb = sb.scene.at(bc);
        }
        if (!ea) {
            const Entity* anchor = eb ? eb : sb.find(c.b);
            std::vector<Cell> candidates;
            for (const auto& cell : sb.free_cells()) {
                Entity probe{Shape::circle, Color::red, cell.row, cell.col};
                Entity other = *anchor;
                if (relation_holds(probe, other, c.rel)) candidates.push_back(cell);
            }
            if (candidates.empty()) return std::nullopt;
            if (!sb.place(concretize(c.a, rng), rng.pick(candidates))) return std::nullopt;
        } else {
            // a exists, b missing: place b so that rel(a, b) holds.
            std::vector<Cell> candidates;
            for (const auto& cell : sb.free_cells()) {
                Entity probe{Shape::circle, Color::red, cell.row, cell.col};
                if (relation_holds(*ea, probe, c.rel)) candidates.push_back(cell);
            }
            if (candidates.empty()) return std::nullopt;
            if (!sb.place(concretize(c.b, rng), rng.pick(candidates))) return std::nullopt;
        }
    }

    // Counts: top up, honoring a row/col anchor shared by the same selector.
    for (const auto& c : cs) {
        if (c.kind != Constraint::Kind::count_equals) continue;
        int cur = sb.count(c.a);
        if (cur > c.value) return std::nullopt;
        std::optional<int> row, col;
        for (const auto& other : cs)
            if (other.kind == Constraint::Kind::attribute_equals && other.a == c.a) {
                if (other.attr == AttrKind::row) row = other.value;
                if (other.attr == AttrKind::col) col = other.value;
            }
        for (int i = cur; i < c.value; ++i) {
            std::vector<Cell> candidates;
            for (const auto& cell : sb.free_cells()) {
                if (row && cell.row != *row) continue;
                if (col && cell.col != *col) continue;
                candidates.push_back(cell);
            }
            if (candidates.empty()) return std::nullopt;
            // Anchored stacks grow from the bottom row up; free placement is random.
            Cell chosen = (row || col)
                              ? *std::max_element(candidates.begin(), candidates.end(),
                                                  [](Cell x, Cell y) { return x.row < y.row; })
                              : rng.pick(candidates);
            if (!sb.place(concretize(c.a, rng), chosen)) return std::nullopt;
        }
    }

    // Remaining unpinned presences.
    for (const auto& c : cs) {
        if (c.kind != Constraint::Kind::entity_present || c.at_cell) continue;
        if (sb.find(c.a)) continue;
        auto cells = sb.free_cells();
        if (cells.empty()) return std::nullopt;
        if (!sb.place(concretize(c.a, rng), rng.pick(cells))) return std::nullopt;
    }

    return sb.scene;
}

}  // namespace

Scene ground_truth_scene(const ConstraintSet& cs, Rng& rng, const RuleTable& rules,
                         GridConfig grid) {
    for (const auto& c : cs)
        if (c.kind == Constraint::Kind::state_after_steps)
            throw InputError("ground_truth_scene wants a compiled constraint set");
    constexpr int kAttempts = 256;
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
        auto scene = propose_scene(cs, rng, rules, grid);
        if (!scene) continue;
        scene->validate();
        if (oracle_score(render(*scene), cs, rules) == 1.0) return *scene;
    }
    // Constructive fallback with a fixed internal stream.
    Rng fixed(0x67726964666c6f77ULL);
    auto scene = propose_scene(cs, fixed, rules, grid);
    if (scene) {
        scene->validate();
        if (oracle_score(render(*scene), cs, rules) == 1.0) return *scene;
    }
    throw UnsatisfiableError("no scene satisfies the constraint set");
}

GridImage render(const Scene& scene) {
    scene.validate();
    GridImage img(scene.grid_h, scene.grid_w);
    for (const auto& e : scene.entities)
        img.set(e.row, e.col, GridImage::code_of(e.color, e.shape));
    return img;
}

Scene scene_from_grid(const GridImage& img) {
    Scene s;
    s.grid_h = img.h();
    s.grid_w = img.w();
    for (int r = 0; r < img.h(); ++r)
        for (int c = 0; c < img.w(); ++c) {
            auto d = GridImage::desc_of_code(img.at(r, c));
            if (d) s.entities.push_back(Entity{d->shape, d->color, r, c});
        }
    return s;
}

bool check_constraint(const GridImage& img, const Constraint& c, const RuleTable& rules) {
    Scene s = scene_from_grid(img);
    switch (c.kind) {
        case Constraint::Kind::entity_present:
            for (const auto& e : s.entities) {
                if (!c.a.matches(e)) continue;
                if (c.at_cell && !(e.cell() == *c.at_cell)) continue;
                return true;
            }
            return false;
        case Constraint::Kind::attribute_equals:
            for (const auto& e : s.entities) {
                if (!c.a.matches(e)) continue;
                switch (c.attr) {
                    case AttrKind::row: if (e.row == c.value) return true; break;
                    case AttrKind::col: if (e.col == c.value) return true; break;
                    case AttrKind::color: if (static_cast<int>(e.color) == c.value) return true; break;
                    case AttrKind::shape: if (static_cast<int>(e.shape) == c.value) return true; break;
                }
            }
            return false;
        case Constraint::Kind::relation:
            for (const auto& ea : s.entities)
                for (const auto& eb : s.entities) {
                    if (&ea == &eb) continue;
                    if (c.a.matches(ea) && c.b.matches(eb) && relation_holds(ea, eb, c.rel))
                        return true;
                }
            return false;
        case Constraint::Kind::count_equals: {
            int n = 0;
            for (const auto& e : s.entities)
                if (c.a.matches(e)) ++n;
            return n == c.value;
        }
        case Constraint::Kind::path_valid: {
            auto traversable = [&](Cell cell) {
                if (cell == c.start || cell == c.goal) return true;
                auto d = GridImage::desc_of_code(img.at(cell.row, cell.col));
                return d && *d == rules.maze.path;
            };
            std::deque<Cell> queue{c.start};
            std::set<std::pair<int, int>> seen{{c.start.row, c.start.col}};
            while (!queue.empty()) {
                Cell cur = queue.front();
                queue.pop_front();
                if (cur == c.goal) return true;
                const int dr[4] = {-1, 1, 0, 0};
                const int dc[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    Cell nxt{cur.row + dr[k], cur.col + dc[k]};
                    if (nxt.row < 0 || nxt.row >= img.h() || nxt.col < 0 || nxt.col >= img.w())
                        continue;
                    if (!traversable(nxt)) continue;
                    if (!seen.insert({nxt.row, nxt.col}).second) continue;
                    queue.push_back(nxt);
                }
            }
            return false;
        }
        case Constraint::Kind::state_after_steps: {
            for (const auto& obj : rules.temporals)
                if (obj.name == c.object) {
                    int final_n = temporal_segments_after(obj, c.start_segments, c.value);
                    return check_constraint(img, Constraint::count(Selector::of(obj.entity), final_n),
                                            rules);
                }
            throw ConfigError("unknown temporal object '" + c.object + "'");
        }
    }
    return false;
}

double oracle_score(const GridImage& img, const ConstraintSet& cs, const RuleTable& rules) {
    if (cs.empty()) return 1.0;
    int ok = 0;
    for (const auto& c : cs)
        if (check_constraint(img, c, rules)) ++ok;
    return static_cast<double>(ok) / static_cast<double>(cs.size());
}

Scene random_scene(int entities, Rng& rng, GridConfig grid) {
    Scene s;
    s.grid_h = grid.h;
    s.grid_w = grid.w;
    int placed = 0;
    while (placed < entities) {
        Cell c{static_cast<int>(rng.uniform_int(0, grid.h - 1)),
               static_cast<int>(rng.uniform_int(0, grid.w - 1))};
        if (s.occupied(c)) continue;
        s.entities.push_back(Entity{static_cast<Shape>(rng.uniform_int(0, kNumShapes - 1)),
                                    static_cast<Color>(rng.uniform_int(0, kNumColors - 1)),
                                    c.row, c.col});
        ++placed;
    }
    return s;
}

EditTask sample_edit_task(Rng& rng, const RuleTable& rules, GridConfig grid, SampleMode mode) {
    EditTask task;
    task.source = random_scene(static_cast<int>(rng.uniform_int(3, 5)), rng, grid);
    task.target = task.source;

    auto free_cell = [&]() {
        for (;;) {
            Cell c{static_cast<int>(rng.uniform_int(0, grid.h - 1)),
                   static_cast<int>(rng.uniform_int(0, grid.w - 1))};
            if (!task.source.occupied(c)) return c;
        }
    };
    auto count_of = [&](const Scene& s, EntityDesc d) {
        int n = 0;
        for (const auto& e : s.entities)
            if (e.desc() == d) ++n;
        return n;
    };

    int kind = static_cast<int>(rng.uniform_int(0, 3));
    if (mode == SampleMode::with_knowledge) kind = 0;  // knowledge edits add a lexicon entity

    switch (kind) {
        case 0: {  // add
            Cell at = free_cell();
            EntityDesc d{static_cast<Color>(rng.uniform_int(0, kNumColors - 1)),
                         static_cast<Shape>(rng.uniform_int(0, kNumShapes - 1))};
            if (mode == SampleMode::with_knowledge) {
                const auto& entry = rng.pick(rules.lexicon);
                d = entry.entity;
                task.text_words = {"add", "the"};
                append(task.text_words, entry.phrase);
            } else {
                task.text_words = {"add", "a", to_word(d.color), to_word(d.shape)};
            }
            append(task.text_words, {"at"});
            append_cell(task.text_words, at);
            task.goal = {Constraint::present(Selector::of(d), at)};
            task.touched = {at};
            task.target.entities.push_back(Entity{d.shape, d.color, at.row, at.col});
            break;
        }
        case 1: {  // remove
            const Entity& e = rng.pick(task.source.entities);
            task.text_words = {"remove", "the", "item", "at"};
            append_cell(task.text_words, e.cell());
            task.goal = {Constraint::count(Selector::of(e.desc()),
                                           count_of(task.source, e.desc()) - 1)};
            task.touched = {e.cell()};
            for (size_t i = 0; i < task.target.entities.size(); ++i)
                if (task.target.entities[i].cell() == e.cell()) {
                    task.target.entities.erase(task.target.entities.begin() +
                                               static_cast<long>(i));
                    break;
                }
            break;
        }
        case 2: {  // recolor
            const Entity& e = rng.pick(task.source.entities);
            Color to = e.color;
            while (to == e.color) to = static_cast<Color>(rng.uniform_int(0, kNumColors - 1));
            task.text_words = {"change", "the", "item", "at"};
            append_cell(task.text_words, e.cell());
            append(task.text_words, {"to", to_word(to)});
            task.goal = {Constraint::present(Selector{to, e.shape}, e.cell())};
            task.touched = {e.cell()};
            task.target.at(e.cell())->color = to;
            break;
        }
        default: {  // move
            const Entity& e = rng.pick(task.source.entities);
            Cell to = free_cell();
            task.text_words = {"move", "the", "item", "at"};
            append_cell(task.text_words, e.cell());
            task.text_words.push_back("to");
            append_cell(task.text_words, to);
            task.goal = {Constraint::present(Selector::of(e.desc()), to),
                         Constraint::count(Selector::of(e.desc()), count_of(task.source, e.desc()))};
            task.touched = {e.cell(), to};
            Entity* moved = task.target.at(e.cell());
            moved->row = to.row;
            moved->col = to.col;
            break;
        }
    }
    return task;
}

std::vector<Cell> bfs_path(Cell start, Cell goal, const std::vector<Cell>& walls,
                           GridConfig grid) {
    auto idx = [&](Cell c) { return c.row * grid.w + c.col; };
    std::vector<bool> wall(static_cast<size_t>(grid.h * grid.w), false);
    for (const auto& w : walls) wall[static_cast<size_t>(idx(w))] = true;
    if (wall[static_cast<size_t>(idx(start))] || wall[static_cast<size_t>(idx(goal))]) return {};
    std::vector<int> parent(static_cast<size_t>(grid.h * grid.w), -1);
    std::deque<Cell> queue{start};
    parent[static_cast<size_t>(idx(start))] = idx(start);
    while (!queue.empty()) {
        Cell cur = queue.front();
        queue.pop_front();
        if (cur == goal) break;
        const int dr[4] = {-1, 1, 0, 0};
        const int dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
            Cell nxt{cur.row + dr[k], cur.col + dc[k]};
            if (nxt.row < 0 || nxt.row >= grid.h || nxt.col < 0 || nxt.col >= grid.w) continue;
            if (wall[static_cast<size_t>(idx(nxt))]) continue;
            if (parent[static_cast<size_t>(idx(nxt))] != -1) continue;
            parent[static_cast<size_t>(idx(nxt))] = idx(cur);
            queue.push_back(nxt);
        }
    }
    if (parent[static_cast<size_t>(idx(goal))] == -1) return {};
    std::vector<Cell> path;
    Cell cur = goal;
    while (!(cur == start)) {
        path.push_back(cur);
        int p = parent[static_cast<size_t>(idx(cur))];
        cur = Cell{p / grid.w, p % grid.w};
    }
    path.push_back(start);
    std::reverse(path.begin(), path.end());
    return path;
}

std::string ascii_grid(const GridImage& img) {
    static const char shape_ch[kNumShapes] = {'o', '#', '^', 'd', '*'};
    static const char color_ch[kNumColors] = {'r', 'b', 'g', 'y', 'p', 'o', 'k', 'w'};
    std::ostringstream os;
    for (int r = 0; r < img.h(); ++r) {
        for (int c = 0; c < img.w(); ++c) {
            auto d = GridImage::desc_of_code(img.at(r, c));
            if (!d) os << " .";
            else os << color_ch[static_cast<int>(d->color)] << shape_ch[static_cast<int>(d->shape)];
            if (c + 1 < img.w()) os << ' ';
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace gridflow
