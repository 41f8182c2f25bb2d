#include "gridflow/agents.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <mutex>
#include <set>
#include <thread>

#include "gridflow/error.hpp"

namespace gridflow {

using nlohmann::json;

const std::string& dimension_name(Dimension d) {
    static const std::vector<std::string> names = {"object_presence", "attribute_accuracy",
                                                   "style_consistency", "realism",
                                                   "aesthetic_quality"};
    return names[static_cast<size_t>(d)];
}

Dimension dimension_from_name(const std::string& name) {
    for (int i = 0; i < 5; ++i)
        if (dimension_name(static_cast<Dimension>(i)) == name) return static_cast<Dimension>(i);
    throw InputError("unknown dimension '" + name + "'");
}

const std::string& action_name(EditAction a) {
    static const std::vector<std::string> names = {"add", "remove", "change_attribute", "move"};
    return names[static_cast<size_t>(a)];
}

EditAction action_from_name(const std::string& name) {
    for (int i = 0; i < 4; ++i)
        if (action_name(static_cast<EditAction>(i)) == name) return static_cast<EditAction>(i);
    throw InputError("unknown action '" + name + "'");
}

bool EditDirective::applied(const GridImage& img) const {
    auto desc_at = [&](Cell c) { return GridImage::desc_of_code(img.at(c.row, c.col)); };
    switch (action) {
        case EditAction::add:
            return desc_at(cell) && *desc_at(cell) == entity;
        case EditAction::remove:
            return !desc_at(cell) || !(*desc_at(cell) == entity);
        case EditAction::change_attribute: {
            auto d = desc_at(cell);
            if (!d) return false;
            if (attr == AttrKind::color) return static_cast<int>(d->color) == value;
            if (attr == AttrKind::shape) return static_cast<int>(d->shape) == value;
            return false;
        }
        case EditAction::move:
            return desc_at(cell) && *desc_at(cell) == entity;
    }
    return false;
}

std::vector<std::string> EditDirective::reflection_sentence() const {
    std::vector<std::string> w;
    auto cellw = [&](Cell c) {
        w.insert(w.end(), {"row", number_word(c.row), "col", number_word(c.col)});
    };
    switch (action) {
        case EditAction::add:
            w = {"add", "a", to_word(entity.color), to_word(entity.shape), "at"};
            cellw(cell);
            break;
        case EditAction::remove:
            w = {"remove", "the", "item", "at"};
            cellw(cell);
            break;
        case EditAction::change_attribute:
            w = {"change", "the", "item", "at"};
            cellw(cell);
            if (attr == AttrKind::color) {
                w.insert(w.end(), {"to", to_word(static_cast<Color>(value))});
            } else {
                w.insert(w.end(), {"to", "a", to_word(static_cast<Shape>(value))});
            }
            break;
        case EditAction::move:
            w = {"the", to_word(entity.color), to_word(entity.shape), "is", "misplaced", ".",
                 "move", "the", "item", "at"};
            cellw(from);
            w.push_back("to");
            cellw(cell);
            break;
    }
    w.push_back(".");
    return w;
}

std::vector<std::string> reflection_words(const std::vector<EditDirective>& directives) {
    std::vector<std::string> w = {"checking", "the", "draft", "."};
    if (directives.empty()) {
        w.insert(w.end(), {"the", "draft", "looks", "good", "."});
    } else {
        for (const auto& d : directives) {
            auto s = d.reflection_sentence();
            w.insert(w.end(), s.begin(), s.end());
        }
    }
    w.push_back("done");
    w.push_back(".");
    return w;
}

json EditDirective::to_json() const {
    json j;
    j["dimension"] = dimension_name(dimension);
    j["action"] = action_name(action);
    j["entity"] = {{"color", to_word(entity.color)}, {"shape", to_word(entity.shape)}};
    j["cell"] = {cell.row, cell.col};
    j["from"] = {from.row, from.col};
    j["attr"] = static_cast<int>(attr);
    j["value"] = value;
    j["rationale"] = rationale;
    return j;
}

EditDirective EditDirective::from_json(const json& j) {
    EditDirective d;
    d.dimension = dimension_from_name(j.at("dimension").get<std::string>());
    d.action = action_from_name(j.at("action").get<std::string>());
    auto col = color_from_word(j.at("entity").at("color").get<std::string>());
    auto shp = shape_from_word(j.at("entity").at("shape").get<std::string>());
    if (!col || !shp) throw InputError("directive json: bad entity");
    d.entity = EntityDesc{*col, *shp};
    d.cell = Cell{j.at("cell").at(0).get<int>(), j.at("cell").at(1).get<int>()};
    d.from = Cell{j.at("from").at(0).get<int>(), j.at("from").at(1).get<int>()};
    d.attr = static_cast<AttrKind>(j.at("attr").get<int>());
    d.value = j.at("value").get<int>();
    d.rationale = j.value("rationale", "");
    return d;
}

json JudgeVerdict::to_json() const {
    return json{{"retain", retain},
                {"initial_score", initial_score},
                {"refined_score", refined_score},
                {"directive_faithfulness", directive_faithfulness}};
}

JudgeVerdict JudgeVerdict::from_json(const json& j) {
    JudgeVerdict v;
    v.retain = j.at("retain").get<bool>();
    v.initial_score = j.at("initial_score").get<double>();
    v.refined_score = j.at("refined_score").get<double>();
    v.directive_faithfulness = j.at("directive_faithfulness").get<double>();
    return v;
}

Scene canonical_scene(const InstructionSpec& spec, const RuleTable& rules) {
    Rng rng(spec.scene_seed);
    // Grid dims are implied by the spec's coordinate range; the default grid
    // is used throughout the artifact.
    return ground_truth_scene(compile_constraints(spec, rules), rng, rules, GridConfig{});
}

std::vector<std::string> derivation_words(const InstructionSpec& spec, const RuleTable& rules) {
    std::vector<std::string> w;
    auto add = [&w](std::initializer_list<std::string> words) {
        w.insert(w.end(), words.begin(), words.end());
    };
    switch (spec.category) {
        case KnowledgeCategory::cultural: {
            for (const auto& e : rules.lexicon) {
                auto it = std::search(spec.text_words.begin(), spec.text_words.end(),
                                      e.phrase.begin(), e.phrase.end());
                if (it != spec.text_words.end()) {
                    add({"the"});
                    w.insert(w.end(), e.phrase.begin(), e.phrase.end());
                    add({"means", "a", to_word(e.entity.color), to_word(e.entity.shape), "."});
                    break;
                }
            }
            break;
        }
        case KnowledgeCategory::natural_science: {
            for (const auto& law : rules.laws) {
                const auto& a = rules.noun(law.noun_a);
                const auto& b = rules.noun(law.noun_b);
                bool has_a = std::find(spec.text_words.begin(), spec.text_words.end(), a.name) !=
                             spec.text_words.end();
                bool has_b = std::find(spec.text_words.begin(), spec.text_words.end(), b.name) !=
                             spec.text_words.end();
                if (has_a && has_b) {
                    add({"the", a.name, "means", "a", to_word(a.entity.color),
                         to_word(a.entity.shape), "."});
                    add({"the", b.name, "means", "a", to_word(b.entity.color),
                         to_word(b.entity.shape), "."});
                    add({"law", law.name, "applies", "."});
                    break;
                }
            }
            break;
        }
        case KnowledgeCategory::spatial: {
            for (const auto& tr : rules.transforms) {
                auto it = std::search(spec.text_words.begin(), spec.text_words.end(),
                                      tr.phrase.begin(), tr.phrase.end());
                if (it == spec.text_words.end()) continue;
                // Recover the stated relation from the hidden one.
                for (const auto& c : spec.hidden_constraints()) {
                    if (c.kind != Constraint::Kind::relation) continue;
                    for (const auto& [from, to] : tr.rewrite) {
                        if (to != c.rel) continue;
                        auto fw = relation_words(from);
                        auto tw = relation_words(to);
                        w.insert(w.end(), tr.phrase.begin(), tr.phrase.end());
                        w.insert(w.end(), fw.begin(), fw.end());
                        add({"becomes"});
                        w.insert(w.end(), tw.begin(), tw.end());
                        add({"."});
                        break;
                    }
                    break;
                }
                break;
            }
            break;
        }
        case KnowledgeCategory::temporal: {
            for (const auto& c : spec.constraints) {
                if (c.kind != Constraint::Kind::state_after_steps) continue;
                for (const auto& obj : rules.temporals) {
                    if (obj.name != c.object) continue;
                    int final_n = temporal_segments_after(obj, c.start_segments, c.value);
                    add({"the", obj.name, "means", "a", to_word(obj.entity.color),
                         to_word(obj.entity.shape), "."});
                    add({number_word(c.start_segments), obj.delta_per_step < 0 ? "minus" : "plus",
                         number_word(c.value * std::abs(obj.delta_per_step)), "is",
                         number_word(final_n), "."});
                    break;
                }
                break;
            }
            break;
        }
        case KnowledgeCategory::logical: {
            for (const auto& c : spec.constraints) {
                if (c.kind != Constraint::Kind::path_valid) continue;
                std::vector<Cell> walls;
                for (const auto& pc : spec.constraints)
                    if (pc.kind == Constraint::Kind::entity_present && pc.at_cell &&
                        pc.a == Selector::of(rules.maze.wall))
                        walls.push_back(*pc.at_cell);
                auto path = bfs_path(c.start, c.goal, walls, GridConfig{});
                add({"the", "path", "is", ":"});
                for (const auto& cell : path)
                    add({"row", number_word(cell.row), "col", number_word(cell.col), "."});
                break;
            }
            break;
        }
    }
    // Every hidden constraint's serialization, in order.
    ConstraintSet compiled = compile_constraints(spec, rules);
    for (size_t i = 0; i < compiled.size(); ++i) {
        if (!spec.hidden[i]) continue;
        auto s = compiled[i].serialize_words(rules);
        w.insert(w.end(), s.begin(), s.end());
        w.push_back(".");
    }
    return w;
}

// ---------------------------------------------------------------------------
// Scripted corruptor

namespace {

int find_entity(const Scene& s, const Selector& sel, std::optional<Cell> at = std::nullopt) {
    for (size_t i = 0; i < s.entities.size(); ++i) {
        const auto& e = s.entities[i];
        if (!sel.matches(e)) continue;
        if (at && !(e.cell() == *at)) continue;
        return static_cast<int>(i);
    }
    return -1;
}

std::vector<Cell> scene_free_cells(const Scene& s) {
    std::vector<Cell> out;
    for (int r = 0; r < s.grid_h; ++r)
        for (int c = 0; c < s.grid_w; ++c)
            if (!s.occupied({r, c})) out.push_back({r, c});
    return out;
}

// Cells a corruption may occupy: free in the corrupted scene AND in the
// canonical scene, so restoring moves never collide with injected entities.
std::vector<Cell> corruption_cells(const Scene& s, const Scene& canonical) {
    std::vector<Cell> out;
    for (const auto& c : scene_free_cells(s))
        if (!canonical.occupied(c)) out.push_back(c);
    return out;
}

// Tries to violate constraint c in the scene; returns false if no edit found.
bool corrupt_one(Scene& scene, const Scene& canonical, const Constraint& c, Rng& rng,
                 const RuleTable& rules) {
    switch (c.kind) {
        case Constraint::Kind::entity_present: {
            int i = find_entity(scene, c.a, c.at_cell);
            if (i < 0) return false;
            scene.entities.erase(scene.entities.begin() + i);
            return true;
        }
        case Constraint::Kind::attribute_equals: {
            if (c.attr == AttrKind::row || c.attr == AttrKind::col) {
                int i = -1;
                for (size_t k = 0; k < scene.entities.size(); ++k) {
                    const auto& e = scene.entities[k];
                    if (!c.a.matches(e)) continue;
                    int have = c.attr == AttrKind::row ? e.row : e.col;
                    if (have == c.value) {
                        i = static_cast<int>(k);
                        break;
                    }
                }
                if (i < 0) return false;
                std::vector<Cell> candidates;
                for (const auto& cell : corruption_cells(scene, canonical)) {
                    int coord = c.attr == AttrKind::row ? cell.row : cell.col;
                    if (coord != c.value) candidates.push_back(cell);
                }
                if (candidates.empty()) return false;
                Cell to = rng.pick(candidates);
                scene.entities[static_cast<size_t>(i)].row = to.row;
                scene.entities[static_cast<size_t>(i)].col = to.col;
                return true;
            }
            int i = -1;
            for (size_t k = 0; k < scene.entities.size(); ++k) {
                const auto& e = scene.entities[k];
                if (!c.a.matches(e)) continue;
                int have = c.attr == AttrKind::color ? static_cast<int>(e.color)
                                                     : static_cast<int>(e.shape);
                if (have == c.value) {
                    i = static_cast<int>(k);
                    break;
                }
            }
            if (i < 0) return false;
            if (c.attr == AttrKind::color) {
                int nv = (c.value + 1 + static_cast<int>(rng.uniform_int(0, kNumColors - 2))) % kNumColors;
                scene.entities[static_cast<size_t>(i)].color = static_cast<Color>(nv);
            } else {
                int nv = (c.value + 1 + static_cast<int>(rng.uniform_int(0, kNumShapes - 2))) % kNumShapes;
                scene.entities[static_cast<size_t>(i)].shape = static_cast<Shape>(nv);
            }
            return true;
        }
        case Constraint::Kind::relation: {
            int ia = find_entity(scene, c.a);
            if (ia < 0) return false;
            std::vector<Cell> candidates;
            for (const auto& cell : corruption_cells(scene, canonical)) {
                Entity probe = scene.entities[static_cast<size_t>(ia)];
                probe.row = cell.row;
                probe.col = cell.col;
                bool any = false;
                for (size_t k = 0; k < scene.entities.size(); ++k) {
                    if (static_cast<int>(k) == ia) continue;
                    const auto& eb = scene.entities[k];
                    if (!c.b.matches(eb)) continue;
                    Entity other = eb;
                    GridImage tmp(scene.grid_h, scene.grid_w);
                    tmp.set(probe.row, probe.col, GridImage::code_of(probe.color, probe.shape));
                    tmp.set(other.row, other.col, GridImage::code_of(other.color, other.shape));
                    if (check_constraint(tmp, Constraint::related(c.a, c.rel, c.b), rules)) any = true;
                }
                if (!any) candidates.push_back(cell);
            }
            if (candidates.empty()) return false;
            Cell to = rng.pick(candidates);
            scene.entities[static_cast<size_t>(ia)].row = to.row;
            scene.entities[static_cast<size_t>(ia)].col = to.col;
            return true;
        }
        case Constraint::Kind::count_equals: {
            int i = find_entity(scene, c.a);
            if (i >= 0) {
                scene.entities.erase(scene.entities.begin() + i);
                return true;
            }
            auto cells = corruption_cells(scene, canonical);
            if (cells.empty()) return false;
            Cell at = rng.pick(cells);
            Color col = c.a.color ? *c.a.color : static_cast<Color>(rng.uniform_int(0, kNumColors - 1));
            Shape shp = c.a.shape ? *c.a.shape : static_cast<Shape>(rng.uniform_int(0, kNumShapes - 1));
            scene.entities.push_back(Entity{shp, col, at.row, at.col});
            return true;
        }
        case Constraint::Kind::path_valid: {
            int i = find_entity(scene, Selector::of(rules.maze.path));
            if (i < 0) return false;
            scene.entities.erase(scene.entities.begin() + i);
            return true;
        }
        case Constraint::Kind::state_after_steps:
            return false;  // compiled away before corruption
    }
    return false;
}

}  // namespace

Draft ScriptedCorruptor::generate(const InstructionSpec& spec, Rng& rng) {
    ConstraintSet cs = compile_constraints(spec, rules_);
    Scene canonical = canonical_scene(spec, rules_);
    Draft draft;
    draft.reasoning_words = derivation_words(spec, rules_);

    int hi = std::min(cfg_.max_corruptions, static_cast<int>(cs.size()));
    int lo = std::min(cfg_.min_corruptions, hi);
    int want = static_cast<int>(rng.uniform_int(lo, hi));

    bool wiped = want > 0 && cfg_.wipe_prob > 0.0 && rng.uniform() < cfg_.wipe_prob;

    Scene scene = canonical;
    if (wiped) scene.entities.clear();
    std::vector<int> order(cs.size());
    for (size_t i = 0; i < cs.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);

    int injected = 0;
    std::vector<int> targeted;
    if (wiped) order.clear();
    for (int idx : order) {
        if (injected >= want) break;
        Scene backup = scene;
        if (!corrupt_one(scene, canonical, cs[static_cast<size_t>(idx)], rng, rules_)) {
            scene = backup;
            continue;
        }
        // The new edit must violate its target and must not accidentally
        // repair an earlier injection, or the draft would not be refinable
        // back to a strict improvement.
        GridImage img = render(scene);
        bool ok = !check_constraint(img, cs[static_cast<size_t>(idx)], rules_);
        for (int prev : targeted)
            if (check_constraint(img, cs[static_cast<size_t>(prev)], rules_)) ok = false;
        if (!ok) {
            scene = backup;
            continue;
        }
        targeted.push_back(idx);
        ++injected;
    }

    if (cfg_.benign_clutter_prob > 0.0 && rng.uniform() < cfg_.benign_clutter_prob) {
        // Palette of colors the style proxy accepts.
        std::set<int> palette;
        for (const auto& e : canonical.entities) palette.insert(static_cast<int>(e.color));
        for (const auto& c : cs) {
            if (c.a.color) palette.insert(static_cast<int>(*c.a.color));
            if (c.b.color) palette.insert(static_cast<int>(*c.b.color));
            if (c.kind == Constraint::Kind::attribute_equals && c.attr == AttrKind::color)
                palette.insert(c.value);
        }
        auto benign = [&](EntityDesc d) {
            if (!palette.count(static_cast<int>(d.color))) return false;
            if (d == rules_.maze.path || d == rules_.maze.wall || d == rules_.maze.start ||
                d == rules_.maze.goal)
                return false;
            for (const auto& c : cs)
                if (c.a.matches(Entity{d.shape, d.color, 0, 0}) ||
                    (c.kind == Constraint::Kind::relation &&
                     c.b.matches(Entity{d.shape, d.color, 0, 0})))
                    return false;
            return true;
        };
        std::vector<EntityDesc> options;
        for (int col : palette)
            for (int sh = 0; sh < kNumShapes; ++sh) {
                EntityDesc d{static_cast<Color>(col), static_cast<Shape>(sh)};
                if (benign(d)) options.push_back(d);
            }
        int extra = static_cast<int>(rng.uniform_int(1, 2));
        for (int k = 0; k < extra && !options.empty(); ++k) {
            auto cells = corruption_cells(scene, canonical);
            if (cells.empty()) break;
            Cell at = rng.pick(cells);
            EntityDesc d = rng.pick(options);
            scene.entities.push_back(Entity{d.shape, d.color, at.row, at.col});
        }
    }

    if (cfg_.allow_clutter && want > 0 && !wiped && rng.uniform() < 0.25) {
        // Clutter entity off the canonical palette, on a cell free in both the
        // corrupted and canonical scenes so fixes never collide with it.
        std::set<int> palette;
        for (const auto& e : canonical.entities) palette.insert(static_cast<int>(e.color));
        for (const auto& c : cs) {
            if (c.a.color) palette.insert(static_cast<int>(*c.a.color));
            if (c.b.color) palette.insert(static_cast<int>(*c.b.color));
        }
        std::vector<Color> off;
        for (int c = 0; c < kNumColors; ++c)
            if (!palette.count(c)) off.push_back(static_cast<Color>(c));
        if (!off.empty()) {
            std::vector<Cell> cells;
            for (const auto& cell : scene_free_cells(scene))
                if (!canonical.occupied(cell)) cells.push_back(cell);
            if (!cells.empty()) {
                Cell at = rng.pick(cells);
                scene.entities.push_back(
                    Entity{static_cast<Shape>(rng.uniform_int(0, kNumShapes - 1)), rng.pick(off),
                           at.row, at.col});
            }
        }
    }

    draft.image = render(scene);
    return draft;
}

Draft generate_draft(DraftBackend& backend, const InstructionSpec& spec, Rng& rng) {
    try {
        return backend.generate(spec, rng);
    } catch (const PipelineError&) {
        throw;
    } catch (const std::exception& e) {
        throw PipelineError("generator", std::string(e.what()) + " (backend " + backend.name() + ")");
    }
}

// ---------------------------------------------------------------------------
// Verifier

namespace {

// Tracks cells scheduled to be vacated (sources) or filled (dests) by
// already-emitted directives, so fixes never collide. A constraint whose
// repair cell is already dest-claimed gets a duplicate add of the canonical
// occupant, which the refinement teacher treats as an idempotent no-op.
struct Claims {
    std::set<std::pair<int, int>> sources;
    std::set<std::pair<int, int>> dests;
    static std::pair<int, int> key(Cell c) { return {c.row, c.col}; }
    bool source_claimed(Cell c) const { return sources.count(key(c)) > 0; }
    bool dest_claimed(Cell c) const { return dests.count(key(c)) > 0; }
};

const Entity* first_match(const Scene& s, const Selector& sel) {
    for (const auto& e : s.entities)
        if (sel.matches(e)) return &e;
    return nullptr;
}

EditDirective make_add(const Entity& e, Dimension dim, Claims& claims, const std::string& why) {
    claims.dests.insert(Claims::key(e.cell()));
    EditDirective d;
    d.dimension = dim;
    d.action = EditAction::add;
    d.entity = e.desc();
    d.cell = e.cell();
    d.rationale = why;
    return d;
}

EditDirective make_move(const Entity& cur, Cell to, Dimension dim, Claims& claims,
                        const std::string& why) {
    claims.sources.insert(Claims::key(cur.cell()));
    claims.dests.insert(Claims::key(to));
    EditDirective d;
    d.dimension = dim;
    d.action = EditAction::move;
    d.entity = cur.desc();
    d.from = cur.cell();
    d.cell = to;
    d.rationale = why;
    return d;
}

// Move a misplaced selector match to the canonical cell, or add the canonical
// entity outright. Entities sitting at their own canonical position are never
// used as move sources.
EditDirective move_or_add(const Scene& img_scene, const Scene& canonical_scene,
                          const Selector& sel, const Entity& canonical, Dimension dim,
                          Claims& claims, const std::string& why) {
    if (claims.dest_claimed(canonical.cell()))
        return make_add(canonical, dim, claims, why);  // duplicate, applies as a no-op
    for (const auto& e : img_scene.entities) {
        if (!sel.matches(e)) continue;
        if (e.cell() == canonical.cell()) continue;
        if (claims.source_claimed(e.cell()) || claims.dest_claimed(e.cell())) continue;
        const Entity* home = canonical_scene.at(e.cell());
        if (home && home->desc() == e.desc()) continue;  // belongs where it is
        return make_move(e, canonical.cell(), dim, claims, why);
    }
    return make_add(canonical, dim, claims, why);
}

EditDirective fix_constraint(const Constraint& c, const GridImage& img, const Scene& img_scene,
                             const Scene& canonical, const RuleTable& rules, Claims& claims) {
    switch (c.kind) {
        case Constraint::Kind::entity_present: {
            int ci = find_entity(canonical, c.a, c.at_cell);
            if (ci < 0) throw Error("verifier: canonical scene misses a constraint target");
            const Entity& ce = canonical.entities[static_cast<size_t>(ci)];
            return move_or_add(img_scene, canonical, c.a, ce, Dimension::object_presence,
                               claims, "missing required entity");
        }
        case Constraint::Kind::attribute_equals: {
            // Canonical entity that witnesses the attribute; prefer one whose
            // cell is not already being restored by another directive.
            const Entity* ce = nullptr;
            const Entity* claimed = nullptr;
            for (const auto& e : canonical.entities) {
                if (!c.a.matches(e)) continue;
                int have = c.attr == AttrKind::row     ? e.row
                           : c.attr == AttrKind::col   ? e.col
                           : c.attr == AttrKind::color ? static_cast<int>(e.color)
                                                       : static_cast<int>(e.shape);
                if (have != c.value) continue;
                if (claims.dest_claimed(e.cell())) {
                    if (!claimed) claimed = &e;
                    continue;
                }
                ce = &e;
                break;
            }
            if (!ce && claimed)
                return make_add(*claimed, Dimension::attribute_accuracy, claims,
                                "restore attribute");
            if (!ce) throw Error("verifier: canonical scene misses an attribute witness");
            if (c.attr == AttrKind::color || c.attr == AttrKind::shape) {
                if (img_scene.at(ce->cell()) != nullptr && !claims.source_claimed(ce->cell())) {
                    EditDirective d;
                    d.dimension = Dimension::attribute_accuracy;
                    d.action = EditAction::change_attribute;
                    d.entity = ce->desc();
                    d.cell = ce->cell();
                    d.attr = c.attr;
                    d.value = c.value;
                    d.rationale = "restore attribute";
                    claims.dests.insert(Claims::key(ce->cell()));
                    return d;
                }
                return make_add(*ce, Dimension::attribute_accuracy, claims, "restore attribute");
            }
            return move_or_add(img_scene, canonical, c.a, *ce, Dimension::attribute_accuracy,
                               claims, "restore placement");
        }
        case Constraint::Kind::relation: {
            const Entity* ca = first_match(canonical, c.a);
            const Entity* cb = first_match(canonical, c.b);
            if (!ca || !cb) throw Error("verifier: canonical scene misses relation endpoints");
            const Entity* at_a = img_scene.at(ca->cell());
            bool a_ok = (at_a && c.a.matches(*at_a)) || claims.dest_claimed(ca->cell());
            if (!a_ok)
                return move_or_add(img_scene, canonical, c.a, *ca, Dimension::attribute_accuracy,
                                   claims, "restore placement");
            return move_or_add(img_scene, canonical, c.b, *cb, Dimension::attribute_accuracy,
                               claims, "restore placement");
        }
        case Constraint::Kind::count_equals: {
            std::vector<const Entity*> img_m, canon_m;
            for (const auto& e : img_scene.entities)
                if (c.a.matches(e)) img_m.push_back(&e);
            for (const auto& e : canonical.entities)
                if (c.a.matches(e)) canon_m.push_back(&e);
            if (static_cast<int>(img_m.size()) < c.value) {
                for (const Entity* ce : canon_m) {
                    const Entity* at = img_scene.at(ce->cell());
                    if (at && at->desc() == ce->desc()) continue;
                    if (claims.dest_claimed(ce->cell())) continue;  // already being restored
                    return make_add(*ce, Dimension::object_presence, claims,
                                    "match required count");
                }
                // Every canonical placement is present or claimed; a duplicate
                // add keeps the one-directive-per-constraint contract.
                return make_add(*canon_m.front(), Dimension::object_presence, claims,
                                "match required count");
            }
            for (const Entity* ie : img_m) {
                const Entity* ce = canonical.at(ie->cell());
                bool is_canonical = ce && ce->desc() == ie->desc();
                if (is_canonical || claims.source_claimed(ie->cell())) continue;
                EditDirective d;
                d.dimension = Dimension::object_presence;
                d.action = EditAction::remove;
                d.entity = ie->desc();
                d.cell = ie->cell();
                d.rationale = "match required count";
                claims.sources.insert(Claims::key(ie->cell()));
                return d;
            }
            EditDirective d;
            d.dimension = Dimension::object_presence;
            d.action = EditAction::remove;
            d.entity = img_m.front()->desc();
            d.cell = img_m.front()->cell();
            d.rationale = "match required count";
            return d;
        }
        case Constraint::Kind::path_valid: {
            for (const auto& e : canonical.entities) {
                if (!(e.desc() == rules.maze.path)) continue;
                auto d = GridImage::desc_of_code(img.at(e.row, e.col));
                if (d && *d == e.desc()) continue;
                if (claims.dest_claimed(e.cell())) continue;
                return make_add(e, Dimension::object_presence, claims, "repair path");
            }
            for (const auto& e : img_scene.entities) {
                if (!(e.desc() == rules.maze.path)) continue;
                const Entity* ce = canonical.at(e.cell());
                if (ce && ce->desc() == e.desc()) continue;
                if (claims.source_claimed(e.cell())) continue;
                EditDirective d;
                d.dimension = Dimension::object_presence;
                d.action = EditAction::remove;
                d.entity = e.desc();
                d.cell = e.cell();
                d.rationale = "repair path";
                claims.sources.insert(Claims::key(e.cell()));
                return d;
            }
            throw Error("verifier: path constraint violated but no repair found");
        }
        case Constraint::Kind::state_after_steps:
            throw InputError("verifier: uncompiled temporal constraint");
    }
    throw Error("verifier: unhandled constraint kind");
}

}  // namespace

std::vector<EditDirective> verify(const GridImage& img, const InstructionSpec& spec,
                                  const RuleTable& rules) {
    ConstraintSet cs = compile_constraints(spec, rules);
    Scene canonical = canonical_scene(spec, rules);
    Scene img_scene = scene_from_grid(img);
    Claims claims;
    std::vector<EditDirective> out;
    for (const auto& c : cs) {
        if (check_constraint(img, c, rules)) continue;
        out.push_back(fix_constraint(c, img, img_scene, canonical, rules, claims));
    }
    // Style proxy: all colors from the canonical palette.
    std::set<int> palette;
    for (const auto& e : canonical.entities) palette.insert(static_cast<int>(e.color));
    for (const auto& c : cs) {
        if (c.a.color) palette.insert(static_cast<int>(*c.a.color));
        if (c.b.color) palette.insert(static_cast<int>(*c.b.color));
        if (c.kind == Constraint::Kind::attribute_equals && c.attr == AttrKind::color)
            palette.insert(c.value);
    }
    for (const auto& e : img_scene.entities) {
        if (palette.count(static_cast<int>(e.color))) continue;
        if (claims.source_claimed(e.cell())) continue;
        EditDirective d;
        d.dimension = Dimension::style_consistency;
        d.action = EditAction::remove;
        d.entity = e.desc();
        d.cell = e.cell();
        d.rationale = "off palette";
        claims.sources.insert(Claims::key(e.cell()));
        out.push_back(d);
    }
    // Realism proxy: overlapping entities cannot exist in a grid raster, so
    // this proxy can never fail here; it is part of the scene-level schema.
    // Aesthetic proxy: at least one entity.
    if (img_scene.entities.empty() && !canonical.entities.empty()) {
        out.push_back(make_add(canonical.entities.front(), Dimension::aesthetic_quality, claims,
                               "empty composition"));
    }
    return out;
}

GridImage refine_teacher(const GridImage& img, const std::vector<EditDirective>& directives) {
    Scene scene = scene_from_grid(img);
    for (const auto& d : directives) {
        switch (d.action) {
            case EditAction::add: {
                if (const Entity* at = scene.at(d.cell)) {
                    if (at->desc() == d.entity) break;  // already applied
                    throw DirectiveError("add collides at (" + std::to_string(d.cell.row) + "," +
                                         std::to_string(d.cell.col) + ")");
                }
                scene.entities.push_back(
                    Entity{d.entity.shape, d.entity.color, d.cell.row, d.cell.col});
                break;
            }
            case EditAction::remove: {
                const Entity* at = scene.at(d.cell);
                if (!at) throw DirectiveError("remove target not found");
                if (!(at->desc() == d.entity)) throw DirectiveError("remove target mismatch");
                scene.entities.erase(scene.entities.begin() +
                                     (at - scene.entities.data()));
                break;
            }
            case EditAction::change_attribute: {
                Entity* at = scene.at(d.cell);
                if (!at) throw DirectiveError("change target not found");
                if (d.attr == AttrKind::color) at->color = static_cast<Color>(d.value);
                else if (d.attr == AttrKind::shape) at->shape = static_cast<Shape>(d.value);
                else throw DirectiveError("change supports color and shape only");
                break;
            }
            case EditAction::move: {
                Entity* src = scene.at(d.from);
                if (!src) {
                    const Entity* at = scene.at(d.cell);
                    if (at && at->desc() == d.entity) break;  // already applied
                    throw DirectiveError("move source not found");
                }
                if (scene.at(d.cell)) throw DirectiveError("move destination occupied");
                src->row = d.cell.row;
                src->col = d.cell.col;
                break;
            }
        }
    }
    scene.validate();
    return render(scene);
}

JudgeVerdict judge(const GridImage& initial, const GridImage& refined,
                   const InstructionSpec& spec, const std::vector<EditDirective>& directives,
                   const RuleTable& rules) {
    ConstraintSet cs = compile_constraints(spec, rules);
    JudgeVerdict v;
    v.initial_score = oracle_score(initial, cs, rules);
    v.refined_score = oracle_score(refined, cs, rules);
    if (directives.empty()) {
        v.directive_faithfulness = 1.0;
    } else {
        int applied = 0;
        for (const auto& d : directives)
            if (d.applied(refined)) ++applied;
        v.directive_faithfulness = static_cast<double>(applied) / static_cast<double>(directives.size());
    }
    v.retain = v.refined_score > v.initial_score && v.directive_faithfulness == 1.0;
    return v;
}

// ---------------------------------------------------------------------------
// Remote adapter

json grid_to_json(const GridImage& img) {
    return json{{"h", img.h()}, {"w", img.w()}, {"cells", img.cells()}};
}

GridImage grid_from_json(const json& j) {
    GridImage img(j.at("h").get<int>(), j.at("w").get<int>());
    auto cells = j.at("cells").get<std::vector<int>>();
    if (cells.size() != img.cells().size()) throw InputError("grid json: wrong cell count");
    for (int c : cells)
        if (c < 0 || c >= GridImage::code_count()) throw InputError("grid json: bad code");
    img.cells() = cells;
    return img;
}

namespace {

json selector_to_json(const Selector& s) {
    json j = json::object();
    if (s.color) j["color"] = to_word(*s.color);
    if (s.shape) j["shape"] = to_word(*s.shape);
    return j;
}

Selector selector_from_json(const json& j) {
    Selector s;
    if (j.contains("color")) {
        auto c = color_from_word(j.at("color").get<std::string>());
        if (!c) throw InputError("selector json: bad color");
        s.color = *c;
    }
    if (j.contains("shape")) {
        auto sh = shape_from_word(j.at("shape").get<std::string>());
        if (!sh) throw InputError("selector json: bad shape");
        s.shape = *sh;
    }
    return s;
}

json constraint_to_json(const Constraint& c) {
    json j;
    j["kind"] = static_cast<int>(c.kind);
    j["a"] = selector_to_json(c.a);
    j["b"] = selector_to_json(c.b);
    j["rel"] = static_cast<int>(c.rel);
    j["attr"] = static_cast<int>(c.attr);
    j["value"] = c.value;
    if (c.at_cell) j["at"] = {c.at_cell->row, c.at_cell->col};
    j["start"] = {c.start.row, c.start.col};
    j["goal"] = {c.goal.row, c.goal.col};
    j["object"] = c.object;
    j["start_segments"] = c.start_segments;
    return j;
}

Constraint constraint_from_json(const json& j) {
    Constraint c;
    c.kind = static_cast<Constraint::Kind>(j.at("kind").get<int>());
    c.a = selector_from_json(j.at("a"));
    c.b = selector_from_json(j.at("b"));
    c.rel = static_cast<Relation>(j.at("rel").get<int>());
    c.attr = static_cast<AttrKind>(j.at("attr").get<int>());
    c.value = j.at("value").get<int>();
    if (j.contains("at")) c.at_cell = Cell{j.at("at").at(0).get<int>(), j.at("at").at(1).get<int>()};
    c.start = Cell{j.at("start").at(0).get<int>(), j.at("start").at(1).get<int>()};
    c.goal = Cell{j.at("goal").at(0).get<int>(), j.at("goal").at(1).get<int>()};
    c.object = j.at("object").get<std::string>();
    c.start_segments = j.at("start_segments").get<int>();
    return c;
}

}  // namespace

json spec_to_json(const InstructionSpec& spec) {
    json j;
    j["text"] = spec.text_words;
    j["category"] = category_name(spec.category);
    j["constraints"] = json::array();
    for (const auto& c : spec.constraints) j["constraints"].push_back(constraint_to_json(c));
    j["hidden"] = spec.hidden;
    j["scene_seed"] = spec.scene_seed;
    return j;
}

InstructionSpec spec_from_json(const json& j) {
    InstructionSpec spec;
    spec.text_words = j.at("text").get<std::vector<std::string>>();
    spec.category = category_from_name(j.at("category").get<std::string>());
    for (const auto& cj : j.at("constraints")) spec.constraints.push_back(constraint_from_json(cj));
    spec.hidden = j.at("hidden").get<std::vector<bool>>();
    spec.scene_seed = j.at("scene_seed").get<uint64_t>();
    if (spec.hidden.size() != spec.constraints.size())
        throw InputError("spec json: hidden flags out of sync");
    return spec;
}

json RemoteAgentClient::make_request(const std::string& role, const InstructionSpec& spec,
                                     const std::vector<GridImage>& images,
                                     const std::vector<EditDirective>& directives) {
    json j;
    j["version"] = "1";
    j["role"] = role;
    j["instruction"] = spec_to_json(spec);
    j["images"] = json::array();
    for (const auto& img : images) j["images"].push_back(grid_to_json(img));
    j["directives"] = json::array();
    for (const auto& d : directives) j["directives"].push_back(d.to_json());
    return j;
}

json LoopbackTransport::send(const json& request) {
    if (fail_remaining_ > 0) {
        --fail_remaining_;
        throw IoError("loopback: injected transport failure");
    }
    if (request.at("version").get<std::string>() != "1")
        throw InputError("remote request: unsupported version");
    const std::string role = request.at("role").get<std::string>();
    InstructionSpec spec = spec_from_json(request.at("instruction"));
    std::vector<GridImage> images;
    for (const auto& gj : request.at("images")) images.push_back(grid_from_json(gj));
    std::vector<EditDirective> directives;
    for (const auto& dj : request.at("directives"))
        directives.push_back(EditDirective::from_json(dj));

    json resp;
    resp["version"] = "1";
    resp["role"] = role;
    resp["ok"] = true;
    if (role == "generator") {
        ScriptedCorruptor backend(rules_, CorruptorConfig{1, 2, false});
        Rng rng(spec.scene_seed);
        Draft d = backend.generate(spec, rng);
        resp["text"] = d.reasoning_words;
        resp["images"] = json::array({grid_to_json(d.image)});
    } else if (role == "verifier") {
        if (images.empty()) throw InputError("verifier request needs a draft image");
        auto out = verify(images[0], spec, rules_);
        resp["directives"] = json::array();
        for (const auto& d : out) resp["directives"].push_back(d.to_json());
        resp["text"] = reflection_words(out);
    } else if (role == "refiner") {
        if (images.empty()) throw InputError("refiner request needs a draft image");
        resp["images"] = json::array({grid_to_json(refine_teacher(images[0], directives))});
    } else if (role == "judge") {
        if (images.size() < 2) throw InputError("judge request needs two images");
        resp["verdict"] = judge(images[0], images[1], spec, directives, rules_).to_json();
    } else {
        throw InputError("remote request: unknown role '" + role + "'");
    }
    return resp;
}

json RemoteAgentClient::call(const json& request) {
    const std::string role = request.value("role", "?");
    std::string last_error;
    for (int attempt = 0; attempt <= policy_.max_retries; ++attempt) {
        if (attempt > 0 && policy_.backoff_ms > 0)
            std::this_thread::sleep_for(std::chrono::milliseconds(policy_.backoff_ms));
        try {
            json resp = transport_.send(request);
            if (resp.at("version").get<std::string>() != "1")
                throw InputError("remote response: unsupported version");
            if (!resp.at("ok").get<bool>()) throw InputError("remote response: not ok");
            if (resp.at("role").get<std::string>() != role)
                throw InputError("remote response: role mismatch");
            return resp;
        } catch (const std::exception& e) {
            last_error = e.what();
        }
    }
    throw PipelineError(role, "remote call failed after retries: " + last_error);
}

// ---------------------------------------------------------------------------
// Pipeline driver

std::vector<PipelineItem> run_pipeline(DraftBackend& backend,
                                       const std::vector<InstructionSpec>& specs,
                                       const RuleTable& rules, uint64_t seed,
                                       const AuditSink& audit, int threads) {
    std::vector<PipelineItem> items(specs.size());
    std::vector<std::vector<std::string>> logs(specs.size());

    auto work = [&](size_t i) {
        PipelineItem& item = items[i];
        item.id = static_cast<int>(i);
        item.spec = specs[i];
        Rng rng(mix_seed(seed, i));
        auto tag = "sample=" + std::to_string(i);

        item.draft = generate_draft(backend, item.spec, rng);
        logs[i].push_back(tag + " stage=generate backend=" + backend.name());
        try {
            item.directives = verify(item.draft.image, item.spec, rules);
            logs[i].push_back(tag + " stage=verify directives=" +
                              std::to_string(item.directives.size()));
        } catch (const std::exception& e) {
            throw PipelineError("verifier", e.what());
        }
        try {
            item.refined = refine_teacher(item.draft.image, item.directives);
            logs[i].push_back(tag + " stage=refine");
        } catch (const std::exception& e) {
            throw PipelineError("refiner", e.what());
        }
        try {
            item.verdict = judge(item.draft.image, item.refined, item.spec, item.directives, rules);
            logs[i].push_back(tag + " stage=judge retain=" +
                              std::to_string(item.verdict.retain ? 1 : 0) + " initial=" +
                              std::to_string(item.verdict.initial_score) + " refined=" +
                              std::to_string(item.verdict.refined_score));
        } catch (const PipelineError&) {
            throw;
        } catch (const std::exception& e) {
            throw PipelineError("judge", e.what());
        }
    };

    if (threads <= 1 || specs.size() < 2) {
        for (size_t i = 0; i < specs.size(); ++i) work(i);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        std::exception_ptr first_error;
        std::mutex err_mu;
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back([&]() {
                for (;;) {
                    size_t i = next.fetch_add(1);
                    if (i >= specs.size()) return;
                    try {
                        work(i);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(err_mu);
                        if (!first_error) first_error = std::current_exception();
                        return;
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    if (audit)
        for (const auto& sample_log : logs)
            for (const auto& line : sample_log) audit(line);
    return items;
}

}  // namespace gridflow
