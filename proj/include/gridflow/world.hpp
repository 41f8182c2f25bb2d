#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gridflow/rng.hpp"
#include "gridflow/rules.hpp"
#include "gridflow/text.hpp"
#include "gridflow/types.hpp"

namespace gridflow {

struct GridConfig {
    int h = 12;
    int w = 12;
};

struct Entity {
    Shape shape;
    Color color;
    int row = 0;
    int col = 0;

    EntityDesc desc() const { return EntityDesc{color, shape}; }
    Cell cell() const { return Cell{row, col}; }
    bool operator==(const Entity&) const = default;
};

// Symbolic ground truth: an ordered entity list on an h x w grid.
// No two entities may share a cell.
struct Scene {
    std::vector<Entity> entities;
    int grid_h = 12;
    int grid_w = 12;

    void validate() const;
    bool occupied(Cell c) const;
    const Entity* at(Cell c) const;
    Entity* at(Cell c);
};

// The rendered raster: one code per cell. Code 0 is empty; codes 1..40
// enumerate (color, shape) pairs.
class GridImage {
public:
    static constexpr int kEmpty = 0;

    GridImage() = default;
    GridImage(int h, int w) : h_(h), w_(w), cells_(static_cast<size_t>(h * w), kEmpty) {}

    static int code_count() { return 1 + kNumColors * kNumShapes; }
    static int code_of(Color c, Shape s) {
        return 1 + static_cast<int>(c) * kNumShapes + static_cast<int>(s);
    }
    static std::optional<EntityDesc> desc_of_code(int code);

    int h() const { return h_; }
    int w() const { return w_; }
    int at(int r, int c) const { return cells_[static_cast<size_t>(r * w_ + c)]; }
    void set(int r, int c, int code) { cells_[static_cast<size_t>(r * w_ + c)] = code; }
    const std::vector<int>& cells() const { return cells_; }
    std::vector<int>& cells() { return cells_; }

    bool operator==(const GridImage&) const = default;

private:
    int h_ = 12;
    int w_ = 12;
    std::vector<int> cells_ = std::vector<int>(144, kEmpty);
};

enum class KnowledgeCategory { cultural, natural_science, spatial, temporal, logical };
inline constexpr int kNumCategories = 5;
const std::string& category_name(KnowledgeCategory c);
KnowledgeCategory category_from_name(const std::string& name);

// Matches entities by optional color and/or shape.
struct Selector {
    std::optional<Color> color;
    std::optional<Shape> shape;

    bool matches(const Entity& e) const {
        return (!color || e.color == *color) && (!shape || e.shape == *shape);
    }
    bool operator==(const Selector&) const = default;
    std::vector<std::string> phrase_words() const;

    static Selector of(EntityDesc d) { return Selector{d.color, d.shape}; }
    static Selector of_shape(Shape s) { return Selector{std::nullopt, s}; }
};

enum class AttrKind { color, shape, row, col };

// One machine-checkable condition on a GridImage. Decidable in O(entities^2).
struct Constraint {
    enum class Kind {
        entity_present,     // exists entity matching `a` (at `at_cell` if set)
        attribute_equals,   // exists entity matching `a` with attr == value
        relation,           // exist distinct entities a, b with rel(a, b)
        count_equals,       // exactly `value` entities match `a`
        path_valid,         // path entities connect `start` to `goal`
        state_after_steps,  // temporal object after `value` steps (compiles to count_equals)
    };

    Kind kind;
    Selector a;
    Selector b;
    Relation rel = Relation::left_of;
    AttrKind attr = AttrKind::row;
    int value = 0;  // attribute value, count, or step count
    std::optional<Cell> at_cell;
    Cell start{};
    Cell goal{};
    std::string object;      // temporal object name
    int start_segments = 0;  // temporal initial stack height

    bool operator==(const Constraint&) const = default;

    // Canonical token phrase, e.g. "the red star is right of the blue circle".
    std::vector<std::string> serialize_words(const RuleTable& rules) const;

    static Constraint present(Selector s, std::optional<Cell> at = std::nullopt);
    static Constraint attribute(Selector s, AttrKind k, int v);
    static Constraint related(Selector a, Relation r, Selector b);
    static Constraint count(Selector s, int n);
    static Constraint path(Cell start, Cell goal);
    static Constraint after_steps(const std::string& object, int start_segments, int steps);
};

using ConstraintSet = std::vector<Constraint>;

// An instruction plus its machine semantics. `hidden[i]` marks constraints
// implied by world knowledge rather than stated in the text.
struct InstructionSpec {
    std::vector<std::string> text_words;
    KnowledgeCategory category = KnowledgeCategory::spatial;
    ConstraintSet constraints;
    std::vector<bool> hidden;
    uint64_t scene_seed = 0;  // canonical scene derivation seed

    std::vector<Constraint> hidden_constraints() const;
    bool has_hidden() const;
    std::string text() const;
};

enum class SampleMode { with_knowledge, explicit_only };

// Template-driven instruction sampling. `with_knowledge` specs always carry
// at least one hidden constraint; `explicit_only` specs state everything.
InstructionSpec sample_instruction(KnowledgeCategory category, Rng& rng,
                                   const RuleTable& rules, GridConfig grid = {},
                                   SampleMode mode = SampleMode::with_knowledge);

// Compositional families mirroring generic T2I instruction checks.
enum class CompositionalKind { single_object, two_object, counting, colors, position, attribution };
inline constexpr int kNumCompositionalKinds = 6;
const std::string& compositional_name(CompositionalKind k);
InstructionSpec sample_compositional(CompositionalKind kind, Rng& rng, GridConfig grid = {});

// Explicit union of stated and hidden constraints with temporal state
// constraints resolved through the rule table. Deterministic and idempotent.
ConstraintSet compile_constraints(const InstructionSpec& spec, const RuleTable& rules);

// A scene satisfying every constraint, sampled from a bounded candidate pool
// (256 randomized attempts, then one constructive attempt). Throws
// UnsatisfiableError if no satisfying scene is found.
Scene ground_truth_scene(const ConstraintSet& cs, Rng& rng, const RuleTable& rules,
                         GridConfig grid = {});

GridImage render(const Scene& scene);
Scene scene_from_grid(const GridImage& img);

bool check_constraint(const GridImage& img, const Constraint& c, const RuleTable& rules);
// Fraction of constraints satisfied; 1.0 iff all hold. Empty set scores 1.0.
double oracle_score(const GridImage& img, const ConstraintSet& cs, const RuleTable& rules);

// Uniformly random scene with `entities` entities (for baselines and codec fitting).
Scene random_scene(int entities, Rng& rng, GridConfig grid = {});

// An editing task: source scene, instruction, goal constraints on the edited
// image, the cells the edit may touch, and the canonical edited scene.
struct EditTask {
    Scene source;
    std::vector<std::string> text_words;
    ConstraintSet goal;
    std::vector<Cell> touched;
    Scene target;
};

// `with_knowledge` draws the added entity from the cultural lexicon (its
// descriptor is implied, not stated); `explicit_only` states everything.
EditTask sample_edit_task(Rng& rng, const RuleTable& rules, GridConfig grid = {},
                          SampleMode mode = SampleMode::explicit_only);

// Temporal transition: stack height after `steps` applications.
int temporal_segments_after(const TemporalObject& obj, int start_segments, int steps);

// Breadth-first shortest path, deterministic neighbor order (up, down, left,
// right). Returns empty if unreachable. Used by the maze generator.
std::vector<Cell> bfs_path(Cell start, Cell goal, const std::vector<Cell>& walls,
                           GridConfig grid);

std::string ascii_grid(const GridImage& img);

}  // namespace gridflow
