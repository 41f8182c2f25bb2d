#include "independent_oracle.hpp"

#include <functional>

namespace gridflow::testsupport {

namespace {

struct Item {
    int row, col, color, shape;
};

std::vector<Item> items_of(const GridImage& img) {
    std::vector<Item> out;
    for (int r = 0; r < img.h(); ++r)
        for (int c = 0; c < img.w(); ++c) {
            int code = img.at(r, c);
            if (code == GridImage::kEmpty) continue;
            int v = code - 1;
            out.push_back({r, c, v / kNumShapes, v % kNumShapes});
        }
    return out;
}

bool sel_match(const Selector& s, const Item& it) {
    if (s.color && static_cast<int>(*s.color) != it.color) return false;
    if (s.shape && static_cast<int>(*s.shape) != it.shape) return false;
    return true;
}

bool rel_match(Relation r, const Item& a, const Item& b) {
    switch (r) {
        case Relation::left_of: return a.col < b.col;
        case Relation::right_of: return a.col > b.col;
        case Relation::above: return a.row < b.row;
        case Relation::below: return a.row > b.row;
        case Relation::adjacent: {
            int dr = a.row > b.row ? a.row - b.row : b.row - a.row;
            int dc = a.col > b.col ? a.col - b.col : b.col - a.col;
            return dr + dc == 1;
        }
    }
    return false;
}

// Recursive DFS over cells carrying the maze path descriptor.
bool dfs_reach(const GridImage& img, const RuleTable& rules, Cell from, Cell goal,
               std::vector<bool>& seen) {
    if (from == goal) return true;
    seen[static_cast<size_t>(from.row * img.w() + from.col)] = true;
    const int dr[4] = {1, -1, 0, 0};
    const int dc[4] = {0, 0, 1, -1};
    for (int k = 0; k < 4; ++k) {
        Cell nxt{from.row + dr[k], from.col + dc[k]};
        if (nxt.row < 0 || nxt.row >= img.h() || nxt.col < 0 || nxt.col >= img.w()) continue;
        if (seen[static_cast<size_t>(nxt.row * img.w() + nxt.col)]) continue;
        bool traversable = nxt == goal;
        int code = img.at(nxt.row, nxt.col);
        if (code != GridImage::kEmpty) {
            int v = code - 1;
            if (v / kNumShapes == static_cast<int>(rules.maze.path.color) &&
                v % kNumShapes == static_cast<int>(rules.maze.path.shape))
                traversable = true;
        }
        if (!traversable) continue;
        if (dfs_reach(img, rules, nxt, goal, seen)) return true;
    }
    return false;
}

}  // namespace

bool independent_check(const GridImage& img, const Constraint& c, const RuleTable& rules) {
    auto items = items_of(img);
    switch (c.kind) {
        case Constraint::Kind::entity_present:
            for (const auto& it : items) {
                if (!sel_match(c.a, it)) continue;
                if (c.at_cell && (it.row != c.at_cell->row || it.col != c.at_cell->col)) continue;
                return true;
            }
            return false;
        case Constraint::Kind::attribute_equals:
            for (const auto& it : items) {
                if (!sel_match(c.a, it)) continue;
                int have = 0;
                switch (c.attr) {
                    case AttrKind::row: have = it.row; break;
                    case AttrKind::col: have = it.col; break;
                    case AttrKind::color: have = it.color; break;
                    case AttrKind::shape: have = it.shape; break;
                }
                if (have == c.value) return true;
            }
            return false;
        case Constraint::Kind::relation:
            for (size_t i = 0; i < items.size(); ++i)
                for (size_t j = 0; j < items.size(); ++j)
                    if (i != j && sel_match(c.a, items[i]) && sel_match(c.b, items[j]) &&
                        rel_match(c.rel, items[i], items[j]))
                        return true;
            return false;
        case Constraint::Kind::count_equals: {
            int n = 0;
            for (const auto& it : items)
                if (sel_match(c.a, it)) ++n;
            return n == c.value;
        }
        case Constraint::Kind::path_valid: {
            std::vector<bool> seen(static_cast<size_t>(img.h() * img.w()), false);
            return dfs_reach(img, rules, c.start, c.goal, seen);
        }
        case Constraint::Kind::state_after_steps: {
            for (const auto& obj : rules.temporals) {
                if (obj.name != c.object) continue;
                int n = c.start_segments + obj.delta_per_step * c.value;
                if (n < 0) n = 0;
                if (n > obj.max_segments) n = obj.max_segments;
                int have = 0;
                for (const auto& it : items)
                    if (it.color == static_cast<int>(obj.entity.color) &&
                        it.shape == static_cast<int>(obj.entity.shape))
                        ++have;
                return have == n;
            }
            return false;
        }
    }
    return false;
}

double independent_score(const GridImage& img, const ConstraintSet& cs, const RuleTable& rules) {
    if (cs.empty()) return 1.0;
    int ok = 0;
    for (const auto& c : cs)
        if (independent_check(img, c, rules)) ++ok;
    return static_cast<double>(ok) / static_cast<double>(cs.size());
}

}  // namespace gridflow::testsupport
