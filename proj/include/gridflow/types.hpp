#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "gridflow/error.hpp"

namespace gridflow {

enum class Shape : uint8_t { circle, square, triangle, diamond, star };
enum class Color : uint8_t { red, blue, green, yellow, purple, orange, black, white };
enum class Relation : uint8_t { left_of, right_of, above, below, adjacent };

inline constexpr int kNumShapes = 5;
inline constexpr int kNumColors = 8;

inline const std::array<std::string, kNumShapes>& shape_words() {
    static const std::array<std::string, kNumShapes> w = {
        "circle", "square", "triangle", "diamond", "star"};
    return w;
}

inline const std::array<std::string, kNumShapes>& shape_plural_words() {
    static const std::array<std::string, kNumShapes> w = {
        "circles", "squares", "triangles", "diamonds", "stars"};
    return w;
}

inline const std::array<std::string, kNumColors>& color_words() {
    static const std::array<std::string, kNumColors> w = {
        "red", "blue", "green", "yellow", "purple", "orange", "black", "white"};
    return w;
}

inline const std::string& to_word(Shape s) { return shape_words()[static_cast<int>(s)]; }
inline const std::string& to_word(Color c) { return color_words()[static_cast<int>(c)]; }

inline std::string to_word(Relation r) {
    switch (r) {
        case Relation::left_of: return "left_of";
        case Relation::right_of: return "right_of";
        case Relation::above: return "above";
        case Relation::below: return "below";
        case Relation::adjacent: return "adjacent";
    }
    throw InputError("bad relation");
}

inline std::optional<Shape> shape_from_word(const std::string& w) {
    for (int i = 0; i < kNumShapes; ++i)
        if (shape_words()[i] == w) return static_cast<Shape>(i);
    return std::nullopt;
}

inline std::optional<Color> color_from_word(const std::string& w) {
    for (int i = 0; i < kNumColors; ++i)
        if (color_words()[i] == w) return static_cast<Color>(i);
    return std::nullopt;
}

inline std::optional<Relation> relation_from_word(const std::string& w) {
    for (int i = 0; i < 5; ++i) {
        auto r = static_cast<Relation>(i);
        if (to_word(r) == w) return r;
    }
    return std::nullopt;
}

// A (color, shape) pair naming a kind of entity.
struct EntityDesc {
    Color color;
    Shape shape;

    bool operator==(const EntityDesc&) const = default;
    std::string phrase() const { return to_word(color) + " " + to_word(shape); }
};

struct Cell {
    int row = 0;
    int col = 0;
    bool operator==(const Cell&) const = default;
};

}  // namespace gridflow
