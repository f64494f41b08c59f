#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "t2is/tensor.hpp"

namespace t2is {

enum class ShapeKind { square = 0, circle = 1, triangle = 2 };
enum class ColorKind { red = 0, green = 1, blue = 2 };

inline constexpr std::array<ShapeKind, 3> kAllShapes = {ShapeKind::square, ShapeKind::circle, ShapeKind::triangle};
inline constexpr std::array<ColorKind, 3> kAllColors = {ColorKind::red, ColorKind::green, ColorKind::blue};

std::string_view shape_name(ShapeKind s);
std::string_view color_name(ColorKind c);
ShapeKind shape_from_index(int id);
ColorKind color_from_index(int id);

// Toy prompt vocabulary. Token 0 is the null prompt used for guidance and
// for empty spans.
namespace vocab {
inline constexpr int null_token = 0;
inline constexpr int size = 7;
int shape_token(ShapeKind s);
int color_token(ColorKind c);
bool is_shape(int token);
bool is_color(int token);
std::string_view token_name(int token);
}  // namespace vocab

struct ShapeSample {
    Tensor image;  // side × side × 3, values in [0, 1]
    ShapeKind shape;
    ColorKind color;

    // [shape token, color token]
    std::vector<int> prompt_tokens() const;
};

// Filled shape on black. Geometry is defined on a 16-pixel canvas and scaled
// for other sides:
//   square   rows/cols 4..11 inclusive
//   circle   radius 5 about (7.5, 7.5), pixel-centre inclusion
//   triangle vertices (x, y) = (3, 13), (12, 13), (7.5, 3), pixel-centre
//            half-plane test
ShapeSample render_shape(ShapeKind shape, ColorKind color, std::size_t side = 16);
ShapeSample render_shape(int shape_id, int color_id, std::size_t side = 16);

// All nine (shape, color) combinations.
std::vector<ShapeSample> shape_corpus(std::size_t side = 16);

}  // namespace t2is
