#include "t2is/shapes.hpp"

#include "t2is/error.hpp"

namespace t2is {

std::string_view shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::square: return "square";
        case ShapeKind::circle: return "circle";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

std::string_view color_name(ColorKind c) {
    switch (c) {
        case ColorKind::red: return "red";
        case ColorKind::green: return "green";
        case ColorKind::blue: return "blue";
    }
    return "?";
}

ShapeKind shape_from_index(int id) {
    if (id < 0 || id > 2) throw ValidationError("unknown shape id " + std::to_string(id));
    return static_cast<ShapeKind>(id);
}

ColorKind color_from_index(int id) {
    if (id < 0 || id > 2) throw ValidationError("unknown color id " + std::to_string(id));
    return static_cast<ColorKind>(id);
}

namespace vocab {

int shape_token(ShapeKind s) { return 1 + static_cast<int>(s); }
int color_token(ColorKind c) { return 4 + static_cast<int>(c); }
bool is_shape(int token) { return token >= 1 && token <= 3; }
bool is_color(int token) { return token >= 4 && token <= 6; }

std::string_view token_name(int token) {
    if (token == null_token) return "<null>";
    if (is_shape(token)) return shape_name(static_cast<ShapeKind>(token - 1));
    if (is_color(token)) return color_name(static_cast<ColorKind>(token - 4));
    return "<unk>";
}

}  // namespace vocab

std::vector<int> ShapeSample::prompt_tokens() const { return {vocab::shape_token(shape), vocab::color_token(color)}; }

namespace {

bool covers(ShapeKind shape, double x, double y) {
    switch (shape) {
        case ShapeKind::square:
            return x >= 4.0 && x < 12.0 && y >= 4.0 && y < 12.0;
        case ShapeKind::circle: {
            const double dx = x - 7.5, dy = y - 7.5;
            return dx * dx + dy * dy <= 25.0;
        }
        case ShapeKind::triangle: {
            const double ax = 3.0, ay = 13.0, bx = 12.0, by = 13.0, cx = 7.5, cy = 3.0;
            auto edge = [](double x0, double y0, double x1, double y1, double px, double py) {
                return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
            };
            const double e0 = edge(ax, ay, bx, by, x, y);
            const double e1 = edge(bx, by, cx, cy, x, y);
            const double e2 = edge(cx, cy, ax, ay, x, y);
            return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
        }
    }
    return false;
}

}  // namespace

ShapeSample render_shape(ShapeKind shape, ColorKind color, std::size_t side) {
    if (side == 0) throw ValidationError("render_shape: zero image side");
    Tensor image({side, side, 3});
    const double unit = 16.0 / static_cast<double>(side);
    const auto channel = static_cast<std::size_t>(color);
    for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t c = 0; c < side; ++c) {
            // Pixel centre in 16-pixel canvas units.
            const double x = (static_cast<double>(c) + 0.5) * unit;
            const double y = (static_cast<double>(r) + 0.5) * unit;
            if (covers(shape, x, y)) image[(r * side + c) * 3 + channel] = 1.0f;
        }
    }
    return {std::move(image), shape, color};
}

ShapeSample render_shape(int shape_id, int color_id, std::size_t side) {
    return render_shape(shape_from_index(shape_id), color_from_index(color_id), side);
}

std::vector<ShapeSample> shape_corpus(std::size_t side) {
    std::vector<ShapeSample> out;
    for (auto s : kAllShapes)
        for (auto c : kAllColors) out.push_back(render_shape(s, c, side));
    return out;
}

}  // namespace t2is
