#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "t2is/tensor.hpp"

namespace t2is {

// 8-bit RGB raster. Conversion from float rounds v·255 after clamping to [0, 1].
struct Rgb8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // row major, 3 bytes per pixel

    bool operator==(const Rgb8&) const = default;
};

Rgb8 to_rgb8(const Tensor& image);
Tensor from_rgb8(const Rgb8& image);

// Binary P6 with maxval 255.
void write_ppm(const std::string& path, const Rgb8& image);
Rgb8 read_ppm(const std::string& path);

// 8-bit RGB PNG via libpng. Reading accepts any bit depth / colour type and
// converts to RGB8 (alpha dropped).
std::vector<std::uint8_t> encode_png(const Rgb8& image);
void write_png(const std::string& path, const Rgb8& image);
Rgb8 read_png(const std::string& path);

// Dispatch on the extension (.png, .ppm).
Rgb8 read_image(const std::string& path);

// Tiles equally sized images row major on a rows × cols canvas, separated by
// `gap` black pixels.
Tensor compose_grid(const std::vector<Tensor>& images, std::size_t rows, std::size_t cols, std::size_t gap = 0);

}  // namespace t2is
