#include "t2is/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include "t2is/error.hpp"

namespace t2is {

Rgb8 to_rgb8(const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("to_rgb8: expected H×W×3, got " + shape_str(image.shape()));
    Rgb8 out{image.dim(1), image.dim(0), std::vector<std::uint8_t>(image.size())};
    for (std::size_t i = 0; i < image.size(); ++i) {
        const float v = std::clamp(image[i], 0.0f, 1.0f);
        out.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return out;
}

Tensor from_rgb8(const Rgb8& image) {
    Tensor out({image.height, image.width, 3});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(image.pixels[i]) / 255.0f;
    return out;
}

void write_ppm(const std::string& path, const Rgb8& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("ppm: cannot open " + path + " for writing");
    out << "P6\n" << image.width << " " << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw Error("ppm: write failed for " + path);
}

namespace {

std::size_t read_ppm_number(std::istream& in, const std::string& path) {
    int ch;
    while ((ch = in.peek()) != EOF) {
        if (std::isspace(ch)) {
            in.get();
        } else if (ch == '#') {
            std::string skip;
            std::getline(in, skip);
        } else {
            break;
        }
    }
    std::size_t v = 0;
    if (!(in >> v)) throw ParseError("ppm: malformed header in " + path);
    return v;
}

}  // namespace

Rgb8 read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("ppm: cannot open " + path);
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P6") throw ParseError("ppm: " + path + " is not a binary P6 file");
    Rgb8 img;
    img.width = read_ppm_number(in, path);
    img.height = read_ppm_number(in, path);
    const auto maxval = read_ppm_number(in, path);
    if (maxval != 255) throw ParseError("ppm: only maxval 255 is supported");
    if (img.width == 0 || img.height == 0 || img.width > 16384 || img.height > 16384) {
        throw ParseError("ppm: implausible size in " + path);
    }
    in.get();
    img.pixels.resize(img.width * img.height * 3);
    if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
        throw ParseError("ppm: truncated pixel data in " + path);
    }
    return img;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
    auto* err = static_cast<std::string*>(png_get_error_ptr(png));
    if (err) *err = msg;
    png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace

namespace {

void png_append(png_structp png, png_bytep data, png_size_t len) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + len);
}

void png_no_flush(png_structp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Rgb8& image) {
    if (image.width == 0 || image.height == 0 || image.pixels.size() != image.width * image.height * 3) {
        throw ValidationError("png: image buffer does not match its dimensions");
    }
    std::vector<std::uint8_t> out;
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
    if (!png) throw Error("png: out of memory");
    png_infop info = png_create_info_struct(png);
    std::vector<png_bytep> rows(image.height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("png: encode failed: " + err);
    }
    png_set_write_fn(png, &out, png_append, png_no_flush);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    for (std::size_t r = 0; r < image.height; ++r) {
        rows[r] = const_cast<png_bytep>(image.pixels.data() + r * image.width * 3);
    }
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

void write_png(const std::string& path, const Rgb8& image) {
    const auto bytes = encode_png(image);
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw Error("png: cannot open " + path + " for writing");
    if (std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size()) throw Error("png: short write to " + path);
}

Rgb8 read_png(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw ValidationError("png: cannot open " + path);
    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
    if (!png) throw Error("png: out of memory");
    png_infop info = png_create_info_struct(png);
    Rgb8 img;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ParseError("png: cannot decode " + path + ": " + err);
    }
    png_init_io(png, f.get());
    png_read_png(png, info,
                 PNG_TRANSFORM_STRIP_16 | PNG_TRANSFORM_PACKING | PNG_TRANSFORM_EXPAND | PNG_TRANSFORM_STRIP_ALPHA |
                     PNG_TRANSFORM_GRAY_TO_RGB,
                 nullptr);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    const auto channels = png_get_channels(png, info);
    png_bytepp rows = png_get_rows(png, info);
    img.pixels.resize(img.width * img.height * 3);
    for (std::size_t r = 0; r < img.height; ++r)
        for (std::size_t c = 0; c < img.width; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch) img.pixels[(r * img.width + c) * 3 + ch] = rows[r][c * channels + ch];
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

Rgb8 read_image(const std::string& path) {
    auto ends_with = [&](const char* ext) {
        std::string e(ext);
        if (path.size() < e.size()) return false;
        std::string tail = path.substr(path.size() - e.size());
        std::transform(tail.begin(), tail.end(), tail.begin(), [](unsigned char ch) { return std::tolower(ch); });
        return tail == e;
    };
    if (ends_with(".png")) return read_png(path);
    if (ends_with(".ppm")) return read_ppm(path);
    throw ValidationError("image: unsupported file type " + path);
}

Tensor compose_grid(const std::vector<Tensor>& images, std::size_t rows, std::size_t cols, std::size_t gap) {
    if (images.empty()) throw ValidationError("compose_grid: no images");
    if (rows * cols < images.size()) throw ValidationError("compose_grid: grid too small");
    const Shape cell = images[0].shape();
    if (cell.size() != 3 || cell[2] != 3) throw DimensionError("compose_grid: expected H×W×3 images");
    for (const auto& im : images)
        if (im.shape() != cell) throw DimensionError("compose_grid: images differ in size");
    const std::size_t h = cell[0], w = cell[1];
    const std::size_t H = rows * h + (rows - 1) * gap, W = cols * w + (cols - 1) * gap;
    Tensor out({H, W, 3});
    for (std::size_t i = 0; i < images.size(); ++i) {
        const std::size_t r0 = (i / cols) * (h + gap), c0 = (i % cols) * (w + gap);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c)
                for (std::size_t ch = 0; ch < 3; ++ch)
                    out[((r0 + r) * W + c0 + c) * 3 + ch] = images[i][(r * w + c) * 3 + ch];
    }
    return out;
}

}  // namespace t2is
