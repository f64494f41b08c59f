#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "t2is/checkpoint.hpp"
#include "t2is/error.hpp"
#include "t2is/image_io.hpp"

using namespace t2is;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "t2is_test_io";
    fs::create_directories(dir);
    return dir / name;
}

Tensor gradient_image(std::size_t h, std::size_t w) {
    Tensor t({h, w, 3});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            t[(y * w + x) * 3 + 0] = static_cast<float>(x) / static_cast<float>(w - 1);
            t[(y * w + x) * 3 + 1] = static_cast<float>(y) / static_cast<float>(h - 1);
            t[(y * w + x) * 3 + 2] = 0.5f;
        }
    return t;
}

}  // namespace

TEST_CASE("rgb8 conversion rounds and clamps") {
    Tensor t({1, 2, 3}, {0.0f, 0.5f, 1.0f, -0.3f, 1.7f, 0.2f});
    const auto r = to_rgb8(t);
    CHECK(r.width == 2);
    CHECK(r.height == 1);
    CHECK(r.pixels == std::vector<std::uint8_t>{0, 128, 255, 0, 255, 51});
    const auto back = from_rgb8(r);
    CHECK(back[2] == 1.0f);
    CHECK(back[1] == doctest::Approx(128.0 / 255.0));
}

TEST_CASE("png and ppm round-trip") {
    const auto r = to_rgb8(gradient_image(5, 7));
    const auto png = scratch("g.png"), ppm = scratch("g.ppm");
    write_png(png.string(), r);
    write_ppm(ppm.string(), r);
    CHECK(read_png(png.string()) == r);
    CHECK(read_ppm(ppm.string()) == r);
    CHECK(read_image(png.string()) == r);
    CHECK(read_image(ppm.string()) == r);
    const auto bytes = encode_png(r);
    REQUIRE(bytes.size() > 8);
    CHECK(bytes[1] == 'P');
    CHECK_THROWS_AS(read_image(scratch("g.bmp").string()), ValidationError);
    CHECK_THROWS_AS(read_ppm(scratch("missing.ppm").string()), ValidationError);
    std::ofstream(scratch("bad.ppm")) << "P3\n1 1\n255\n0 0 0\n";
    CHECK_THROWS_AS(read_ppm(scratch("bad.ppm").string()), ParseError);
}

TEST_CASE("compose grid") {
    std::vector<Tensor> ims{Tensor::full({2, 2, 3}, 0.25f), Tensor::full({2, 2, 3}, 0.5f),
                            Tensor::full({2, 2, 3}, 0.75f)};
    const auto g = compose_grid(ims, 2, 2, 1);
    CHECK(g.shape() == Shape{5, 5, 3});
    auto px = [&](std::size_t y, std::size_t x) { return g[(y * 5 + x) * 3]; };
    CHECK(px(0, 0) == 0.25f);
    CHECK(px(0, 2) == 0.0f);
    CHECK(px(0, 4) == 0.5f);
    CHECK(px(4, 0) == 0.75f);
    CHECK(px(4, 4) == 0.0f);
    CHECK_THROWS_AS(compose_grid({}, 1, 1), ValidationError);
}

TEST_CASE("checkpoint round-trip is exact") {
    auto cfg = t2is::testing::tiny_config();
    cfg.distance_slope = 0.5;
    cfg.balance_text_attention = false;
    const auto p = ModelParams<float>::initialized(cfg, 7);
    std::stringstream buf;
    save_checkpoint(buf, p);
    const auto q = load_checkpoint(buf);
    CHECK(q.config.d_model == cfg.d_model);
    CHECK(q.config.distance_slope == 0.5);
    CHECK_FALSE(q.config.balance_text_attention);
    std::vector<const Tensor*> a, b;
    p.for_each([&](const std::string&, const Tensor& t) { a.push_back(&t); });
    q.for_each([&](const std::string&, const Tensor& t) { b.push_back(&t); });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->values() == b[i]->values());

    const auto file = scratch("m.ckpt");
    save_checkpoint_file(file.string(), p);
    CHECK(load_checkpoint_file(file.string()).config.n_layers == cfg.n_layers);
}

TEST_CASE("corrupt checkpoints are rejected") {
    const auto p = ModelParams<float>::initialized(t2is::testing::tiny_config(), 7);
    std::stringstream buf;
    save_checkpoint(buf, p);
    const std::string bytes = buf.str();

    std::stringstream bad_magic("NOTACKPT" + bytes.substr(8));
    CHECK_THROWS_AS(load_checkpoint(bad_magic), ParseError);
    std::stringstream truncated(bytes.substr(0, bytes.size() - 10));
    CHECK_THROWS_AS(load_checkpoint(truncated), ParseError);
    std::string v2 = bytes;
    v2[8] = 2;
    std::stringstream future(v2);
    CHECK_THROWS_AS(load_checkpoint(future), ParseError);
    CHECK_THROWS_AS(load_checkpoint_file(scratch("nope.ckpt").string()), ValidationError);
}

TEST_CASE("config json") {
    ModelConfig c = set_model_config();
    const auto back = config_from_json(config_to_json(c));
    CHECK(back.d_model == 48);
    CHECK(back.mlp_hidden == 96);
    CHECK(back.rope_base == c.rope_base);
    CHECK_THROWS_AS(config_from_json("[1,2]"), ParseError);
    CHECK_THROWS_AS(config_from_json("{"), ParseError);
}
