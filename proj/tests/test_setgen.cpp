#include <set>

#include "doctest.h"
#include "support.hpp"
#include "t2is/error.hpp"
#include "t2is/setgen.hpp"

using namespace t2is;
using t2is::testing::reference_run;
using t2is::testing::tiny_config;

namespace {

SetPrompts random_prompts(Rng& rng, std::size_t n, bool with_global) {
    SetPrompts sp;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<int> p;
        if (rng.below(4)) p.push_back(1 + int(rng.below(3)));
        if (rng.below(2)) p.push_back(4 + int(rng.below(3)));
        sp.images.push_back(p);
    }
    if (with_global) sp.global = {4 + int(rng.below(3))};
    return sp;
}

GridLayout grid_for(const ModelConfig& cfg, std::size_t n) {
    return grid_layout_for(n, cfg.tokens_per_side(), cfg.tokens_per_side());
}

}  // namespace

TEST_CASE("schedule") {
    Schedule s;
    CHECK(s.total_steps == 20);
    CHECK(s.divide_steps == 2);
    CHECK(s.guidance_scale == 3.5);
    auto sig = s.sigmas();
    CHECK(sig.size() == 21);
    CHECK(sig.front() == 1.0);
    CHECK(sig.back() == 0.0);
    CHECK(sig[5] == doctest::Approx(0.75));
    CHECK_THROWS_AS((Schedule{4, 5, 1.0}.validate()), ValidationError);
    CHECK_THROWS_AS((Schedule{4, 2, -1.0}.validate()), ValidationError);
    CHECK_NOTHROW((Schedule{4, 4, 0.0}.validate()));
}

TEST_CASE("grid choice by set size") {
    for (std::size_t n : {1u, 2u, 3u, 5u}) {
        auto g = grid_layout_for(n, 8, 8);
        CHECK(g.rows == 1);
        CHECK(g.cols == n);
        CHECK_FALSE(g.windows.has_value());
    }
    auto four = grid_layout_for(4, 8, 8);
    CHECK(four.rows == 2);
    CHECK(four.cols == 2);
    auto six = grid_layout_for(6, 8, 8);
    REQUIRE(six.windows.has_value());
    CHECK(six.rows == 2);
    CHECK(six.cols == 2);
    CHECK(six.windows->windows == std::vector<std::vector<std::size_t>>{{0, 1, 2, 3}, {2, 3, 4, 5}});
    auto seven = grid_layout_for(7, 8, 8);
    CHECK(seven.windows->windows == std::vector<std::vector<std::size_t>>{{0, 1, 2, 3}, {2, 3, 4, 5}, {3, 4, 5, 6}});
    CHECK_THROWS_AS(grid_layout_for(0, 8, 8), ValidationError);
    CHECK_THROWS_AS(grid_layout_fixed(1, 2, 3, 8, 8), ValidationError);
}

TEST_CASE("sliding windows cover every image with clamped final start") {
    for (std::size_t n = 6; n <= 12; ++n) {
        auto w = sliding_windows(n, 4, 2);
        std::set<std::size_t> seen;
        for (std::size_t i = 0; i < w.size(); ++i) {
            REQUIRE(w[i].size() == 4);
            for (std::size_t j = 1; j < 4; ++j) CHECK(w[i][j] == w[i][0] + j);
            CHECK(w[i].back() < n);
            if (i + 1 < w.size()) CHECK(w[i][0] == 2 * i);
            seen.insert(w[i].begin(), w[i].end());
        }
        CHECK(w.back()[0] == n - 4);
        CHECK(seen.size() == n);
    }
}

TEST_CASE("grid concatenation") {
    SUBCASE("cell offsets") {
        auto g = grid_layout_fixed(2, 2, 4, 8, 8);
        std::vector<Tensor> lat(4, Tensor({64, 12}));
        auto gt = concat_grid<float>(lat, g);
        CHECK(gt.coords[2 * 64] == Coord{8, 0});
        CHECK(gt.coords[1 * 64 + 9] == Coord{1, 9});
        CHECK(gt.coords[3 * 64 + 63] == Coord{15, 15});
    }
    SUBCASE("round trip") {
        Rng rng(3);
        std::vector<Tensor> lat;
        for (int i = 0; i < 3; ++i) lat.push_back(randn<float>(rng, {64, 12}));
        auto gt = concat_grid<float>(lat, grid_layout_for(3, 8, 8));
        CHECK(split_grid(gt.tokens, 3) == lat);
    }
    SUBCASE("fill pattern keeps input order") {
        std::vector<Tensor> lat;
        for (int i = 0; i < 3; ++i) lat.push_back(Tensor::full({64, 12}, float(i + 1)));
        auto gt = concat_grid<float>(lat, grid_layout_for(3, 8, 8));
        for (std::size_t r = 0; r < gt.tokens.rows(); ++r) CHECK(gt.tokens.at(r, 0) == float(r / 64 + 1));
        CHECK(gt.coords[64] == Coord{0, 8});
    }
    SUBCASE("errors") {
        std::vector<Tensor> bad{Tensor({64, 12}), Tensor({63, 12})};
        CHECK_THROWS_AS(concat_grid<float>(bad, grid_layout_for(2, 8, 8)), DimensionError);
        std::vector<Tensor> many(3, Tensor({64, 12}));
        CHECK_THROWS_AS(concat_grid<float>(many, grid_layout_fixed(1, 2, 2, 8, 8)), ValidationError);
    }
}

TEST_CASE("guidance and Euler arithmetic") {
    auto vu = Tensor::from_rows({{0, 1}});
    auto vc = Tensor::from_rows({{2, -1}});
    CHECK(cfg_combine(vu, vc, 1.0f) == vc);
    CHECK(cfg_combine(vu, vc, 0.0f) == vu);
    CHECK(cfg_combine(vu, vc, 3.5f)[0] == 7.0f);
    CHECK_THROWS_AS(cfg_combine(vu, Tensor({1, 3}), 1.0f), DimensionError);

    auto x = Tensor64::from_rows({{1.5, -2}});
    CHECK(euler_step(x, Tensor64({1, 2}), 0.7, 0.6) == x);
    // Constant field: Euler over any grid lands on x + (σ_end - σ_start)·v.
    auto v = Tensor64::from_rows({{0.25, 3}});
    Schedule s{8, 0, 1.0};
    auto sig = s.sigmas();
    auto y = x;
    for (std::size_t i = 0; i < 8; ++i) y = euler_step(y, v, sig[i], sig[i + 1]);
    CHECK(y[0] == doctest::Approx(1.5 - 0.25).epsilon(1e-14));
    CHECK(y[1] == doctest::Approx(-2.0 - 3.0).epsilon(1e-14));
}

TEST_CASE("divide phase") {
    auto cfg = tiny_config();
    auto p = ModelParams<float>::initialized(cfg, 5);
    Schedule sch{6, 2, 3.5};
    SetPrompts sp{{{1, 4}, {2, 5}, {3}}, {6}};
    auto seeds = image_seeds(77, 3);

    SUBCASE("no divide steps leaves the noise") {
        auto out = divide_phase(p, sp, Schedule{6, 0, 3.5}, seeds);
        for (std::size_t i = 0; i < 3; ++i) CHECK(out[i] == initial_latent<float>(cfg, seeds[i]));
    }
    SUBCASE("matches the single-image reference") {
        auto out = divide_phase(p, sp, sch, seeds);
        for (std::size_t i = 0; i < 3; ++i) CHECK(max_abs_diff(out[i], reference_run(p, sp.images[i], sch, seeds[i], 2)) == 0.0f);
    }
    SUBCASE("other prompts and seeds have no influence") {
        auto base = divide_phase(p, sp, sch, seeds);
        auto sp2 = sp;
        sp2.images[1] = {3, 6};
        sp2.global = {4};
        auto seeds2 = seeds;
        seeds2[2] ^= 0x1234;
        auto other = divide_phase(p, sp2, sch, seeds2);
        CHECK(other[0] == base[0]);
        CHECK(other[1] != base[1]);
        CHECK(other[2] != base[2]);
    }
    SUBCASE("reproducible") { CHECK(divide_phase(p, sp, sch, seeds) == divide_phase(p, sp, sch, seeds)); }
    SUBCASE("size checks") {
        CHECK_THROWS_AS(divide_phase(p, sp, sch, std::span(seeds).first(2)), ValidationError);
        CHECK_THROWS_AS(divide_phase(p, sp, Schedule{2, 3, 1.0}, seeds), ValidationError);
    }
}

TEST_CASE("blocked conquer equals independent sampling") {
    auto cfg = tiny_config();
    Rng rng(19);
    for (int trial = 0; trial < 3; ++trial) {
        auto p64 = ModelParams<double>::initialized(cfg, 100 + trial);
        auto p32 = p64.cast<float>();
        const std::size_t n = 2 + rng.below(4);
        auto sp = random_prompts(rng, n, rng.below(2));
        Schedule sch{5, rng.below(3), 2.0 + rng.uniform() * 3};
        auto seeds = image_seeds(rng.next_u64(), n);
        ConquerOptions blocked{{.attend_global = false, .cross_image_visual = false}, PositionMode::local};
        auto r64 = generate_set(p64, sp, sch, seeds, grid_for(cfg, n), blocked);
        auto r32 = generate_set(p32, sp, sch, seeds, grid_for(cfg, n), blocked);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(max_abs_diff(r64.latents[i], reference_run(p64, sp.images[i], sch, seeds[i], sch.total_steps)) <= 1e-10);
            CHECK(max_abs_diff(r32.latents[i], sample_single(p32, sp.images[i], sch, seeds[i])) <= 1e-5f);
        }
    }
}

TEST_CASE("single image set equals the plain sampler") {
    auto cfg = tiny_config();
    auto p = ModelParams<float>::initialized(cfg, 8);
    Schedule sch{6, 2, 3.5};
    SetPrompts sp{{{2, 5}}, {}};
    auto seeds = image_seeds(3, 1);
    auto r = generate_set(p, sp, sch, seeds, grid_for(cfg, 1));
    CHECK(r.latents[0] == sample_single(p, sp.images[0], sch, seeds[0]));
}

TEST_CASE("divide for every step gives independent images") {
    auto cfg = tiny_config();
    auto p = ModelParams<float>::initialized(cfg, 9);
    Schedule sch{5, 5, 3.5};
    SetPrompts sp{{{1}, {2}, {3}, {1, 4}}, {5}};
    auto seeds = image_seeds(4, 4);
    ConquerTrace trace;
    auto r = generate_set(p, sp, sch, seeds, grid_for(cfg, 4), {}, &trace);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.latents[i] == sample_single(p, sp.images[i], sch, seeds[i]));
    CHECK(trace.windows.at(0).steps == 0);
}

TEST_CASE("set order travels with the images") {
    auto cfg = tiny_config();
    auto p = ModelParams<double>::initialized(cfg, 10);
    Schedule sch{5, 1, 3.5};
    SetPrompts sp{{{1, 4}, {2}, {3, 6}}, {5}};
    auto seeds = image_seeds(12, 3);
    auto base = generate_set(p, sp, sch, seeds, grid_for(cfg, 3));
    const std::vector<std::size_t> perm{1, 2, 0};
    SetPrompts sp2{{}, sp.global};
    std::vector<std::uint64_t> seeds2;
    for (auto i : perm) {
        sp2.images.push_back(sp.images[i]);
        seeds2.push_back(seeds[i]);
    }
    // Cells follow the images, so the permuted run places each image where it was.
    auto grid = grid_for(cfg, 3);
    auto grid2 = grid;
    for (std::size_t s = 0; s < 3; ++s) grid2.cells[s] = grid.cells[perm[s]];
    auto moved = generate_set(p, sp2, sch, seeds2, grid2);
    for (std::size_t s = 0; s < 3; ++s) CHECK(max_abs_diff(moved.latents[s], base.latents[perm[s]]) <= 1e-9);
}

TEST_CASE("sliding windows freeze finished images") {
    auto cfg = tiny_config();
    auto p = ModelParams<float>::initialized(cfg, 12);
    Schedule sch{4, 1, 3.5};
    for (std::size_t n : {6u, 7u}) {
        Rng rng(n);
        auto sp = random_prompts(rng, n, true);
        auto seeds = image_seeds(n, n);
        ConquerTrace trace;
        auto r = generate_set(p, sp, sch, seeds, grid_for(cfg, n), {}, &trace);
        CHECK(r.latents.size() == n);
        std::vector<int> updated(n, 0);
        for (const auto& w : trace.windows) {
            CHECK(w.frozen_checksum_before == w.frozen_checksum_after);
            for (auto i : w.active) ++updated[i];
            CHECK(w.steps == (w.active.empty() ? 0u : 3u));
        }
        for (int u : updated) CHECK(u == 1);
        CHECK(trace.windows[1].frozen == std::vector<std::size_t>{2, 3});
    }
}

TEST_CASE("conquer input checks") {
    auto cfg = tiny_config();
    auto p = ModelParams<float>::initialized(cfg, 1);
    Schedule sch{3, 1, 1.0};
    SetPrompts sp{{{1}, {2}}, {}};
    std::vector<Tensor> lat{initial_latent<float>(cfg, 1)};
    CHECK_THROWS_AS(conquer_phase(p, lat, sp, grid_for(cfg, 2), sch), ValidationError);
    CHECK_THROWS_AS(conquer_phase(p, {}, SetPrompts{}, grid_for(cfg, 2), sch), ValidationError);
    auto wrong_cells = grid_layout_for(2, 8, 8);
    std::vector<Tensor> two{lat[0], lat[0]};
    CHECK_THROWS_AS(conquer_phase(p, two, sp, wrong_cells, sch), ValidationError);
}

TEST_CASE("images are clamped to the unit range") {
    auto cfg = tiny_config();
    Tensor lat = Tensor::full({16, 12}, 2.0f);
    lat[0] = -1.0f;
    auto img = latent_to_image(lat, cfg);
    CHECK(img.shape() == Shape{8, 8, 3});
    for (float v : img.values()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}
