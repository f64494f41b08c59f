#include <fstream>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "t2is/error.hpp"
#include "t2is/layout.hpp"
#include "t2is/rng.hpp"

using namespace t2is;

namespace {

TokenLayout make(std::vector<std::size_t> p, std::size_t g, std::vector<std::size_t> v) {
    return build_token_layout(p, g, v);
}

// Independent predicate: column j is visible from image k iff it lies in
// p_k, in g, or in any visual span.
bool expected_allowed(const TokenLayout& l, std::size_t k, std::size_t j) {
    if (l.prompt_spans[k].contains(j)) return true;
    if (l.global_span.contains(j)) return true;
    for (const auto& v : l.visual_spans)
        if (v.contains(j)) return true;
    return false;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("two-image layout") {
    auto l = make({3, 3}, 2, {4, 4});
    CHECK(l.n == 2);
    CHECK(l.prompt_spans[0] == Span{0, 3});
    CHECK(l.prompt_spans[1] == Span{3, 6});
    CHECK(l.global_span == Span{6, 8});
    CHECK(l.visual_spans[0] == Span{8, 12});
    CHECK(l.visual_spans[1] == Span{12, 16});
    CHECK(l.prompt_tokens() == 6);
    CHECK(l.global_tokens() == 2);
    CHECK(l.visual_tokens() == 8);
    CHECK(l.query_span(1) == Span{4, 8});
    CHECK(l.image_of_query(3) == 0);
    CHECK(l.image_of_query(4) == 1);
}

TEST_CASE("single-image layout") {
    auto l = make({2}, 1, {5});
    CHECK(l.n == 1);
    CHECK(l.key_count() == 8);
    auto m = build_set_mask(l);
    for (std::size_t i = 0; i < m.rows(); ++i) CHECK(m.allowed_in_row(i) == m.cols());
}

TEST_CASE("layout errors") {
    CHECK_THROWS_AS(make({}, 1, {}), ValidationError);
    CHECK_THROWS_AS(make({1, 2}, 1, {3}), ValidationError);
    CHECK_THROWS_AS(make({0}, 1, {3}), ValidationError);
    CHECK_THROWS_AS(make({1}, 0, {3}), ValidationError);
    CHECK_THROWS_AS(make({1}, 1, {0}), ValidationError);
}

TEST_CASE("random layouts tile the key axis") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t n = 1 + rng.below(6);
        std::vector<std::size_t> p(n), v(n);
        for (auto& x : p) x = 1 + rng.below(5);
        for (auto& x : v) x = 1 + rng.below(5);
        std::size_t g = 1 + rng.below(5);
        auto l = make(p, g, v);
        std::vector<int> hits(l.key_count(), 0);
        auto mark = [&](Span s) {
            for (std::size_t j = s.begin; j < s.end; ++j) ++hits.at(j);
        };
        for (auto s : l.prompt_spans) mark(s);
        mark(l.global_span);
        for (auto s : l.visual_spans) mark(s);
        for (int h : hits) CHECK(h == 1);
    }
}

TEST_CASE("set mask for the two-image layout") {
    auto l = make({3, 3}, 2, {4, 4});
    auto m = build_set_mask(l);
    CHECK(m.rows() == 8);
    CHECK(m.cols() == 16);
    for (std::size_t j = 0; j < 16; ++j) {
        bool masked = j >= 3 && j < 6;
        CHECK(m.allows(0, j) == !masked);
    }
    auto add = m.additive<float>();
    CHECK(add.at(0, 4) == -std::numeric_limits<float>::infinity());
    CHECK(add.at(0, 0) == 0.0f);
}

TEST_CASE("set mask matches the per-entry predicate") {
    Rng rng(23);
    for (int trial = 0; trial < 300; ++trial) {
        std::size_t n = 1 + rng.below(6);
        std::vector<std::size_t> p(n), v(n);
        for (auto& x : p) x = 1 + rng.below(5);
        for (auto& x : v) x = 1 + rng.below(5);
        auto l = make(p, 1 + rng.below(5), v);
        auto m = build_set_mask(l);
        for (std::size_t i = 0; i < m.rows(); ++i) {
            std::size_t k = l.image_of_query(i);
            for (std::size_t j = 0; j < m.cols(); ++j) CHECK(m.allows(i, j) == expected_allowed(l, k, j));
            CHECK(m.allowed_in_row(i) == p[k] + l.global_tokens() + l.visual_tokens());
        }
    }
}

TEST_CASE("mask options") {
    auto l = make({1, 2}, 2, {2, 3});
    auto blocked = build_set_mask(l, {.attend_global = false, .cross_image_visual = false});
    for (std::size_t i = 0; i < blocked.rows(); ++i) {
        std::size_t k = l.image_of_query(i);
        for (std::size_t j = 0; j < blocked.cols(); ++j) {
            bool want = l.prompt_spans[k].contains(j) || l.visual_spans[k].contains(j);
            CHECK(blocked.allows(i, j) == want);
        }
    }
}

TEST_CASE("text query rows for the joint variant") {
    auto l = make({1, 1}, 1, {2, 2});
    auto vm = build_set_mask(l);
    auto tm = build_text_query_mask(l, vm);
    CHECK(tm.rows() == 3);
    // p_1 row: own prompt, g, all visual; never p_2.
    CHECK(tm.allows(0, 0));
    CHECK_FALSE(tm.allows(0, 1));
    CHECK(tm.allows(0, 2));
    for (std::size_t j = 3; j < 7; ++j) CHECK(tm.allows(0, j));
    // g row: g and visual only.
    CHECK_FALSE(tm.allows(2, 0));
    CHECK_FALSE(tm.allows(2, 1));
    CHECK(tm.allows(2, 2));
}

TEST_CASE("mask dump matches the golden file") {
    auto l = make({3, 3}, 2, {4, 4});
    auto dump = format_mask_dump(l, build_set_mask(l));
    CHECK(dump == read_file(std::string(T2IS_TEST_DATA) + "/golden/mask_n2_p3_g2_v4.txt"));
}
