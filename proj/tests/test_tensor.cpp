#include <cmath>
#include <limits>

#include "doctest.h"
#include "t2is/error.hpp"
#include "t2is/rng.hpp"
#include "t2is/tensor.hpp"

using namespace t2is;

namespace {

Tensor64 random_matrix(Rng& rng, std::size_t r, std::size_t c) { return randn<double>(rng, {r, c}); }

}  // namespace

TEST_CASE("matmul identity and small products") {
    auto a = Tensor::from_rows({{1, 2}, {3, 4}});
    auto eye = Tensor::from_rows({{1, 0}, {0, 1}});
    CHECK(matmul(a, eye) == a);

    auto row = Tensor::from_rows({{1, 2}});
    auto col = Tensor::from_rows({{3}, {4}});
    auto p = matmul(row, col);
    CHECK(p.shape() == Shape{1, 1});
    CHECK(p[0] == 11.0f);
}

TEST_CASE("matmul matches a scalar triple loop") {
    Rng rng(7);
    auto a = randn<float>(rng, {5, 7});
    auto b = randn<float>(rng, {7, 3});
    auto c = matmul(a, b);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < 7; ++k) s += double(a.at(i, k)) * double(b.at(k, j));
            CHECK(std::abs(c.at(i, j) - s) <= 1e-6 * std::max(1.0, std::abs(s)));
        }
}

TEST_CASE("matmul rejects mismatched shapes with both shapes in the message") {
    Tensor a({2, 3}), b({2, 3});
    try {
        matmul(a, b);
        FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("A times identity is exact for random A") {
    Rng rng(3);
    auto a = randn<float>(rng, {6, 4});
    Tensor eye({4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1;
    CHECK(matmul(a, eye) == a);
}

TEST_CASE("transposed products agree with explicit transposes") {
    Rng rng(11);
    auto a = random_matrix(rng, 4, 5);
    auto b = random_matrix(rng, 6, 5);
    auto c = random_matrix(rng, 4, 3);
    CHECK(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))) < 1e-12);
    CHECK(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)) < 1e-12);
}

TEST_CASE("softmax rows") {
    SUBCASE("two entries") {
        auto s = softmax_rows(Tensor64::from_rows({{2.0, 0.0}}));
        double e2 = std::exp(2.0);
        CHECK(s[0] == doctest::Approx(e2 / (e2 + 1)).epsilon(1e-12));
        CHECK(s[0] == doctest::Approx(0.8808).epsilon(1e-4));
        CHECK(s[1] == doctest::Approx(0.1192).epsilon(1e-3));
    }
    SUBCASE("constant row is uniform") {
        for (double c : {-50.0, 0.0, 3.25, 700.0}) {
            auto s = softmax_rows(Tensor64::from_rows({{c, c, c}}));
            for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0));
        }
    }
    SUBCASE("masked key gets exactly zero") {
        const double inf = std::numeric_limits<double>::infinity();
        auto x = Tensor64::from_rows({{1, 5}});
        auto m = Tensor64::from_rows({{0, -inf}});
        auto s = softmax_rows(x, &m);
        CHECK(s[0] == 1.0);
        CHECK(s[1] == 0.0);
    }
    SUBCASE("fully masked row is an error, not NaN") {
        const float inf = std::numeric_limits<float>::infinity();
        auto x = Tensor::from_rows({{1, 2}, {3, 4}});
        auto m = Tensor::from_rows({{0, 0}, {-inf, -inf}});
        CHECK_THROWS_WITH_AS(softmax_rows(x, &m), doctest::Contains("degenerate attention row"),
                             DegenerateAttentionError);
    }
}

TEST_CASE("softmax rows sum to one and ignore row shifts") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = randn<float>(rng, {4, 9});
        for (auto& v : x.data()) v *= 10.0f;
        auto s = softmax_rows(x);
        auto shifted = x;
        for (std::size_t j = 0; j < 9; ++j) shifted.at(2, j) += 17.5f;
        auto s2 = softmax_rows(shifted);
        for (std::size_t i = 0; i < 4; ++i) {
            double sum = 0;
            for (float v : s.row(i)) {
                CHECK(v >= 0.0f);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-6);
        }
        for (std::size_t j = 0; j < 9; ++j) CHECK(std::abs(s.at(2, j) - s2.at(2, j)) <= 1e-6);
    }
}

TEST_CASE("kernels are pure and repeatable") {
    Rng rng(9);
    auto a = randn<float>(rng, {3, 4});
    auto b = randn<float>(rng, {4, 2});
    const auto a0 = a, b0 = b;
    auto r1 = matmul(a, b);
    auto r2 = matmul(a, b);
    CHECK(r1 == r2);
    CHECK(a == a0);
    CHECK(b == b0);
    CHECK(softmax_rows(a) == softmax_rows(a));
    CHECK(layer_norm_rows(a, 1e-5f) == layer_norm_rows(a, 1e-5f));
    CHECK(a == a0);
}

TEST_CASE("elementwise kernels") {
    auto a = Tensor::from_rows({{1, 2}, {3, 4}});
    auto b = Tensor::from_rows({{10, 20}, {30, 40}});
    CHECK(add(a, b) == Tensor::from_rows({{11, 22}, {33, 44}}));
    CHECK(sub(b, a) == Tensor::from_rows({{9, 18}, {27, 36}}));
    CHECK(mul(a, b) == Tensor::from_rows({{10, 40}, {90, 160}}));
    CHECK(scale(a, 0.5f) == Tensor::from_rows({{0.5f, 1}, {1.5f, 2}}));
    CHECK(add_row_vector(a, Tensor::from_rows({{1, -1}})) == Tensor::from_rows({{2, 1}, {4, 3}}));
    CHECK(transpose(a) == Tensor::from_rows({{1, 3}, {2, 4}}));
    CHECK_THROWS_AS(add(a, Tensor({2, 3})), DimensionError);
}

TEST_CASE("concat and slice") {
    auto a = Tensor::from_rows({{1, 2}});
    auto b = Tensor::from_rows({{3, 4}, {5, 6}});
    std::vector<Tensor> parts{a, b};
    auto rows = concat<float>(parts, 0);
    CHECK(rows == Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}}));
    CHECK(slice_rows(rows, 1, 3) == b);
    CHECK(slice_rows(rows, 0, 1) == a);
    CHECK_THROWS_AS(slice_rows(rows, 2, 4), DimensionError);

    std::vector<Tensor> side{b, Tensor::from_rows({{7}, {8}})};
    CHECK(concat<float>(side, 1) == Tensor::from_rows({{3, 4, 7}, {5, 6, 8}}));
}

TEST_CASE("layer norm gives zero mean and unit variance") {
    Rng rng(2);
    auto x = randn<double>(rng, {3, 16});
    auto y = layer_norm_rows(x, 0.0);
    for (std::size_t i = 0; i < 3; ++i) {
        double mean = 0, var = 0;
        for (double v : y.row(i)) mean += v;
        mean /= 16;
        for (double v : y.row(i)) var += (v - mean) * (v - mean);
        var /= 16;
        CHECK(std::abs(mean) < 1e-12);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("gelu values and derivative") {
    CHECK(gelu_scalar(0.0) == 0.0);
    CHECK(gelu_scalar(1.0) == doctest::Approx(0.841192).epsilon(1e-5));
    CHECK(gelu_scalar(-1.0) == doctest::Approx(-0.158808).epsilon(1e-5));
    for (double x : {-3.0, -0.7, 0.0, 0.4, 2.5}) {
        const double h = 1e-6;
        double fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2 * h);
        CHECK(gelu_derivative(x) == doctest::Approx(fd).epsilon(1e-7));
    }
}

TEST_CASE("tensor construction invariants") {
    CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor({0, 2}), ValidationError);
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
}
