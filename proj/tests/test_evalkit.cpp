#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "t2is/evalkit.hpp"

using namespace t2is;
using nlohmann::json;

namespace {

json load_json(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in);
    return json::parse(in);
}

ChatResponse yes_no(double yes, double no) {
    return {"Yes", std::vector<TokenLogprob>{{"Yes", yes}, {"No", no}}};
}

// Logprobs whose softmax over {Yes, No} gives exactly p.
ChatResponse with_probability(double p) { return yes_no(std::log(p), std::log1p(-p)); }

ChatResponse text_reply(std::string text) { return {std::move(text), std::nullopt}; }

Tensor flat_image(std::size_t side, float v) {
    return Tensor::full({side, side, 3}, v);
}

std::vector<Tensor> flat_set(std::size_t n, std::size_t side = 4) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(flat_image(side, 0.1f * static_cast<float>(i + 1)));
    return out;
}

std::string last_user_text(const ChatRequest& req) {
    for (auto it = req.messages.rbegin(); it != req.messages.rend(); ++it)
        if (it->role == "user") return it->text;
    return {};
}

}  // namespace

TEST_CASE("sequential pairs") {
    for (std::size_t n : {2u, 4u, 8u}) {
        std::vector<std::pair<std::size_t, std::size_t>> expected;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (j == i + 1) expected.emplace_back(i, j);
        CHECK(sequential_pairs(n) == expected);
        CHECK(sequential_pairs(n).size() == n - 1);
    }
    using P = std::vector<std::pair<std::size_t, std::size_t>>;
    CHECK(sequential_pairs(4) == P{{0, 1}, {1, 2}, {2, 3}});
    CHECK_THROWS_AS(sequential_pairs(1), UndefinedConsistencyError);
    CHECK_THROWS_AS(sequential_pairs(0), ValidationError);
}

TEST_CASE("resize for evaluation") {
    SUBCASE("passthrough at target size") {
        Tensor t({8, 8, 3});
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i % 7) / 7.0f;
        const auto r = resize_for_eval(t, 8);
        CHECK(std::equal(r.data().begin(), r.data().end(), t.data().begin()));
    }
    SUBCASE("constant image stays constant") {
        const auto r = resize_for_eval(flat_image(16, 0.25f));
        CHECK(r.shape() == std::vector<std::size_t>{512, 512, 3});
        for (float v : r.data()) CHECK(v == doctest::Approx(0.25f));
    }
    SUBCASE("checkerboard corners keep their source colours") {
        Tensor t({2, 2, 3});
        for (std::size_t y = 0; y < 2; ++y)
            for (std::size_t x = 0; x < 2; ++x)
                for (std::size_t c = 0; c < 3; ++c) t[(y * 2 + x) * 3 + c] = (x + y) % 2 ? 1.0f : 0.0f;
        const auto r = resize_for_eval(t, 8);
        auto px = [&](std::size_t y, std::size_t x) { return r[(y * 8 + x) * 3]; };
        // Output pixel 0 samples source -0.25, clamped to 0.
        CHECK(px(0, 0) == 0.0f);
        CHECK(px(0, 7) == 1.0f);
        CHECK(px(7, 0) == 1.0f);
        CHECK(px(7, 7) == 0.0f);
        // Output 3 samples source 0.625 on both axes:
        // 0.375·0.375·0 + 2·0.375·0.625·1 + 0.625·0.625·0.
        CHECK(px(3, 3) == doctest::Approx(0.46875));
    }
    SUBCASE("rejects non-images") {
        CHECK_THROWS_AS(resize_for_eval(Tensor({4, 4})), DimensionError);
        CHECK_THROWS_AS(resize_for_eval(Tensor({4, 4, 1})), DimensionError);
    }
}

TEST_CASE("yes probability of a logprob gap of two") {
    CHECK(yes_probability(yes_no(0.0, -2.0)) == doctest::Approx(0.8808).epsilon(1e-4));
    CHECK(yes_probability(yes_no(0.0, -2.0)) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
}

TEST_CASE("holistic reproduces the published averages") {
    const auto rows = load_json(std::string(T2IS_TEST_DATA) + "/golden/model_scores.json");
    REQUIRE(rows.size() == 13);
    for (const auto& row : rows) {
        const auto a = row.at("alignment").get<std::vector<double>>();
        const auto c = row.at("consistency").get<std::vector<double>>();
        const double h = holistic(row.at("aesthetics").get<double>(), {a[0], a[1], a[2]}, {c[0], c[1], c[2]});
        INFO(row.at("model").get<std::string>());
        CHECK(std::abs(h - row.at("avg").get<double>()) <= 5e-4);
    }
    CHECK(holistic(0.520, {0.729, 0.756, 0.743}, {0.359, 0.414, 0.356}) == doctest::Approx(0.515).epsilon(1e-3));
    CHECK(holistic(0.206, {0.780, 0.785, 0.776}, {0.233, 0.287, 0.285}) == doctest::Approx(0.409).epsilon(1e-3));
    CHECK(holistic(0, {0, 0, 0}, {0, 0, 0}) == 0.0);
    CHECK(holistic(1, {1, 1, 1}, {1, 1, 1}) == doctest::Approx(1.0));
}

TEST_CASE("holistic is monotone and range checked") {
    const std::array<double, 3> a{0.5, 0.5, 0.5}, c{0.5, 0.5, 0.5};
    const double base = holistic(0.5, a, c);
    CHECK(holistic(0.6, a, c) > base);
    CHECK(holistic(0.5, {0.6, 0.5, 0.5}, c) > base);
    CHECK(holistic(0.5, a, {0.5, 0.5, 0.6}) > base);
    CHECK_THROWS_AS(holistic(1.2, a, c), ValidationError);
    CHECK_THROWS_AS(holistic(0.5, {-0.1, 0.5, 0.5}, c), ValidationError);
    CHECK_THROWS_AS(holistic(std::nan(""), a, c), ValidationError);
}

TEST_CASE("consistency score is the mean over pairs and criteria") {
    // Pair (0,1) gives 0.8 and 0.6, pair (1,2) gives 0.4 and 0.2.
    const std::vector<Criterion> crit{{Dimension::identity, "Same fox?", {}}, {Dimension::identity, "Same fur?", {}}};
    const double probs[2][2] = {{0.8, 0.6}, {0.4, 0.2}};
    FunctionClient client([&](const ChatRequest& req) {
        const auto text = last_user_text(req);
        const std::size_t pair = text.rfind("Image 1 and image 2", 0) == 0 ? 0 : 1;
        const std::size_t k = text.find("fox") != std::string::npos ? 0 : 1;
        CHECK(req.messages.back().images.size() == 2);
        return with_probability(probs[pair][k]);
    });
    const auto s = consistency_dimension_score(flat_set(3), crit, client);
    CHECK(s.score == doctest::Approx(0.5).epsilon(1e-12));
    REQUIRE(s.cells.size() == 2);
    CHECK(s.cells[0][0] == doctest::Approx(0.8));
    CHECK(s.cells[1][1] == doctest::Approx(0.2));
    CHECK_THROWS_AS(consistency_dimension_score(flat_set(1), crit, client), UndefinedConsistencyError);
}

TEST_CASE("a symmetric judge gives the same score for a reversed set") {
    // The mock answers from the two images' mean brightness only, so
    // reversing the set permutes the pairs but keeps their multiset.
    FunctionClient client([](const ChatRequest& req) {
        const auto& ims = req.messages.back().images;
        auto mean = [](const Rgb8& im) {
            double s = 0;
            for (auto b : im.pixels) s += b;
            return s / static_cast<double>(im.pixels.size()) / 255.0;
        };
        return with_probability(0.1 + 0.8 * std::abs(mean(ims[0]) - mean(ims[1])));
    });
    const std::vector<Criterion> crit{{Dimension::style, "Same style?", {}}, {Dimension::style, "Same palette?", {}}};
    auto images = flat_set(4);
    images[2] = flat_image(4, 0.9f);
    const double forward = consistency_dimension_score(images, crit, client).score;
    std::reverse(images.begin(), images.end());
    CHECK(consistency_dimension_score(images, crit, client).score == doctest::Approx(forward).epsilon(1e-12));
}

TEST_CASE("cell errors name the cell and keep their category") {
    const std::vector<Criterion> crit{{Dimension::identity, "Same fox?", {}}, {Dimension::identity, "Same fur?", {}}};
    FunctionClient no_logprobs([](const ChatRequest&) { return text_reply("Yes"); });
    CHECK_THROWS_AS(consistency_dimension_score(flat_set(2), crit, no_logprobs), CapabilityError);
    FunctionClient no_side([](const ChatRequest&) {
        return ChatResponse{"Yes", std::vector<TokenLogprob>{{"Yes", -0.1}, {"Maybe", -3.0}}};
    });
    try {
        consistency_dimension_score(flat_set(2), crit, no_side);
        FAIL("expected a ScoringError");
    } catch (const ScoringError& e) {
        CHECK(std::string(e.what()).find("identity pair (0,1) criterion 0") != std::string::npos);
    }
    FunctionClient down([](const ChatRequest&) -> ChatResponse { throw ExternalServiceError("503", true, 503); });
    try {
        alignment_score(flat_image(4, 0.5f), 2, {{Dimension::entity, "A fox?", 2}}, down);
        FAIL("expected an ExternalServiceError");
    } catch (const ExternalServiceError& e) {
        CHECK(e.retryable());
        CHECK(std::string(e.what()).find("entity image 2") != std::string::npos);
    }
}

TEST_CASE("criteria generation") {
    SUBCASE("object, bare array and fenced replies") {
        for (std::string reply : {R"({"criteria": ["Same face?", "Same coat?"]})", R"(["Same face?", "Same coat?"])",
                                  "Sure.\n```json\n{\"criteria\": [\"Same face?\", \"Same coat?\"]}\n```"}) {
            FunctionClient c([&](const ChatRequest&) { return text_reply(reply); });
            const auto crit = generate_criteria("two cats", Dimension::identity, c);
            REQUIRE(crit.size() == 2);
            CHECK(crit[1].question == "Same coat?");
            CHECK(crit[1].dimension == Dimension::identity);
        }
    }
    SUBCASE("invalid questions are dropped") {
        FunctionClient c([](const ChatRequest&) {
            return text_reply(R"({"criteria": ["Same face?", "", "The coat matches.", 7, "Same eyes?"]})");
        });
        const auto crit = generate_criteria("two cats", Dimension::identity, c);
        REQUIRE(crit.size() == 2);
        CHECK(crit[0].question == "Same face?");
        CHECK(crit[1].question == "Same eyes?");
    }
    SUBCASE("more than four are cut with a warning") {
        FunctionClient c([](const ChatRequest&) { return text_reply(R"(["A?", "B?", "C?", "D?", "E?", "F?"])"); });
        std::vector<std::string> warnings;
        const auto crit = generate_criteria("x", Dimension::style, c, {}, {},
                                            [&](const std::string& w) { warnings.push_back(w); });
        CHECK(crit.size() == kMaxCriteria);
        CHECK(crit.back().question == "D?");
        CHECK(warnings.size() == 1);
    }
    SUBCASE("one retry, then an error") {
        int calls = 0;
        FunctionClient prose([&](const ChatRequest&) {
            ++calls;
            return text_reply("I would ask whether the cats look alike.");
        });
        CHECK_THROWS_AS(generate_criteria("two cats", Dimension::identity, prose), CriteriaError);
        CHECK(calls == 2);

        calls = 0;
        FunctionClient second_try([&](const ChatRequest& req) {
            ++calls;
            if (calls == 1) return text_reply(R"(["Only one?"])");
            CHECK(req.messages.size() == 4);
            CHECK(req.messages[2].role == "assistant");
            return text_reply(R"(["One?", "Two?", "Three?"])");
        });
        CHECK(generate_criteria("two cats", Dimension::logic, second_try).size() == 3);
    }
    SUBCASE("alignment criteria carry their image") {
        FunctionClient c([](const ChatRequest& req) {
            CHECK(last_user_text(req).find("Dimension: relation") != std::string::npos);
            return text_reply(R"(["A?", "B?"])");
        });
        const auto crit = generate_criteria("a cat on a mat", Dimension::relation, c, {}, 3);
        CHECK(crit[0].image == std::optional<std::size_t>(3));
    }
}

TEST_CASE("dimension names round-trip") {
    for (auto d : {Dimension::identity, Dimension::style, Dimension::logic, Dimension::entity, Dimension::attribute,
                   Dimension::relation})
        CHECK(dimension_from_name(dimension_name(d)) == d);
    CHECK_THROWS_AS(dimension_from_name("mood"), ValidationError);
    CHECK(is_consistency_dimension(Dimension::logic));
    CHECK_FALSE(is_consistency_dimension(Dimension::entity));
}

TEST_CASE("aesthetics") {
    FixtureAesthetics a({0.4, 0.6});
    CHECK(aesthetics_score(flat_set(2), a) == doctest::Approx(0.5));
    CHECK_THROWS_AS(aesthetics_score(flat_set(3), a), ScoringError);
    FixtureAesthetics bad({0.4, 1.5});
    CHECK_THROWS_AS(aesthetics_score(flat_set(2), bad), ScoringError);
    CHECK_THROWS_AS(aesthetics_score({}, a), ValidationError);
}

TEST_CASE("http aesthetics wire format") {
    struct Fake : Transport {
        std::string path, body;
        HttpReply reply{200, R"({"score": 0.75})", ""};
        HttpReply post(const std::string& p, const std::string& b, const std::map<std::string, std::string>&) override {
            path = p;
            body = b;
            return reply;
        }
    };
    auto t = std::make_unique<Fake>();
    auto* fake = t.get();
    EndpointConfig cfg;
    cfg.base_url = "http://judge.local:9000/v1";
    HttpAesthetics scorer(cfg, std::move(t));
    CHECK(scorer.score(flat_image(4, 0.5f), 0) == 0.75);
    CHECK(fake->path == "/v1/score");
    CHECK(json::parse(fake->body).at("image").get<std::string>().rfind("iVBOR", 0) == 0);
    fake->reply = {503, "", "busy"};
    try {
        scorer.score(flat_image(4, 0.5f), 1);
        FAIL("expected an ExternalServiceError");
    } catch (const ExternalServiceError& e) {
        CHECK(e.retryable());
    }
    fake->reply = {200, R"({"value": 1})", ""};
    CHECK_THROWS_AS(scorer.score(flat_image(4, 0.5f), 1), ExternalServiceError);
}

TEST_CASE("report json") {
    const auto r = make_report(0.5, {0.8, 0.7, 0.6}, {0.75, 0.5, 0.6});
    const auto j = report_to_json(r);
    CHECK(j.at("schema_version") == 1);
    CHECK(j.at("consistency").at("style") == 0.5);
    const auto back = report_from_json(j);
    CHECK(back.holistic == r.holistic);
    CHECK(back.alignment == r.alignment);
    auto tampered = j;
    tampered["holistic"] = 0.9;
    CHECK_THROWS_AS(report_from_json(tampered), ValidationError);
    auto missing = j;
    missing.erase("aesthetics");
    CHECK_THROWS_AS(report_from_json(missing), ParseError);
    auto future = j;
    future["schema_version"] = 2;
    CHECK_THROWS_AS(report_from_json(future), ValidationError);
}

TEST_CASE("report table") {
    const auto table = report_table({{"AutoT2IS", make_report(0.520, {0.729, 0.756, 0.743}, {0.359, 0.414, 0.356})}});
    CHECK(table.find("Aesthetics") != std::string::npos);
    CHECK(table.find("0.515") != std::string::npos);
    CHECK(table.find("AutoT2IS | ") == table.find("AutoT2IS"));
}

TEST_CASE("fixture transcript drives the whole evaluation") {
    const auto golden = load_json(std::string(T2IS_SOURCE_DIR) + "/fixtures/fox_set.golden.json");
    FixtureClient client;
    client.load_directory(std::string(T2IS_SOURCE_DIR) + "/fixtures/eval");
    FixtureAesthetics aesthetics(golden.at("aesthetics").get<std::vector<double>>());
    const auto res = evaluate_set(flat_set(3), golden.at("instruction").get<std::string>(),
                                  golden.at("prompts").get<std::vector<std::string>>(), client, aesthetics);
    const auto got = report_to_json(res.report);
    const auto& want = golden.at("expected");
    CHECK(got.at("schema_version") == want.at("schema_version"));
    for (const char* group : {"alignment", "consistency"})
        for (const auto& [k, v] : want.at(group).items())
            CHECK(got.at(group).at(k).get<double>() == doctest::Approx(v.get<double>()).epsilon(1e-12));
    CHECK(got.at("aesthetics").get<double>() == doctest::Approx(want.at("aesthetics").get<double>()).epsilon(1e-12));
    CHECK(got.at("holistic").get<double>() == doctest::Approx(want.at("holistic").get<double>()).epsilon(1e-12));
    CHECK(res.consistency_criteria.size() == 6);
    REQUIRE(res.alignment_criteria.size() == 3);
    CHECK(res.alignment_criteria[2].size() == 6);
    // Criteria: 3 consistency + 3 alignment per image; then 2·2·3 pair
    // cells and 3·2·3 image cells.
    CHECK(client.calls() == 3 + 9 + 12 + 18);
}

TEST_CASE("colour histogram proxy") {
    Tensor im({2, 2, 3});
    CHECK(color_histogram(im).empty());
    CHECK(histogram_distance(color_histogram(im), color_histogram(im)) == 1.0);
    // One red pixel, one green pixel, two below the threshold.
    im[0] = 0.9f;
    im[4] = 0.9f;
    im[6] = 0.2f;
    const auto h = color_histogram(im);
    REQUIRE(h.size() == 64);
    CHECK(h[(3 * 4 + 0) * 4 + 0] == 0.5);
    CHECK(h[(0 * 4 + 3) * 4 + 0] == 0.5);
    Tensor red({2, 2, 3});
    red[0] = 0.9f;
    CHECK(histogram_distance(h, color_histogram(red)) == doctest::Approx(0.5));
    CHECK(histogram_distance(color_histogram(red), color_histogram(red)) == 0.0);
    CHECK(set_color_distance({red, red, im}) == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(set_color_distance({red}), UndefinedConsistencyError);
}
