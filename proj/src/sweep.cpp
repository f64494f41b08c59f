#include "t2is/sweep.hpp"

#include <algorithm>
#include <charconv>

#include "t2is/evalkit.hpp"
#include "t2is/shapes.hpp"

namespace t2is {

Schedule parse_ratio(const std::string& ratio, double guidance) {
    const auto colon = ratio.find(':');
    auto number = [&](std::string_view s) {
        std::size_t v = 0;
        const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (s.empty() || ec != std::errc() || end != s.data() + s.size()) {
            throw ValidationError("ratio '" + ratio + "': expected r:t with non-negative integers");
        }
        return v;
    };
    if (colon == std::string::npos) throw ValidationError("ratio '" + ratio + "': expected r:t");
    Schedule s;
    s.divide_steps = number(std::string_view(ratio).substr(0, colon));
    s.total_steps = number(std::string_view(ratio).substr(colon + 1));
    s.guidance_scale = guidance;
    s.validate();
    return s;
}

SetPrompts sweep_prompts(std::uint64_t seed, std::size_t n) {
    Rng rng(1000 + seed);
    SetPrompts p;
    for (std::size_t i = 0; i < n; ++i) p.images.push_back({vocab::shape_token(kAllShapes[rng.below(3)])});
    p.global = {vocab::color_token(kAllColors[rng.below(3)])};
    return p;
}

double median(std::vector<double> v) {
    if (v.empty()) throw ValidationError("median of an empty list");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : (v[m - 1] + v[m]) / 2.0;
}

std::vector<RatioResult> ratio_sweep(const ModelParams<float>& params, const std::vector<Schedule>& schedules,
                                     const SweepOptions& options) {
    if (options.set_size < 2) throw ValidationError("sweep: set size must be at least 2");
    if (options.seeds == 0) throw ValidationError("sweep: need at least one seed");
    const std::size_t side = params.config.tokens_per_side();
    const auto grid = grid_layout_for(options.set_size, side, side);
    std::vector<RatioResult> out;
    for (const auto& s : schedules) out.push_back({s, {}, 0.0, 0.0});
    for (std::size_t k = 0; k < options.seeds; ++k) {
        const std::uint64_t seed = options.first_seed + k;
        const auto prompts = sweep_prompts(seed, options.set_size);
        const auto seeds = image_seeds(seed, options.set_size);
        for (auto& r : out) {
            const auto set = generate_set(params, prompts, r.schedule, seeds, grid);
            r.distances.push_back(set_color_distance(set.images));
        }
    }
    for (auto& r : out) {
        r.median = median(r.distances);
        double sum = 0;
        for (double d : r.distances) sum += d;
        r.mean = sum / static_cast<double>(r.distances.size());
    }
    return out;
}

}  // namespace t2is
