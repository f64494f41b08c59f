#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "t2is/setgen.hpp"

namespace t2is {

// "2:20" → divide 2 of 20 steps. Throws ValidationError.
Schedule parse_ratio(const std::string& ratio, double guidance = 3.5);

// Shape-only prompt per image and a shared colour as g, drawn from the seed.
SetPrompts sweep_prompts(std::uint64_t seed, std::size_t n);

struct SweepOptions {
    std::size_t set_size = 4;
    std::size_t seeds = 20;
    std::uint64_t first_seed = 0;
};

struct RatioResult {
    Schedule schedule;
    std::vector<double> distances;  // set_color_distance per seed
    double median = 0.0;
    double mean = 0.0;
};

double median(std::vector<double> values);

// For every seed, one prompt set and one set of image seeds shared by all
// schedules; each schedule generates the set and scores it with the colour
// histogram proxy.
std::vector<RatioResult> ratio_sweep(const ModelParams<float>& params, const std::vector<Schedule>& schedules,
                                     const SweepOptions& options = {});

}  // namespace t2is
