#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "t2is/layout.hpp"
#include "t2is/model.hpp"
#include "t2is/rng.hpp"
#include "t2is/setgen.hpp"
#include "t2is/shapes.hpp"

namespace t2is::testing {

// Small enough that gradient checks and sampler runs stay fast.
inline ModelConfig tiny_config() {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 2;
    c.mlp_hidden = 24;
    c.image_side = 8;
    c.patch_side = 2;
    return c;
}

// Sampler written against forward_velocity directly: one image, its own
// prompt, global span present but unattended, in-cell coordinates.
template <typename T>
BasicTensor<T> reference_run(const ModelParams<T>& p, const std::vector<int>& prompt, const Schedule& sch,
                             std::uint64_t seed, std::size_t steps) {
    const auto& cfg = p.config;
    Rng rng(seed);
    auto x = randn<T>(rng, {cfg.tokens_per_image(), cfg.patch_dim()});
    std::vector<int> ids = prompt.empty() ? std::vector<int>{0} : prompt;
    std::vector<int> null_ids(1, 0);
    const std::size_t pl[] = {ids.size()}, vl[] = {cfg.tokens_per_image()};
    const std::size_t ul[] = {1};
    auto layout = build_token_layout(pl, 1, vl);
    auto ulayout = build_token_layout(ul, 1, vl);
    ids.push_back(0);
    null_ids.push_back(0);
    auto mask = build_set_mask(layout, {.attend_global = false});
    auto umask = build_set_mask(ulayout, {.attend_global = false});
    auto coords = image_token_coords(cfg.tokens_per_side());
    for (std::size_t s = 0; s < steps; ++s) {
        const T now = T(1.0 - double(s) / sch.total_steps);
        const T next = T(1.0 - double(s + 1) / sch.total_steps);
        const T sig[] = {now};
        auto vc = forward_velocity(p, ForwardInputs<T>{x, ids, layout, mask, coords, sig});
        auto vu = forward_velocity(p, ForwardInputs<T>{x, null_ids, ulayout, umask, coords, sig});
        const T g = T(sch.guidance_scale);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += (next - now) * (vu[i] + g * (vc[i] - vu[i]));
    }
    return x;
}

struct ProbeResult {
    std::string name;
    std::size_t index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel_err = 0;
};

inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Central differences on randomly chosen entries of every parameter tensor,
// `per_tensor` probes each, compared against backward_velocity.
inline std::vector<ProbeResult> gradient_probe(const ModelParams<double>& params, const ShapeSample& sample,
                                               const TrainingView& view, double sigma, const Tensor64& noise,
                                               std::size_t per_tensor, Rng& rng, double h = 1e-4) {
    auto grads = ModelParams<double>::zeros_like(params);
    flow_matching_loss_at(params, sample, view, sigma, noise, &grads);
    std::vector<std::pair<std::string, const Tensor64*>> analytic;
    grads.for_each([&](const std::string& name, const Tensor64& t) { analytic.emplace_back(name, &t); });

    std::vector<ProbeResult> out;
    auto work = params;
    std::size_t slot = 0;
    work.for_each([&](const std::string& name, Tensor64& t) {
        const Tensor64& g = *analytic[slot++].second;
        for (std::size_t p = 0; p < per_tensor; ++p) {
            const std::size_t i = rng.below(t.size());
            const double orig = t[i];
            t[i] = orig + h;
            const double up = flow_matching_loss_at(work, sample, view, sigma, noise);
            t[i] = orig - h;
            const double down = flow_matching_loss_at(work, sample, view, sigma, noise);
            t[i] = orig;
            const double numeric = (up - down) / (2 * h);
            out.push_back({name, i, g[i], numeric, relative_error(g[i], numeric)});
        }
    });
    return out;
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace t2is::testing
