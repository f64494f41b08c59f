#include "t2is/setgen.hpp"

#include <algorithm>
#include <cstring>

#include "t2is/error.hpp"

namespace t2is {

void Schedule::validate() const {
    if (total_steps == 0) throw ValidationError("schedule: total steps must be positive");
    if (divide_steps > total_steps) {
        throw ValidationError("schedule: divide steps " + std::to_string(divide_steps) + " exceed total steps " +
                              std::to_string(total_steps));
    }
    if (!(guidance_scale >= 0.0)) throw ValidationError("schedule: guidance scale must be non-negative");
}

std::vector<double> Schedule::sigmas() const {
    std::vector<double> out(total_steps + 1);
    for (std::size_t i = 0; i <= total_steps; ++i) {
        out[i] = 1.0 - static_cast<double>(i) / static_cast<double>(total_steps);
    }
    return out;
}

// ---- grids -----------------------------------------------------------------

Coord GridLayout::offset_of(std::size_t slot) const {
    const auto& cell = cells.at(slot);
    return {static_cast<int>(cell.row * cell_h), static_cast<int>(cell.col * cell_w)};
}

std::vector<std::vector<std::size_t>> sliding_windows(std::size_t n, std::size_t window_size, std::size_t stride) {
    if (window_size == 0 || stride == 0) throw ValidationError("sliding windows: size and stride must be positive");
    std::vector<std::vector<std::size_t>> out;
    if (n <= window_size) {
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        out.push_back(std::move(all));
        return out;
    }
    std::size_t start = 0;
    while (true) {
        std::vector<std::size_t> w(window_size);
        for (std::size_t i = 0; i < window_size; ++i) w[i] = start + i;
        out.push_back(std::move(w));
        if (start + window_size >= n) break;
        start = std::min(start + stride, n - window_size);
    }
    return out;
}

GridLayout grid_layout_fixed(std::size_t rows, std::size_t cols, std::size_t n, std::size_t cell_h, std::size_t cell_w) {
    if (rows == 0 || cols == 0) throw ValidationError("grid: rows and cols must be positive");
    if (n == 0) throw ValidationError("grid: no images to place");
    if (rows * cols < n) {
        throw ValidationError("grid: " + std::to_string(rows) + "x" + std::to_string(cols) + " cannot hold " +
                              std::to_string(n) + " images");
    }
    GridLayout g;
    g.rows = rows;
    g.cols = cols;
    g.cell_h = cell_h;
    g.cell_w = cell_w;
    for (std::size_t i = 0; i < n; ++i) g.cells.push_back({i / cols, i % cols});
    return g;
}

GridLayout grid_layout_for(std::size_t n, std::size_t cell_h, std::size_t cell_w) {
    if (n == 0) throw ValidationError("grid: no images to place");
    if (n == 4) return grid_layout_fixed(2, 2, 4, cell_h, cell_w);
    if (n <= 5) return grid_layout_fixed(1, n, n, cell_h, cell_w);
    GridLayout g = grid_layout_fixed(2, 2, 4, cell_h, cell_w);
    WindowPlan plan;
    plan.windows = sliding_windows(n, plan.window_size, plan.stride);
    g.windows = std::move(plan);
    return g;
}

template <typename T>
GridTokens<T> concat_grid(std::span<const BasicTensor<T>> latents, const GridLayout& grid) {
    if (latents.empty()) throw ValidationError("concat_grid: no latents");
    if (latents.size() > grid.cells.size()) {
        throw ValidationError("concat_grid: " + std::to_string(latents.size()) + " latents for " +
                              std::to_string(grid.cells.size()) + " cells");
    }
    const std::size_t per_image = grid.cell_h * grid.cell_w;
    GridTokens<T> out;
    for (std::size_t i = 0; i < latents.size(); ++i) {
        if (latents[i].shape() != latents[0].shape()) {
            throw DimensionError("concat_grid: latent " + std::to_string(i) + " is " + shape_str(latents[i].shape()) +
                                 " but latent 0 is " + shape_str(latents[0].shape()));
        }
        if (latents[i].rank() != 2 || latents[i].rows() != per_image) {
            throw DimensionError("concat_grid: latent " + shape_str(latents[i].shape()) + " does not fill a " +
                                 std::to_string(grid.cell_h) + "x" + std::to_string(grid.cell_w) + " cell");
        }
        const Coord off = grid.offset_of(i);
        for (std::size_t r = 0; r < grid.cell_h; ++r)
            for (std::size_t c = 0; c < grid.cell_w; ++c)
                out.coords.push_back({off.row + static_cast<int>(r), off.col + static_cast<int>(c)});
    }
    out.tokens = concat<T>(latents, 0);
    return out;
}

template <typename T>
std::vector<BasicTensor<T>> split_grid(const BasicTensor<T>& tokens, std::size_t n) {
    if (n == 0 || tokens.rank() != 2 || tokens.rows() % n != 0) {
        throw DimensionError("split_grid: cannot split " + shape_str(tokens.shape()) + " into " + std::to_string(n));
    }
    const std::size_t per = tokens.rows() / n;
    std::vector<BasicTensor<T>> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(slice_rows(tokens, i * per, (i + 1) * per));
    return out;
}

// ---- sampling primitives -----------------------------------------------------

template <typename T>
BasicTensor<T> cfg_combine(const BasicTensor<T>& v_uncond, const BasicTensor<T>& v_cond, T scale) {
    if (v_uncond.shape() != v_cond.shape()) {
        throw DimensionError("cfg_combine: " + shape_str(v_uncond.shape()) + " vs " + shape_str(v_cond.shape()));
    }
    BasicTensor<T> out(v_cond.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_uncond[i] + scale * (v_cond[i] - v_uncond[i]);
    return out;
}

template <typename T>
BasicTensor<T> euler_step(const BasicTensor<T>& x, const BasicTensor<T>& v, T sigma_now, T sigma_next) {
    if (x.shape() != v.shape()) throw DimensionError("euler_step: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    const T dt = sigma_next - sigma_now;
    BasicTensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + dt * v[i];
    return out;
}

template <typename T>
std::uint64_t latent_checksum(std::span<const BasicTensor<T>> latents) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : latents) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
        for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

std::vector<std::uint64_t> image_seeds(std::uint64_t master, std::size_t n) {
    std::vector<std::uint64_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = derive_image_seed(master, i);
    return out;
}

template <typename T>
BasicTensor<T> initial_latent(const ModelConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    return randn<T>(rng, {config.tokens_per_image(), config.patch_dim()});
}

namespace {

struct Conditioning {
    std::vector<int> text_ids;
    TokenLayout layout;
    AttnMask mask;
};

Conditioning make_conditioning(const std::vector<const std::vector<int>*>& prompts, const std::vector<int>& global,
                               bool unconditional, const MaskOptions& options, std::size_t tokens_per_image) {
    Conditioning c;
    std::vector<std::size_t> plens, vlens;
    for (const auto* p : prompts) {
        const auto ids = unconditional ? std::vector<int>{vocab::null_token} : prompt_or_null(*p);
        c.text_ids.insert(c.text_ids.end(), ids.begin(), ids.end());
        plens.push_back(ids.size());
        vlens.push_back(tokens_per_image);
    }
    const bool constrained = !global.empty();
    const auto g = (unconditional || !constrained) ? std::vector<int>{vocab::null_token} : global;
    c.text_ids.insert(c.text_ids.end(), g.begin(), g.end());
    c.layout = build_token_layout(plens, g.size(), vlens);
    MaskOptions effective = options;
    effective.attend_global = options.attend_global && constrained;
    c.mask = build_set_mask(c.layout, effective);
    return c;
}

template <typename T>
BasicTensor<T> guided_velocity(const ModelParams<T>& params, const BasicTensor<T>& x, std::span<const Coord> coords,
                               std::span<const T> sigmas, const Conditioning& cond, const Conditioning& uncond,
                               T guidance) {
    ForwardInputs<T> in_c{x, cond.text_ids, cond.layout, cond.mask, coords, sigmas};
    ForwardInputs<T> in_u{x, uncond.text_ids, uncond.layout, uncond.mask, coords, sigmas};
    const auto v_c = forward_velocity(params, in_c);
    const auto v_u = forward_velocity(params, in_u);
    return cfg_combine(v_u, v_c, guidance);
}

// Steps [first, last) of the schedule for one image in isolation.
template <typename T>
BasicTensor<T> denoise_alone(const ModelParams<T>& params, BasicTensor<T> x, const std::vector<int>& prompt,
                             const std::vector<int>& global, const Schedule& schedule, std::size_t first,
                             std::size_t last) {
    const auto& cfg = params.config;
    const auto sig = schedule.sigmas();
    const std::vector<const std::vector<int>*> prompts = {&prompt};
    const auto cond = make_conditioning(prompts, global, false, {}, cfg.tokens_per_image());
    const auto uncond = make_conditioning(prompts, global, true, {}, cfg.tokens_per_image());
    const auto coords = image_token_coords(cfg.tokens_per_side());
    const T guidance = static_cast<T>(schedule.guidance_scale);
    for (std::size_t s = first; s < last; ++s) {
        const T now = static_cast<T>(sig[s]), next = static_cast<T>(sig[s + 1]);
        const T sigmas[] = {now};
        const auto v = guided_velocity<T>(params, x, coords, sigmas, cond, uncond, guidance);
        x = euler_step(x, v, now, next);
    }
    return x;
}

}  // namespace

template <typename T>
std::vector<BasicTensor<T>> divide_phase(const ModelParams<T>& params, const SetPrompts& prompts,
                                         const Schedule& schedule, std::span<const std::uint64_t> seeds,
                                         const DivideOptions& options) {
    schedule.validate();
    if (prompts.images.empty()) throw ValidationError("divide phase: no images");
    if (seeds.size() != prompts.images.size()) throw ValidationError("divide phase: one seed per image required");
    const std::vector<int> no_global;
    const auto& global = options.include_global ? prompts.global : no_global;
    std::vector<BasicTensor<T>> out;
    for (std::size_t i = 0; i < prompts.images.size(); ++i) {
        auto x = initial_latent<T>(params.config, seeds[i]);
        out.push_back(denoise_alone(params, std::move(x), prompts.images[i], global, schedule, 0, schedule.divide_steps));
    }
    return out;
}

template <typename T>
std::vector<BasicTensor<T>> conquer_phase(const ModelParams<T>& params, std::vector<BasicTensor<T>> latents,
                                          const SetPrompts& prompts, const GridLayout& grid, const Schedule& schedule,
                                          const ConquerOptions& options, ConquerTrace* trace) {
    schedule.validate();
    const auto& cfg = params.config;
    const std::size_t n = latents.size();
    if (n == 0) throw ValidationError("conquer phase: no latents");
    if (prompts.images.size() != n) throw ValidationError("conquer phase: one prompt per latent required");
    if (grid.cell_h * grid.cell_w != cfg.tokens_per_image()) {
        throw ValidationError("conquer phase: grid cells do not match the model's token grid");
    }

    std::vector<std::vector<std::size_t>> windows;
    if (grid.windows) {
        windows = grid.windows->windows;
    } else {
        if (n > grid.cells.size()) throw ValidationError("conquer phase: grid has fewer cells than images");
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        windows.push_back(std::move(all));
    }
    for (const auto& w : windows) {
        if (w.size() > grid.cells.size()) throw ValidationError("conquer phase: window larger than the grid");
        for (auto i : w)
            if (i >= n) throw ValidationError("conquer phase: window references a missing image");
    }

    const auto sig = schedule.sigmas();
    const T guidance = static_cast<T>(schedule.guidance_scale);
    std::vector<bool> finalized(n, false);

    for (const auto& window : windows) {
        WindowTrace wt;
        wt.images = window;
        std::vector<bool> active(window.size());
        for (std::size_t slot = 0; slot < window.size(); ++slot) {
            active[slot] = !finalized[window[slot]];
            (active[slot] ? wt.active : wt.frozen).push_back(window[slot]);
        }
        auto frozen_latents = [&] {
            std::vector<BasicTensor<T>> f;
            for (auto i : wt.frozen) f.push_back(latents[i]);
            return f;
        };
        wt.frozen_checksum_before = latent_checksum<T>(frozen_latents());
        if (wt.active.empty()) {
            wt.frozen_checksum_after = wt.frozen_checksum_before;
            if (trace) trace->windows.push_back(std::move(wt));
            continue;
        }

        std::vector<const std::vector<int>*> window_prompts;
        for (auto i : window) window_prompts.push_back(&prompts.images[i]);
        const auto cond = make_conditioning(window_prompts, prompts.global, false, options.mask, cfg.tokens_per_image());
        const auto uncond = make_conditioning(window_prompts, prompts.global, true, options.mask, cfg.tokens_per_image());

        std::vector<Coord> coords;
        for (std::size_t slot = 0; slot < window.size(); ++slot) {
            const Coord off = options.positions == PositionMode::grid ? grid.offset_of(slot) : Coord{};
            const auto c = image_token_coords(cfg.tokens_per_side(), off);
            coords.insert(coords.end(), c.begin(), c.end());
        }

        for (std::size_t s = schedule.divide_steps; s < schedule.total_steps; ++s) {
            const T now = static_cast<T>(sig[s]), next = static_cast<T>(sig[s + 1]);
            std::vector<T> sigmas(window.size());
            std::vector<BasicTensor<T>> parts;
            for (std::size_t slot = 0; slot < window.size(); ++slot) {
                sigmas[slot] = active[slot] ? now : T(0);
                parts.push_back(latents[window[slot]]);
            }
            const auto x = concat<T>(parts, 0);
            const auto v = guided_velocity<T>(params, x, coords, sigmas, cond, uncond, guidance);
            const auto per_image = split_grid(v, window.size());
            for (std::size_t slot = 0; slot < window.size(); ++slot) {
                if (!active[slot]) continue;
                auto& lat = latents[window[slot]];
                lat = euler_step(lat, per_image[slot], now, next);
            }
            ++wt.steps;
        }

        wt.frozen_checksum_after = latent_checksum<T>(frozen_latents());
        if (wt.frozen_checksum_after != wt.frozen_checksum_before) {
            throw InvariantError("conquer phase: a frozen image changed inside a later window");
        }
        for (auto i : wt.active) finalized[i] = true;
        if (trace) trace->windows.push_back(std::move(wt));
    }
    return latents;
}

template <typename T>
BasicTensor<T> sample_single(const ModelParams<T>& params, std::span<const int> prompt, const Schedule& schedule,
                             std::uint64_t seed) {
    schedule.validate();
    const std::vector<int> p(prompt.begin(), prompt.end());
    return denoise_alone(params, initial_latent<T>(params.config, seed), p, {}, schedule, 0, schedule.total_steps);
}

template <typename T>
BasicTensor<T> latent_to_image(const BasicTensor<T>& latent, const ModelConfig& config) {
    auto img = unpatchify(latent, config.image_side, config.patch_side);
    for (auto& v : img.data()) v = std::clamp(v, T(0), T(1));
    return img;
}

template <typename T>
SetResult<T> generate_set(const ModelParams<T>& params, const SetPrompts& prompts, const Schedule& schedule,
                          std::span<const std::uint64_t> seeds, const GridLayout& grid, const ConquerOptions& options,
                          ConquerTrace* trace) {
    auto divided = divide_phase(params, prompts, schedule, seeds);
    SetResult<T> out;
    out.latents = conquer_phase(params, std::move(divided), prompts, grid, schedule, options, trace);
    for (const auto& l : out.latents) out.images.push_back(latent_to_image(l, params.config));
    return out;
}

#define T2IS_SETGEN_INSTANTIATE(T)                                                                                  \
    template GridTokens<T> concat_grid(std::span<const BasicTensor<T>>, const GridLayout&);                         \
    template std::vector<BasicTensor<T>> split_grid(const BasicTensor<T>&, std::size_t);                            \
    template BasicTensor<T> cfg_combine(const BasicTensor<T>&, const BasicTensor<T>&, T);                           \
    template BasicTensor<T> euler_step(const BasicTensor<T>&, const BasicTensor<T>&, T, T);                         \
    template std::uint64_t latent_checksum(std::span<const BasicTensor<T>>);                                        \
    template BasicTensor<T> initial_latent(const ModelConfig&, std::uint64_t);                                      \
    template std::vector<BasicTensor<T>> divide_phase(const ModelParams<T>&, const SetPrompts&, const Schedule&,    \
                                                      std::span<const std::uint64_t>, const DivideOptions&);        \
    template std::vector<BasicTensor<T>> conquer_phase(const ModelParams<T>&, std::vector<BasicTensor<T>>,          \
                                                       const SetPrompts&, const GridLayout&, const Schedule&,       \
                                                       const ConquerOptions&, ConquerTrace*);                       \
    template BasicTensor<T> sample_single(const ModelParams<T>&, std::span<const int>, const Schedule&,             \
                                          std::uint64_t);                                                           \
    template BasicTensor<T> latent_to_image(const BasicTensor<T>&, const ModelConfig&);                             \
    template SetResult<T> generate_set(const ModelParams<T>&, const SetPrompts&, const Schedule&,                   \
                                       std::span<const std::uint64_t>, const GridLayout&, const ConquerOptions&,    \
                                       ConquerTrace*);

T2IS_SETGEN_INSTANTIATE(float)
T2IS_SETGEN_INSTANTIATE(double)

#undef T2IS_SETGEN_INSTANTIATE

}  // namespace t2is
