#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "t2is/layout.hpp"
#include "t2is/model.hpp"

namespace t2is {

// Denoising schedule. The noise level runs linearly from 1 to 0 over
// total_steps Euler steps; the first divide_steps are the per-image phase.
struct Schedule {
    std::size_t total_steps = 20;
    std::size_t divide_steps = 2;
    double guidance_scale = 3.5;

    void validate() const;
    // total_steps + 1 levels, sigmas()[i] = 1 - i / total_steps.
    std::vector<double> sigmas() const;
};

struct GridCell {
    std::size_t row = 0;
    std::size_t col = 0;
    bool operator==(const GridCell&) const = default;
};

struct WindowPlan {
    std::size_t window_size = 4;
    std::size_t stride = 2;
    std::vector<std::vector<std::size_t>> windows;  // image indices per window
};

// Placement of images on a token grid. Cell (r, c) starts at token
// coordinate (r·cell_h, c·cell_w). With a window plan, rows × cols describes
// one window and cells are assigned in window order.
struct GridLayout {
    std::size_t rows = 1;
    std::size_t cols = 1;
    std::size_t cell_h = 0;
    std::size_t cell_w = 0;
    std::vector<GridCell> cells;
    std::optional<WindowPlan> windows;

    Coord offset_of(std::size_t slot) const;
    std::size_t capacity() const { return rows * cols; }
};

// n ∈ {1, 2, 3, 5}: 1×n; n = 4: 2×2; n > 5: sliding windows of 4 (stride 2,
// last start clamped to n - 4), each window laid out 2×2.
GridLayout grid_layout_for(std::size_t n, std::size_t cell_h, std::size_t cell_w);
// Fixed rows × cols grid holding n images in row-major cells.
GridLayout grid_layout_fixed(std::size_t rows, std::size_t cols, std::size_t n, std::size_t cell_h, std::size_t cell_w);
std::vector<std::vector<std::size_t>> sliding_windows(std::size_t n, std::size_t window_size, std::size_t stride);

template <typename T>
struct GridTokens {
    BasicTensor<T> tokens;      // Σ tokens × patch_dim, images in input order
    std::vector<Coord> coords;  // in-cell coordinate + cell offset
};

// latents[i] lands in grid.cells[i]; each latent is cell_h·cell_w tokens.
template <typename T>
GridTokens<T> concat_grid(std::span<const BasicTensor<T>> latents, const GridLayout& grid);
template <typename T>
std::vector<BasicTensor<T>> split_grid(const BasicTensor<T>& tokens, std::size_t n);

// Token ids of a set. An empty global prompt means the set is unconstrained:
// the global span then holds one null token that no query attends.
struct SetPrompts {
    std::vector<std::vector<int>> images;
    std::vector<int> global;
};

enum class PositionMode { grid, local };

struct ConquerOptions {
    MaskOptions mask{};
    PositionMode positions = PositionMode::grid;
};

struct DivideOptions {
    // Also attend the global prompt during the divide phase.
    bool include_global = false;
};

struct WindowTrace {
    std::vector<std::size_t> images;
    std::vector<std::size_t> active;
    std::vector<std::size_t> frozen;
    std::uint64_t frozen_checksum_before = 0;
    std::uint64_t frozen_checksum_after = 0;
    std::size_t steps = 0;
};

struct ConquerTrace {
    std::vector<WindowTrace> windows;
};

template <typename T>
BasicTensor<T> cfg_combine(const BasicTensor<T>& v_uncond, const BasicTensor<T>& v_cond, T scale);

template <typename T>
BasicTensor<T> euler_step(const BasicTensor<T>& x, const BasicTensor<T>& v, T sigma_now, T sigma_next);

// FNV-1a over the raw bytes of every tensor.
template <typename T>
std::uint64_t latent_checksum(std::span<const BasicTensor<T>> latents);

// Per-image seeds derived from one master seed.
std::vector<std::uint64_t> image_seeds(std::uint64_t master, std::size_t n);

template <typename T>
BasicTensor<T> initial_latent(const ModelConfig& config, std::uint64_t seed);

// First divide_steps steps for every image, each bound only to its own prompt.
template <typename T>
std::vector<BasicTensor<T>> divide_phase(const ModelParams<T>& params, const SetPrompts& prompts,
                                         const Schedule& schedule, std::span<const std::uint64_t> seeds,
                                         const DivideOptions& options = {});

// Remaining steps on the concatenated grid under the set mask. Windowed grids
// run windows in order; images finished by an earlier window stay frozen.
template <typename T>
std::vector<BasicTensor<T>> conquer_phase(const ModelParams<T>& params, std::vector<BasicTensor<T>> latents,
                                          const SetPrompts& prompts, const GridLayout& grid, const Schedule& schedule,
                                          const ConquerOptions& options = {}, ConquerTrace* trace = nullptr);

// Plain single-image sampler: every step with the image alone, local
// positions, global prompt not attended.
template <typename T>
BasicTensor<T> sample_single(const ModelParams<T>& params, std::span<const int> prompt, const Schedule& schedule,
                             std::uint64_t seed);

template <typename T>
struct SetResult {
    std::vector<BasicTensor<T>> latents;  // final visual tokens per image
    std::vector<BasicTensor<T>> images;   // side × side × 3, clamped to [0, 1]
};

// divide_phase followed by conquer_phase.
template <typename T>
SetResult<T> generate_set(const ModelParams<T>& params, const SetPrompts& prompts, const Schedule& schedule,
                          std::span<const std::uint64_t> seeds, const GridLayout& grid,
                          const ConquerOptions& options = {}, ConquerTrace* trace = nullptr);

template <typename T>
BasicTensor<T> latent_to_image(const BasicTensor<T>& latent, const ModelConfig& config);

}  // namespace t2is
