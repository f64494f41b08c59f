#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "t2is/layout.hpp"
#include "t2is/rng.hpp"
#include "t2is/shapes.hpp"
#include "t2is/tensor.hpp"

namespace t2is {

struct ModelConfig {
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t n_layers = 2;
    std::size_t mlp_hidden = 64;
    std::size_t image_side = 16;
    std::size_t patch_side = 2;
    std::size_t prompt_vocab_size = vocab::size;
    std::size_t max_prompt_len = 4;
    std::size_t max_global_len = 4;
    double rope_base = 100.0;
    // Multiplies every rotary angle; below 1 stretches the wavelengths.
    double rope_scale = 1.0;
    // Visual-to-visual attention logits get -slope_h · distance added, with
    // slope_h = distance_slope / 2^h. Zero disables the bias.
    double distance_slope = 0.0;
    // A visual query that sees v visual keys adds log(v / tokens_per_image)
    // to its text-key logits, keeping the text share of the softmax at its
    // single-image level. No effect when a query sees one image's worth.
    bool balance_text_attention = true;
    // Text tokens also issue queries (and are updated) when set; by default
    // only visual tokens query.
    bool joint_text_queries = false;

    std::size_t head_dim() const { return d_model / n_heads; }  // d_k
    std::size_t patch_dim() const { return patch_side * patch_side * 3; }
    std::size_t tokens_per_side() const { return image_side / patch_side; }
    std::size_t tokens_per_image() const { return tokens_per_side() * tokens_per_side(); }

    // Throws ValidationError.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Integer token position. Visual tokens use their (row, col) in the token
// grid; text tokens live in a reserved negative band, see text_coord().
struct Coord {
    int row = 0;
    int col = 0;
    bool operator==(const Coord&) const = default;
};

// j-th token inside a text span.
inline Coord text_coord(std::size_t j) { return {-1 - static_cast<int>(j), -1 - static_cast<int>(j)}; }

// Rotary 2-D position encoding over one attention head. The first half of the
// head rotates by row angle, the second half by column angle; pair m of a half
// uses frequency base^(-2m / half). The rotation for a token depends only on
// its coordinate.
class PosEnc2D {
public:
    PosEnc2D(std::size_t head_dim, double base, double scale = 1.0);

    std::size_t head_dim() const { return head_dim_; }

    // In place; inverse = true applies the transpose rotation.
    template <typename T>
    void rotate(std::span<T> head, Coord at, bool inverse = false) const;

private:
    std::size_t head_dim_;
    std::vector<double> freqs_;  // per pair inside one half
};

template <typename T>
struct LayerParams {
    BasicTensor<T> w_q;          // d × d, visual queries
    BasicTensor<T> w_q_text;     // d × d, used only with joint_text_queries
    BasicTensor<T> w_k_text;
    BasicTensor<T> w_k_image;
    BasicTensor<T> w_v_text;
    BasicTensor<T> w_v_image;
    BasicTensor<T> w_o;
    BasicTensor<T> mlp_w1;       // d × hidden
    BasicTensor<T> mlp_b1;       // 1 × hidden
    BasicTensor<T> mlp_w2;       // hidden × d
    BasicTensor<T> mlp_b2;       // 1 × d
};

template <typename T>
struct ModelParams {
    ModelConfig config;
    BasicTensor<T> token_embedding;  // vocab × d; row 0 is the null-prompt embedding
    BasicTensor<T> patch_in;         // patch_dim × d
    BasicTensor<T> patch_in_bias;    // 1 × d
    BasicTensor<T> time_w;           // d × d applied to the sinusoidal timestep features
    BasicTensor<T> time_b;           // 1 × d
    std::vector<LayerParams<T>> layers;
    BasicTensor<T> head_w;           // d × patch_dim
    BasicTensor<T> head_b;           // 1 × patch_dim

    static ModelParams initialized(const ModelConfig& config, std::uint64_t seed);
    static ModelParams zeros_like(const ModelParams& other);

    // Visits every tensor in a fixed order with a stable name.
    void for_each(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);
    void for_each(const std::function<void(const std::string&, const BasicTensor<T>&)>& fn) const;

    std::size_t parameter_count() const;
    bool all_finite() const;

    template <typename U>
    ModelParams<U> cast() const;
};

// Everything one forward pass needs. Text ids are in key order
// (p_1 ... p_n, g); coords hold one entry per visual token; sigmas one noise
// level per image.
template <typename T>
struct ForwardInputs {
    const BasicTensor<T>& visual;  // N × patch_dim
    std::span<const int> text_ids;
    const TokenLayout& layout;
    const AttnMask& mask;  // N × key_count
    std::span<const Coord> coords;
    std::span<const T> sigmas;
};

template <typename T>
struct LayerCache {
    BasicTensor<T> h_v_in, h_t_in;
    BasicTensor<T> a_v, a_t;  // layer-normed inputs
    std::vector<BasicTensor<T>> q_rot, k_rot, v_heads, probs;
    BasicTensor<T> attn_out;  // R × d, before w_o
    BasicTensor<T> h_v_mid;
    BasicTensor<T> b_v, z, g;
};

template <typename T>
struct ForwardCache {
    std::vector<LayerCache<T>> layers;
    std::vector<BasicTensor<T>> time_features;  // per image, 1 × d
    BasicTensor<T> h_v_final;
    BasicTensor<T> final_norm;
    std::vector<Coord> query_coords, key_coords;
    BasicTensor<T> query_mask;  // additive, R × key_count
};

// Predicted velocity per visual token (N × patch_dim).
template <typename T>
BasicTensor<T> forward_velocity(const ModelParams<T>& params, const ForwardInputs<T>& in,
                                ForwardCache<T>* cache = nullptr);

// Accumulates d(loss)/d(params) into grads given d(loss)/d(output).
template <typename T>
void backward_velocity(const ModelParams<T>& params, const ForwardInputs<T>& in, const ForwardCache<T>& cache,
                       const BasicTensor<T>& d_out, ModelParams<T>& grads);

// Multi-head masked attention without positional rotation:
// softmax(Q Kᵀ / sqrt(d_k) + M) V per head.
template <typename T>
BasicTensor<T> masked_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                const BasicTensor<T>& additive_mask, std::size_t heads);

// Attention probabilities of one head: softmax(Q Kᵀ / sqrt(d_k) + M).
template <typename T>
BasicTensor<T> attention_probs(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& additive_mask);

// Sinusoidal features of a noise level in [0, 1]; length d.
template <typename T>
BasicTensor<T> timestep_features(T sigma, std::size_t d);

// image (side × side × 3) ↔ visual tokens (tokens × patch_side²·3). Token
// (tr, tc) sits at row tr·(side/patch) + tc; features run (dr, dc, channel).
template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& image, std::size_t patch_side);
template <typename T>
BasicTensor<T> unpatchify(const BasicTensor<T>& tokens, std::size_t image_side, std::size_t patch_side);

// In-image coordinates of tokens_per_side² visual tokens, row major,
// shifted by an offset.
std::vector<Coord> image_token_coords(std::size_t tokens_per_side, Coord offset = {});

// Token ids for a prompt span; empty input becomes the null token.
std::vector<int> prompt_or_null(std::span<const int> tokens);

// ---- Flow-matching training ----------------------------------------------

// How a training sample is presented to the model: which tokens go to the
// image prompt, which to the global prompt, whether the global span is
// attended at all, and where the image sits on the grid.
//
// A view may be a whole grid: the sample fills cell 0 and companions fill the
// remaining cells row major, each with its own prompt. Tokens placed in the
// global prompt hold for every cell.
struct TrainingCompanion {
    ShapeSample sample;
    std::vector<int> prompt;
};

struct TrainingView {
    std::vector<int> prompt;
    std::vector<int> global;
    bool global_attended = true;
    Coord offset;
    std::size_t grid_rows = 1;
    std::size_t grid_cols = 1;
    std::vector<TrainingCompanion> companions;  // grid_rows·grid_cols - 1 entries

    std::size_t cells() const { return grid_rows * grid_cols; }
};

// grid_fraction is the probability of a 1×2, 1×3 or 2×2 grid whose other
// cells are drawn from `pool` (companions agree with every global token).
TrainingView draw_training_view(Rng& rng, const ShapeSample& sample, const ModelConfig& config,
                                std::span<const ShapeSample> pool = {}, double grid_fraction = 0.0);

// Model inputs for a view: text ids, layout, set mask and coordinates.
struct TrainingConditioning {
    std::vector<int> text_ids;
    TokenLayout layout;
    AttnMask mask;
    std::vector<Coord> coords;
    std::size_t cells = 1;
};
TrainingConditioning training_conditioning(const ModelConfig& config, const TrainingView& view);

template <typename T>
using VelocityPredictor =
    std::function<BasicTensor<T>(const BasicTensor<T>& x_sigma, const TrainingConditioning& cond, T sigma)>;

// x_σ = (1-σ)·x0 + σ·ε, target ε - x0, mean squared error over every entry.
// The predictor overload exists so tests can inject an exact velocity.
template <typename T>
T flow_matching_loss_at(const ModelParams<T>& params, const ShapeSample& sample, const TrainingView& view, T sigma,
                        const BasicTensor<T>& noise, ModelParams<T>* grads = nullptr);
template <typename T>
T flow_matching_loss_with(const VelocityPredictor<T>& predict, const BasicTensor<T>& x0,
                          const TrainingConditioning& cond, T sigma, const BasicTensor<T>& noise);

// Clean visual tokens of every cell of a view, cell by cell.
template <typename T>
BasicTensor<T> training_target(const ShapeSample& sample, const TrainingView& view, std::size_t patch_side);

// Draws view, σ ~ U(0, 1) and ε ~ N(0, I) from rng, then evaluates the loss.
template <typename T>
T flow_matching_loss(const ModelParams<T>& params, const ShapeSample& sample, Rng& rng,
                     ModelParams<T>* grads = nullptr, std::span<const ShapeSample> pool = {},
                     double grid_fraction = 0.0);

struct TrainOptions {
    std::size_t steps = 2000;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t batch_size = 8;
    std::size_t log_every = 100;
    // Share of training views that are multi-image grids.
    double grid_fraction = 0.0;
    std::function<void(std::size_t step, double loss)> on_log;
};

// The configuration the CLI trains by default: d_model 48, MLP 96, and half
// of the training views drawn as multi-image grids so the model sees
// joint-attention inputs like the conquer phase produces.
ModelConfig set_model_config();
TrainOptions set_training_options();

struct TrainResult {
    ModelParams<float> params;
    std::vector<double> losses;  // per step, batch mean
};

// Adam over flow_matching_loss. Samples are drawn from the corpus in a
// deterministic order from rng. Throws InvariantError on a non-finite loss.
TrainResult train(const ModelParams<float>& init, std::span<const ShapeSample> corpus, const TrainOptions& options,
                  Rng& rng);

// Mean loss over a fixed set of draws; used to compare checkpoints.
double evaluation_loss(const ModelParams<float>& params, std::span<const ShapeSample> corpus, std::uint64_t seed,
                       std::size_t draws);

}  // namespace t2is
