#include "t2is/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "t2is/error.hpp"

namespace t2is {

void ModelConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || n_layers == 0 || mlp_hidden == 0) {
        throw ValidationError("model config: dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw ValidationError("model config: d_model must be divisible by n_heads");
    if (head_dim() % 4 != 0) throw ValidationError("model config: head dim must be divisible by 4 for 2-D rotary encoding");
    if (d_model % 2 != 0) throw ValidationError("model config: d_model must be even");
    if (patch_side == 0 || image_side == 0 || image_side % patch_side != 0) {
        throw ValidationError("model config: image_side must be a positive multiple of patch_side");
    }
    if (prompt_vocab_size < static_cast<std::size_t>(vocab::size)) {
        throw ValidationError("model config: prompt vocabulary smaller than the toy vocabulary");
    }
    if (max_prompt_len == 0 || max_global_len == 0) throw ValidationError("model config: prompt lengths must be positive");
    if (!(rope_base > 1.0)) throw ValidationError("model config: rope_base must exceed 1");
    if (!(rope_scale > 0.0)) throw ValidationError("model config: rope_scale must be positive");
    if (!(distance_slope >= 0.0)) throw ValidationError("model config: distance_slope must be non-negative");
}

// ---- positional encoding -------------------------------------------------

PosEnc2D::PosEnc2D(std::size_t head_dim, double base, double scale) : head_dim_(head_dim) {
    if (head_dim % 4 != 0) throw ValidationError("PosEnc2D: head dim must be divisible by 4");
    const std::size_t half = head_dim / 2;
    for (std::size_t m = 0; m < half / 2; ++m) {
        freqs_.push_back(scale * std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(half)));
    }
}

template <typename T>
void PosEnc2D::rotate(std::span<T> head, Coord at, bool inverse) const {
    if (head.size() != head_dim_) throw DimensionError("PosEnc2D: head width mismatch");
    const std::size_t half = head_dim_ / 2;
    const double sign = inverse ? -1.0 : 1.0;
    for (std::size_t axis = 0; axis < 2; ++axis) {
        const double pos = axis == 0 ? at.row : at.col;
        for (std::size_t m = 0; m < freqs_.size(); ++m) {
            const double angle = sign * pos * freqs_[m];
            const T c = static_cast<T>(std::cos(angle));
            const T s = static_cast<T>(std::sin(angle));
            T& x0 = head[axis * half + 2 * m];
            T& x1 = head[axis * half + 2 * m + 1];
            const T a = x0, b = x1;
            x0 = a * c - b * s;
            x1 = a * s + b * c;
        }
    }
}

template void PosEnc2D::rotate<float>(std::span<float>, Coord, bool) const;
template void PosEnc2D::rotate<double>(std::span<double>, Coord, bool) const;

// ---- parameters ----------------------------------------------------------

namespace {

template <typename P, typename F>
void visit_members(P& p, F&& f) {
    f(std::string("token_embedding"), p.token_embedding);
    f(std::string("patch_in"), p.patch_in);
    f(std::string("patch_in_bias"), p.patch_in_bias);
    f(std::string("time_w"), p.time_w);
    f(std::string("time_b"), p.time_b);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& L = p.layers[l];
        const std::string pre = "layers." + std::to_string(l) + ".";
        f(pre + "w_q", L.w_q);
        f(pre + "w_q_text", L.w_q_text);
        f(pre + "w_k_text", L.w_k_text);
        f(pre + "w_k_image", L.w_k_image);
        f(pre + "w_v_text", L.w_v_text);
        f(pre + "w_v_image", L.w_v_image);
        f(pre + "w_o", L.w_o);
        f(pre + "mlp_w1", L.mlp_w1);
        f(pre + "mlp_b1", L.mlp_b1);
        f(pre + "mlp_w2", L.mlp_w2);
        f(pre + "mlp_b2", L.mlp_b2);
    }
    f(std::string("head_w"), p.head_w);
    f(std::string("head_b"), p.head_b);
}

template <typename T>
BasicTensor<T> gaussian(Rng& rng, Shape shape, double stddev) {
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal() * stddev);
    return t;
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::initialized(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed, 0x1A17);
    const std::size_t d = config.d_model, P = config.patch_dim(), H = config.mlp_hidden;
    const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));
    ModelParams p;
    p.config = config;
    p.token_embedding = gaussian<T>(rng, {config.prompt_vocab_size, d}, 1.0);
    p.patch_in = gaussian<T>(rng, {P, d}, 1.0 / std::sqrt(static_cast<double>(P)));
    p.patch_in_bias = BasicTensor<T>::zeros({1, d});
    p.time_w = gaussian<T>(rng, {d, d}, inv_d);
    p.time_b = BasicTensor<T>::zeros({1, d});
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerParams<T> L;
        L.w_q = gaussian<T>(rng, {d, d}, inv_d);
        L.w_q_text = gaussian<T>(rng, {d, d}, inv_d);
        L.w_k_text = gaussian<T>(rng, {d, d}, inv_d);
        L.w_k_image = gaussian<T>(rng, {d, d}, inv_d);
        L.w_v_text = gaussian<T>(rng, {d, d}, inv_d);
        L.w_v_image = gaussian<T>(rng, {d, d}, inv_d);
        L.w_o = gaussian<T>(rng, {d, d}, 0.5 * inv_d);
        L.mlp_w1 = gaussian<T>(rng, {d, H}, inv_d);
        L.mlp_b1 = BasicTensor<T>::zeros({1, H});
        L.mlp_w2 = gaussian<T>(rng, {H, d}, 0.5 / std::sqrt(static_cast<double>(H)));
        L.mlp_b2 = BasicTensor<T>::zeros({1, d});
        p.layers.push_back(std::move(L));
    }
    p.head_w = gaussian<T>(rng, {d, P}, 0.5 * inv_d);
    p.head_b = BasicTensor<T>::zeros({1, P});
    return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros_like(const ModelParams& other) {
    ModelParams p = other;
    visit_members(p, [](const std::string&, BasicTensor<T>& t) {
        for (auto& v : t.data()) v = T(0);
    });
    return p;
}

template <typename T>
void ModelParams<T>::for_each(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
    visit_members(*this, fn);
}

template <typename T>
void ModelParams<T>::for_each(const std::function<void(const std::string&, const BasicTensor<T>&)>& fn) const {
    visit_members(*this, fn);
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const BasicTensor<T>& t) { n += t.size(); });
    return n;
}

template <typename T>
bool ModelParams<T>::all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, const BasicTensor<T>& t) { ok = ok && t2is::all_finite(t); });
    return ok;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
    ModelParams<U> out;
    out.config = config;
    out.layers.resize(layers.size());
    std::vector<BasicTensor<U>*> dst;
    visit_members(out, [&](const std::string&, BasicTensor<U>& t) { dst.push_back(&t); });
    std::size_t i = 0;
    visit_members(*this, [&](const std::string&, const BasicTensor<T>& t) { *dst[i++] = t.template cast<U>(); });
    return out;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

// ---- helpers -------------------------------------------------------------

namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename T>
BasicTensor<T> head_cols(const BasicTensor<T>& x, std::size_t h, std::size_t dh) {
    BasicTensor<T> out({x.rows(), dh});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < dh; ++j) out.at(i, j) = x.at(i, h * dh + j);
    return out;
}

template <typename T>
void put_head_cols(BasicTensor<T>& dst, const BasicTensor<T>& src, std::size_t h) {
    const std::size_t dh = src.cols();
    for (std::size_t i = 0; i < src.rows(); ++i)
        for (std::size_t j = 0; j < dh; ++j) dst.at(i, h * dh + j) = src.at(i, j);
}

template <typename T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void add_rows_into(BasicTensor<T>& dst, const BasicTensor<T>& src, std::size_t src_begin) {
    for (std::size_t i = 0; i < dst.rows(); ++i) {
        auto d = dst.row(i);
        auto s = src.row(src_begin + i);
        for (std::size_t j = 0; j < d.size(); ++j) d[j] += s[j];
    }
}

template <typename T>
void add_col_sums(BasicTensor<T>& bias_grad, const BasicTensor<T>& x) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) bias_grad[j] += r[j];
    }
}

template <typename T>
BasicTensor<T> stack_rows(const BasicTensor<T>& top, const BasicTensor<T>& bottom) {
    const BasicTensor<T> parts[] = {top, bottom};
    return concat<T>(parts, 0);
}

template <typename T>
BasicTensor<T> layer_norm_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
    BasicTensor<T> dx({x.rows(), x.cols()});
    const T n = static_cast<T>(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        auto g = dy.row(i);
        T mean = 0;
        for (auto v : r) mean += v;
        mean /= n;
        T var = 0;
        for (auto v : r) var += (v - mean) * (v - mean);
        var /= n;
        const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        T mg = 0, mgy = 0;
        for (std::size_t j = 0; j < r.size(); ++j) {
            const T y = (r[j] - mean) * inv;
            mg += g[j];
            mgy += g[j] * y;
        }
        mg /= n;
        mgy /= n;
        auto o = dx.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) {
            const T y = (r[j] - mean) * inv;
            o[j] = inv * (g[j] - mg - y * mgy);
        }
    }
    return dx;
}

template <typename T>
void rotate_rows(const PosEnc2D& pe, BasicTensor<T>& x, std::span<const Coord> coords, bool inverse) {
    for (std::size_t i = 0; i < x.rows(); ++i) pe.rotate<T>(x.row(i), coords[i], inverse);
}

template <typename T>
void check_inputs(const ModelParams<T>& params, const ForwardInputs<T>& in) {
    const auto& cfg = params.config;
    const auto& layout = in.layout;
    if (in.visual.rank() != 2 || in.visual.cols() != cfg.patch_dim()) {
        throw DimensionError("forward: visual tokens " + shape_str(in.visual.shape()) + " do not have width " +
                             std::to_string(cfg.patch_dim()));
    }
    if (in.visual.rows() != layout.visual_tokens()) {
        throw DimensionError("forward: " + std::to_string(in.visual.rows()) + " visual tokens but layout holds " +
                             std::to_string(layout.visual_tokens()));
    }
    if (in.text_ids.size() != layout.text_tokens()) {
        throw DimensionError("forward: " + std::to_string(in.text_ids.size()) + " text tokens but layout holds " +
                             std::to_string(layout.text_tokens()));
    }
    if (in.mask.rows() != layout.visual_tokens() || in.mask.cols() != layout.key_count()) {
        throw DimensionError("forward: mask is " + std::to_string(in.mask.rows()) + "x" +
                             std::to_string(in.mask.cols()) + ", expected " + std::to_string(layout.visual_tokens()) +
                             "x" + std::to_string(layout.key_count()));
    }
    if (in.coords.size() != layout.visual_tokens()) throw DimensionError("forward: one coordinate per visual token required");
    if (in.sigmas.size() != layout.n) throw DimensionError("forward: one noise level per image required");
    for (auto id : in.text_ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.prompt_vocab_size) {
            throw ValidationError("forward: token id " + std::to_string(id) + " outside vocabulary");
        }
    }
    for (const auto& s : layout.prompt_spans) {
        if (s.size() > cfg.max_prompt_len) throw ValidationError("forward: prompt longer than max_prompt_len");
    }
    if (layout.global_tokens() > cfg.max_global_len) throw ValidationError("forward: global prompt longer than max_global_len");
}

std::vector<Coord> key_coords_for(const TokenLayout& layout, std::span<const Coord> visual) {
    std::vector<Coord> out;
    out.reserve(layout.key_count());
    for (const auto& s : layout.prompt_spans)
        for (std::size_t j = 0; j < s.size(); ++j) out.push_back(text_coord(j));
    for (std::size_t j = 0; j < layout.global_span.size(); ++j) out.push_back(text_coord(j));
    out.insert(out.end(), visual.begin(), visual.end());
    return out;
}

// Additive mask plus the per-head distance bias between visual tokens.
template <typename T>
BasicTensor<T> distance_biased(const BasicTensor<T>& mask, std::span<const Coord> query_coords,
                               std::span<const Coord> key_coords, std::size_t first_visual_query,
                               std::size_t first_visual_key, double slope) {
    BasicTensor<T> out = mask;
    for (std::size_t i = first_visual_query; i < query_coords.size(); ++i) {
        auto row = out.row(i);
        for (std::size_t j = first_visual_key; j < key_coords.size(); ++j) {
            const double dr = static_cast<double>(query_coords[i].row - key_coords[j].row);
            const double dc = static_cast<double>(query_coords[i].col - key_coords[j].col);
            row[j] -= static_cast<T>(slope * std::sqrt(dr * dr + dc * dc));
        }
    }
    return out;
}

template <typename T>
void balance_text_columns(BasicTensor<T>& mask, std::size_t first_visual_query, std::size_t n_text,
                          std::size_t tokens_per_image) {
    for (std::size_t i = first_visual_query; i < mask.rows(); ++i) {
        auto row = mask.row(i);
        std::size_t visible = 0;
        for (std::size_t j = n_text; j < row.size(); ++j)
            if (std::isfinite(row[j])) ++visible;
        if (visible <= tokens_per_image) continue;
        const T shift = static_cast<T>(std::log(static_cast<double>(visible) / static_cast<double>(tokens_per_image)));
        for (std::size_t j = 0; j < n_text; ++j)
            if (std::isfinite(row[j])) row[j] += shift;
    }
}

}  // namespace

template <typename T>
BasicTensor<T> timestep_features(T sigma, std::size_t d) {
    BasicTensor<T> f({1, d});
    const std::size_t half = d / 2;
    for (std::size_t m = 0; m < half; ++m) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(m) / static_cast<double>(half));
        const double arg = 1000.0 * static_cast<double>(sigma) * freq;
        f[m] = static_cast<T>(std::sin(arg));
        f[half + m] = static_cast<T>(std::cos(arg));
    }
    return f;
}

template <typename T>
BasicTensor<T> attention_probs(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& additive_mask) {
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(q.cols()));
    BasicTensor<T> scores = matmul_nt(q, k);
    for (auto& v : scores.data()) v *= inv_sqrt;
    return softmax_rows(scores, &additive_mask);
}

template <typename T>
BasicTensor<T> masked_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                const BasicTensor<T>& additive_mask, std::size_t heads) {
    if (heads == 0 || q.cols() % heads != 0 || k.cols() != q.cols() || v.cols() != q.cols() || k.rows() != v.rows()) {
        throw DimensionError("masked_attention: incompatible shapes " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    const std::size_t dh = q.cols() / heads;
    BasicTensor<T> out({q.rows(), q.cols()});
    for (std::size_t h = 0; h < heads; ++h) {
        const auto probs = attention_probs(head_cols(q, h, dh), head_cols(k, h, dh), additive_mask);
        put_head_cols(out, matmul(probs, head_cols(v, h, dh)), h);
    }
    return out;
}

template <typename T>
BasicTensor<T> forward_velocity(const ModelParams<T>& params, const ForwardInputs<T>& in, ForwardCache<T>* cache) {
    check_inputs(params, in);
    const auto& cfg = params.config;
    const auto& layout = in.layout;
    const std::size_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const std::size_t n_text = layout.text_tokens();
    const bool joint = cfg.joint_text_queries;
    const PosEnc2D pe(dh, cfg.rope_base, cfg.rope_scale);
    const T eps = static_cast<T>(kLayerNormEps);

    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    c.layers.clear();
    c.time_features.clear();
    c.key_coords = key_coords_for(layout, in.coords);

    if (joint) {
        c.query_coords = c.key_coords;
        const AttnMask text_mask = build_text_query_mask(layout, in.mask);
        c.query_mask = stack_rows(text_mask.template additive<T>(), in.mask.template additive<T>());
    } else {
        c.query_coords.assign(in.coords.begin(), in.coords.end());
        c.query_mask = in.mask.template additive<T>();
    }
    if (cfg.balance_text_attention) balance_text_columns(c.query_mask, joint ? n_text : 0, n_text, cfg.tokens_per_image());
    std::vector<BasicTensor<T>> head_masks;
    if (cfg.distance_slope > 0.0) {
        for (std::size_t h = 0; h < H; ++h) {
            head_masks.push_back(distance_biased(c.query_mask, c.query_coords, c.key_coords, joint ? n_text : 0,
                                                 n_text, cfg.distance_slope / static_cast<double>(1u << h)));
        }
    }

    BasicTensor<T> h_v = add_row_vector(matmul(in.visual, params.patch_in), params.patch_in_bias);
    for (std::size_t k = 0; k < layout.n; ++k) {
        auto tf = timestep_features(in.sigmas[k], d);
        const auto e = add(matmul(tf, params.time_w), params.time_b);
        const Span rows = layout.query_span(k);
        for (std::size_t i = rows.begin; i < rows.end; ++i) {
            auto r = h_v.row(i);
            for (std::size_t j = 0; j < d; ++j) r[j] += e[j];
        }
        c.time_features.push_back(std::move(tf));
    }

    BasicTensor<T> h_t({n_text, d});
    for (std::size_t i = 0; i < n_text; ++i) {
        const auto src = params.token_embedding.row(static_cast<std::size_t>(in.text_ids[i]));
        std::copy(src.begin(), src.end(), h_t.row(i).begin());
    }

    for (const auto& L : params.layers) {
        LayerCache<T> lc;
        lc.h_v_in = h_v;
        lc.h_t_in = h_t;
        lc.a_v = layer_norm_rows(h_v, eps);
        lc.a_t = layer_norm_rows(h_t, eps);

        const BasicTensor<T> q = joint ? stack_rows(matmul(lc.a_t, L.w_q_text), matmul(lc.a_v, L.w_q))
                                       : matmul(lc.a_v, L.w_q);
        const BasicTensor<T> k = stack_rows(matmul(lc.a_t, L.w_k_text), matmul(lc.a_v, L.w_k_image));
        const BasicTensor<T> v = stack_rows(matmul(lc.a_t, L.w_v_text), matmul(lc.a_v, L.w_v_image));

        lc.attn_out = BasicTensor<T>({q.rows(), d});
        for (std::size_t h = 0; h < H; ++h) {
            auto qh = head_cols(q, h, dh);
            auto kh = head_cols(k, h, dh);
            rotate_rows<T>(pe, qh, c.query_coords, false);
            rotate_rows<T>(pe, kh, c.key_coords, false);
            auto vh = head_cols(v, h, dh);
            auto probs = attention_probs(qh, kh, head_masks.empty() ? c.query_mask : head_masks[h]);
            put_head_cols(lc.attn_out, matmul(probs, vh), h);
            lc.q_rot.push_back(std::move(qh));
            lc.k_rot.push_back(std::move(kh));
            lc.v_heads.push_back(std::move(vh));
            lc.probs.push_back(std::move(probs));
        }
        const BasicTensor<T> u = matmul(lc.attn_out, L.w_o);
        if (joint) {
            h_t = add(h_t, slice_rows(u, 0, n_text));
            h_v = add(h_v, slice_rows(u, n_text, u.rows()));
        } else {
            h_v = add(h_v, u);
        }

        lc.h_v_mid = h_v;
        lc.b_v = layer_norm_rows(h_v, eps);
        lc.z = add_row_vector(matmul(lc.b_v, L.mlp_w1), L.mlp_b1);
        lc.g = gelu(lc.z);
        h_v = add(h_v, add_row_vector(matmul(lc.g, L.mlp_w2), L.mlp_b2));
        c.layers.push_back(std::move(lc));
    }

    c.h_v_final = h_v;
    c.final_norm = layer_norm_rows(h_v, eps);
    auto out = add_row_vector(matmul(c.final_norm, params.head_w), params.head_b);
    if (!all_finite(out)) throw InvariantError("forward: non-finite velocity");
    return out;
}

template <typename T>
void backward_velocity(const ModelParams<T>& params, const ForwardInputs<T>& in, const ForwardCache<T>& c,
                       const BasicTensor<T>& d_out, ModelParams<T>& grads) {
    const auto& cfg = params.config;
    const auto& layout = in.layout;
    const std::size_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const std::size_t n_text = layout.text_tokens();
    const bool joint = cfg.joint_text_queries;
    const PosEnc2D pe(dh, cfg.rope_base, cfg.rope_scale);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

    add_into(grads.head_w, matmul_tn(c.final_norm, d_out));
    add_col_sums(grads.head_b, d_out);
    BasicTensor<T> dh_v = layer_norm_backward(c.h_v_final, matmul_nt(d_out, params.head_w));
    BasicTensor<T> dh_t({n_text, d});

    for (std::size_t li = params.layers.size(); li-- > 0;) {
        const auto& L = params.layers[li];
        const auto& lc = c.layers[li];
        auto& G = grads.layers[li];

        // MLP residual branch.
        add_into(G.mlp_w2, matmul_tn(lc.g, dh_v));
        add_col_sums(G.mlp_b2, dh_v);
        BasicTensor<T> dz = matmul_nt(dh_v, L.mlp_w2);
        for (std::size_t i = 0; i < dz.size(); ++i) dz[i] *= gelu_derivative(lc.z[i]);
        add_into(G.mlp_w1, matmul_tn(lc.b_v, dz));
        add_col_sums(G.mlp_b1, dz);
        dh_v = add(dh_v, layer_norm_backward(lc.h_v_mid, matmul_nt(dz, L.mlp_w1)));

        // Attention residual branch.
        const BasicTensor<T> du = joint ? stack_rows(dh_t, dh_v) : dh_v;
        add_into(G.w_o, matmul_tn(lc.attn_out, du));
        const BasicTensor<T> d_attn = matmul_nt(du, L.w_o);

        const std::size_t R = d_attn.rows(), K = layout.key_count();
        BasicTensor<T> dq({R, d}), dk({K, d}), dv({K, d});
        for (std::size_t h = 0; h < H; ++h) {
            const auto& P = lc.probs[h];
            const auto doh = head_cols(d_attn, h, dh);
            const auto dP = matmul_nt(doh, lc.v_heads[h]);
            put_head_cols(dv, matmul_tn(P, doh), h);
            BasicTensor<T> dS({R, K});
            for (std::size_t i = 0; i < R; ++i) {
                auto pr = P.row(i);
                auto gr = dP.row(i);
                T dot = 0;
                for (std::size_t j = 0; j < K; ++j) dot += pr[j] * gr[j];
                auto sr = dS.row(i);
                for (std::size_t j = 0; j < K; ++j) sr[j] = pr[j] * (gr[j] - dot) * inv_sqrt;
            }
            auto dqh = matmul(dS, lc.k_rot[h]);
            auto dkh = matmul_tn(dS, lc.q_rot[h]);
            rotate_rows<T>(pe, dqh, c.query_coords, true);
            rotate_rows<T>(pe, dkh, c.key_coords, true);
            put_head_cols(dq, dqh, h);
            put_head_cols(dk, dkh, h);
        }

        const auto dk_t = slice_rows(dk, 0, n_text), dk_v = slice_rows(dk, n_text, K);
        const auto dv_t = slice_rows(dv, 0, n_text), dv_v = slice_rows(dv, n_text, K);
        BasicTensor<T> da_v({layout.visual_tokens(), d});
        BasicTensor<T> da_t({n_text, d});
        if (joint) {
            const auto dq_t = slice_rows(dq, 0, n_text), dq_v = slice_rows(dq, n_text, R);
            add_into(G.w_q_text, matmul_tn(lc.a_t, dq_t));
            add_into(da_t, matmul_nt(dq_t, L.w_q_text));
            add_into(G.w_q, matmul_tn(lc.a_v, dq_v));
            add_into(da_v, matmul_nt(dq_v, L.w_q));
        } else {
            add_into(G.w_q, matmul_tn(lc.a_v, dq));
            add_into(da_v, matmul_nt(dq, L.w_q));
        }
        add_into(G.w_k_text, matmul_tn(lc.a_t, dk_t));
        add_into(da_t, matmul_nt(dk_t, L.w_k_text));
        add_into(G.w_k_image, matmul_tn(lc.a_v, dk_v));
        add_into(da_v, matmul_nt(dk_v, L.w_k_image));
        add_into(G.w_v_text, matmul_tn(lc.a_t, dv_t));
        add_into(da_t, matmul_nt(dv_t, L.w_v_text));
        add_into(G.w_v_image, matmul_tn(lc.a_v, dv_v));
        add_into(da_v, matmul_nt(dv_v, L.w_v_image));

        dh_v = add(dh_v, layer_norm_backward(lc.h_v_in, da_v));
        dh_t = add(dh_t, layer_norm_backward(lc.h_t_in, da_t));
    }

    for (std::size_t i = 0; i < n_text; ++i) {
        auto dst = grads.token_embedding.row(static_cast<std::size_t>(in.text_ids[i]));
        auto src = dh_t.row(i);
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    add_into(grads.patch_in, matmul_tn(in.visual, dh_v));
    add_col_sums(grads.patch_in_bias, dh_v);
    for (std::size_t k = 0; k < layout.n; ++k) {
        const Span rows = layout.query_span(k);
        BasicTensor<T> de({1, d});
        for (std::size_t i = rows.begin; i < rows.end; ++i) {
            auto r = dh_v.row(i);
            for (std::size_t j = 0; j < d; ++j) de[j] += r[j];
        }
        add_into(grads.time_w, matmul_tn(c.time_features[k], de));
        add_into(grads.time_b, de);
    }
}

// ---- patches ---------------------------------------------------------------

template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& image, std::size_t patch_side) {
    if (image.rank() != 3 || image.dim(2) != 3 || image.dim(0) != image.dim(1)) {
        throw DimensionError("patchify: expected square side×side×3 image, got " + shape_str(image.shape()));
    }
    const std::size_t side = image.dim(0);
    if (patch_side == 0 || side % patch_side != 0) throw DimensionError("patchify: side not divisible by patch");
    const std::size_t tps = side / patch_side, pd = patch_side * patch_side * 3;
    BasicTensor<T> out({tps * tps, pd});
    for (std::size_t tr = 0; tr < tps; ++tr)
        for (std::size_t tc = 0; tc < tps; ++tc)
            for (std::size_t dr = 0; dr < patch_side; ++dr)
                for (std::size_t dc = 0; dc < patch_side; ++dc)
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        const std::size_t r = tr * patch_side + dr, cc = tc * patch_side + dc;
                        out.at(tr * tps + tc, (dr * patch_side + dc) * 3 + ch) = image[(r * side + cc) * 3 + ch];
                    }
    return out;
}

template <typename T>
BasicTensor<T> unpatchify(const BasicTensor<T>& tokens, std::size_t image_side, std::size_t patch_side) {
    if (patch_side == 0 || image_side % patch_side != 0) throw DimensionError("unpatchify: side not divisible by patch");
    const std::size_t tps = image_side / patch_side, pd = patch_side * patch_side * 3;
    if (tokens.rank() != 2 || tokens.rows() != tps * tps || tokens.cols() != pd) {
        throw DimensionError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not form a " +
                             std::to_string(image_side) + "-pixel image");
    }
    BasicTensor<T> image({image_side, image_side, 3});
    for (std::size_t tr = 0; tr < tps; ++tr)
        for (std::size_t tc = 0; tc < tps; ++tc)
            for (std::size_t dr = 0; dr < patch_side; ++dr)
                for (std::size_t dc = 0; dc < patch_side; ++dc)
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        const std::size_t r = tr * patch_side + dr, cc = tc * patch_side + dc;
                        image[(r * image_side + cc) * 3 + ch] = tokens.at(tr * tps + tc, (dr * patch_side + dc) * 3 + ch);
                    }
    return image;
}

std::vector<Coord> image_token_coords(std::size_t tokens_per_side, Coord offset) {
    std::vector<Coord> out;
    out.reserve(tokens_per_side * tokens_per_side);
    for (std::size_t r = 0; r < tokens_per_side; ++r)
        for (std::size_t c = 0; c < tokens_per_side; ++c)
            out.push_back({offset.row + static_cast<int>(r), offset.col + static_cast<int>(c)});
    return out;
}

std::vector<int> prompt_or_null(std::span<const int> tokens) {
    if (tokens.empty()) return {vocab::null_token};
    return {tokens.begin(), tokens.end()};
}

// ---- training --------------------------------------------------------------

TrainingView draw_training_view(Rng& rng, const ShapeSample& sample, const ModelConfig& config,
                                std::span<const ShapeSample> pool, double grid_fraction) {
    TrainingView view;
    const int tps = static_cast<int>(config.tokens_per_side());
    // Cell offsets seen by 1×n (n ≤ 5) and 2×2 grids.
    view.offset = {static_cast<int>(rng.below(2)) * tps, static_cast<int>(rng.below(5)) * tps};
    if (rng.uniform() < 0.1) {
        view.global_attended = rng.uniform() < 0.5;
    } else {
        for (int token : sample.prompt_tokens()) {
            const double u = rng.uniform();
            if (u < 0.45) {
                view.prompt.push_back(token);
            } else if (u < 0.8) {
                view.global.push_back(token);
            }
        }
        view.global_attended = !view.global.empty() || rng.uniform() < 0.5;
    }
    if (grid_fraction > 0.0 && !pool.empty() && rng.uniform() < grid_fraction) {
        static constexpr std::size_t kGrids[3][2] = {{1, 2}, {1, 3}, {2, 2}};
        const auto& g = kGrids[rng.below(3)];
        view.grid_rows = g[0];
        view.grid_cols = g[1];
        view.offset = {};
        const bool shared_global = view.global_attended && !view.global.empty();
        std::vector<const ShapeSample*> eligible;
        for (const auto& s : pool) {
            bool ok = true;
            for (int token : s.prompt_tokens()) {
                const bool same_kind = vocab::is_shape(token) ? std::ranges::any_of(view.global, vocab::is_shape)
                                                       : std::ranges::any_of(view.global, vocab::is_color);
                if (shared_global && same_kind && std::ranges::find(view.global, token) == view.global.end()) ok = false;
            }
            if (ok) eligible.push_back(&s);
        }
        for (std::size_t c = 1; c < view.cells(); ++c) {
            TrainingCompanion comp{*eligible[rng.below(eligible.size())], {}};
            for (int token : comp.sample.prompt_tokens()) {
                const bool in_global = std::ranges::find(view.global, token) != view.global.end();
                if (!(shared_global && in_global) && rng.uniform() < 0.7) comp.prompt.push_back(token);
            }
            view.companions.push_back(std::move(comp));
        }
    }
    return view;
}

TrainingConditioning training_conditioning(const ModelConfig& config, const TrainingView& view) {
    if (view.grid_rows == 0 || view.grid_cols == 0 || view.companions.size() + 1 != view.cells()) {
        throw ValidationError("training view: companions must fill every grid cell but the first");
    }
    TrainingConditioning c;
    c.cells = view.cells();
    std::vector<std::size_t> plens, vlens;
    auto add_prompt = [&](const std::vector<int>& prompt) {
        const auto p = prompt_or_null(prompt);
        c.text_ids.insert(c.text_ids.end(), p.begin(), p.end());
        plens.push_back(p.size());
        vlens.push_back(config.tokens_per_image());
    };
    add_prompt(view.prompt);
    for (const auto& comp : view.companions) add_prompt(comp.prompt);
    const auto g = prompt_or_null(view.global);
    c.text_ids.insert(c.text_ids.end(), g.begin(), g.end());
    c.layout = build_token_layout(plens, g.size(), vlens);
    c.mask = build_set_mask(c.layout, MaskOptions{.attend_global = view.global_attended, .cross_image_visual = true});
    const int tps = static_cast<int>(config.tokens_per_side());
    for (std::size_t cell = 0; cell < c.cells; ++cell) {
        const Coord at{view.offset.row + static_cast<int>(cell / view.grid_cols) * tps,
                       view.offset.col + static_cast<int>(cell % view.grid_cols) * tps};
        const auto coords = image_token_coords(config.tokens_per_side(), at);
        c.coords.insert(c.coords.end(), coords.begin(), coords.end());
    }
    return c;
}

template <typename T>
BasicTensor<T> training_target(const ShapeSample& sample, const TrainingView& view, std::size_t patch_side) {
    if (view.companions.empty()) return patchify(sample.image.cast<T>(), patch_side);
    std::vector<BasicTensor<T>> cells{patchify(sample.image.cast<T>(), patch_side)};
    for (const auto& comp : view.companions) cells.push_back(patchify(comp.sample.image.cast<T>(), patch_side));
    return concat<T>(cells, 0);
}

template <typename T>
T flow_matching_loss_with(const VelocityPredictor<T>& predict, const BasicTensor<T>& x0,
                          const TrainingConditioning& cond, T sigma, const BasicTensor<T>& noise) {
    if (noise.shape() != x0.shape()) throw DimensionError("flow matching: noise shape mismatch");
    BasicTensor<T> x_sigma(x0.shape());
    BasicTensor<T> target(x0.shape());
    for (std::size_t i = 0; i < x0.size(); ++i) {
        x_sigma[i] = (T(1) - sigma) * x0[i] + sigma * noise[i];
        target[i] = noise[i] - x0[i];
    }
    const auto pred = predict(x_sigma, cond, sigma);
    const auto diff = sub(pred, target);
    T loss = 0;
    for (auto v : diff.data()) loss += v * v;
    return loss / static_cast<T>(diff.size());
}

template <typename T>
T flow_matching_loss_at(const ModelParams<T>& params, const ShapeSample& sample, const TrainingView& view, T sigma,
                        const BasicTensor<T>& noise, ModelParams<T>* grads) {
    const auto cond = training_conditioning(params.config, view);
    const auto x0 = training_target<T>(sample, view, params.config.patch_side);
    const std::vector<T> sigmas(cond.cells, sigma);
    auto predict = [&](const BasicTensor<T>& x_sigma, const TrainingConditioning& cd, T) {
        ForwardInputs<T> in{x_sigma, cd.text_ids, cd.layout, cd.mask, cd.coords, sigmas};
        if (!grads) return forward_velocity(params, in);
        ForwardCache<T> cache;
        auto out = forward_velocity(params, in, &cache);
        // d(mean (out - target)^2) / d(out)
        BasicTensor<T> d_out(out.shape());
        const T scale = T(2) / static_cast<T>(out.size());
        for (std::size_t i = 0; i < out.size(); ++i) d_out[i] = scale * (out[i] - (noise[i] - x0[i]));
        backward_velocity(params, in, cache, d_out, *grads);
        return out;
    };
    return flow_matching_loss_with<T>(predict, x0, cond, sigma, noise);
}

template <typename T>
T flow_matching_loss(const ModelParams<T>& params, const ShapeSample& sample, Rng& rng, ModelParams<T>* grads,
                     std::span<const ShapeSample> pool, double grid_fraction) {
    const auto view = draw_training_view(rng, sample, params.config, pool, grid_fraction);
    const T sigma = static_cast<T>(rng.uniform());
    const auto noise = randn<T>(rng, {view.cells() * params.config.tokens_per_image(), params.config.patch_dim()});
    return flow_matching_loss_at(params, sample, view, sigma, noise, grads);
}

TrainResult train(const ModelParams<float>& init, std::span<const ShapeSample> corpus, const TrainOptions& options,
                  Rng& rng) {
    if (corpus.empty()) throw ValidationError("train: empty corpus");
    if (options.batch_size == 0) throw ValidationError("train: batch size must be positive");
    TrainResult result{init, {}};
    auto& params = result.params;
    auto m = ModelParams<float>::zeros_like(params);
    auto v = ModelParams<float>::zeros_like(params);
    std::vector<BasicTensor<float>*> p_list, m_list, v_list;
    params.for_each([&](const std::string&, BasicTensor<float>& t) { p_list.push_back(&t); });
    m.for_each([&](const std::string&, BasicTensor<float>& t) { m_list.push_back(&t); });
    v.for_each([&](const std::string&, BasicTensor<float>& t) { v_list.push_back(&t); });

    double b1t = 1.0, b2t = 1.0;
    for (std::size_t step = 0; step < options.steps; ++step) {
        auto grads = ModelParams<float>::zeros_like(params);
        double loss = 0.0;
        for (std::size_t b = 0; b < options.batch_size; ++b) {
            const auto& sample = corpus[rng.below(corpus.size())];
            loss += flow_matching_loss<float>(params, sample, rng, &grads, corpus, options.grid_fraction);
        }
        loss /= static_cast<double>(options.batch_size);
        if (!std::isfinite(loss)) {
            throw InvariantError("train: non-finite loss at step " + std::to_string(step) +
                                 "; lower the learning rate or check the corpus");
        }
        result.losses.push_back(loss);

        std::vector<BasicTensor<float>*> g_list;
        grads.for_each([&](const std::string&, BasicTensor<float>& t) { g_list.push_back(&t); });
        b1t *= options.beta1;
        b2t *= options.beta2;
        const double inv_batch = 1.0 / static_cast<double>(options.batch_size);
        for (std::size_t t = 0; t < p_list.size(); ++t) {
            auto& P = *p_list[t];
            auto& M = *m_list[t];
            auto& V = *v_list[t];
            const auto& G = *g_list[t];
            for (std::size_t i = 0; i < P.size(); ++i) {
                const double g = G[i] * inv_batch;
                const double mi = options.beta1 * M[i] + (1.0 - options.beta1) * g;
                const double vi = options.beta2 * V[i] + (1.0 - options.beta2) * g * g;
                M[i] = static_cast<float>(mi);
                V[i] = static_cast<float>(vi);
                const double mhat = mi / (1.0 - b1t);
                const double vhat = vi / (1.0 - b2t);
                P[i] = static_cast<float>(P[i] - options.lr * mhat / (std::sqrt(vhat) + options.eps));
            }
        }
        if (options.on_log && options.log_every && (step % options.log_every == 0 || step + 1 == options.steps)) {
            options.on_log(step, loss);
        }
    }
    if (!params.all_finite()) throw InvariantError("train: parameters became non-finite");
    return result;
}

double evaluation_loss(const ModelParams<float>& params, std::span<const ShapeSample> corpus, std::uint64_t seed,
                       std::size_t draws) {
    if (corpus.empty() || draws == 0) throw ValidationError("evaluation_loss: nothing to evaluate");
    Rng rng(seed, 0xE7A1);
    double total = 0.0;
    for (std::size_t i = 0; i < draws; ++i) {
        const auto& sample = corpus[rng.below(corpus.size())];
        total += flow_matching_loss<float>(params, sample, rng);
    }
    return total / static_cast<double>(draws);
}

#define T2IS_MODEL_INSTANTIATE(T)                                                                                   \
    template BasicTensor<T> forward_velocity(const ModelParams<T>&, const ForwardInputs<T>&, ForwardCache<T>*);     \
    template void backward_velocity(const ModelParams<T>&, const ForwardInputs<T>&, const ForwardCache<T>&,         \
                                    const BasicTensor<T>&, ModelParams<T>&);                                        \
    template BasicTensor<T> masked_attention(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,   \
                                             const BasicTensor<T>&, std::size_t);                                   \
    template BasicTensor<T> attention_probs(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);   \
    template BasicTensor<T> timestep_features(T, std::size_t);                                                      \
    template BasicTensor<T> patchify(const BasicTensor<T>&, std::size_t);                                           \
    template BasicTensor<T> unpatchify(const BasicTensor<T>&, std::size_t, std::size_t);                            \
    template T flow_matching_loss_with(const VelocityPredictor<T>&, const BasicTensor<T>&,                        \
                                       const TrainingConditioning&, T, const BasicTensor<T>&);                      \
    template T flow_matching_loss_at(const ModelParams<T>&, const ShapeSample&, const TrainingView&, T,             \
                                     const BasicTensor<T>&, ModelParams<T>*);                                       \
    template BasicTensor<T> training_target(const ShapeSample&, const TrainingView&, std::size_t);                  \
    template T flow_matching_loss(const ModelParams<T>&, const ShapeSample&, Rng&, ModelParams<T>*,                 \
                                  std::span<const ShapeSample>, double);

T2IS_MODEL_INSTANTIATE(float)
T2IS_MODEL_INSTANTIATE(double)

#undef T2IS_MODEL_INSTANTIATE

ModelConfig set_model_config() {
    ModelConfig c;
    c.d_model = 48;
    c.mlp_hidden = 96;
    return c;
}

TrainOptions set_training_options() {
    TrainOptions o;
    o.grid_fraction = 0.5;
    return o;
}

}  // namespace t2is
