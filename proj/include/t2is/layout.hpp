#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "t2is/tensor.hpp"

namespace t2is {

// Half-open index range.
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
    bool operator==(const Span&) const = default;
};

// Bookkeeping for the joint attention key axis:
//   [p_1 ... p_n, g, v_1 ... v_n]
// Visual spans are stored in key-axis coordinates; query_span(k) gives the
// same tokens on the query axis (which holds visual tokens only).
struct TokenLayout {
    std::size_t n = 0;
    std::vector<Span> prompt_spans;
    Span global_span;
    std::vector<Span> visual_spans;

    std::size_t prompt_tokens() const;  // N_p
    std::size_t global_tokens() const { return global_span.size(); }  // N_g
    std::size_t visual_tokens() const;  // N
    std::size_t text_tokens() const { return prompt_tokens() + global_tokens(); }
    std::size_t key_count() const { return text_tokens() + visual_tokens(); }

    Span query_span(std::size_t k) const;
    // Image owning query row i.
    std::size_t image_of_query(std::size_t i) const;
};

// Throws ValidationError on empty lists, mismatched list lengths or zero lengths.
TokenLayout build_token_layout(std::span<const std::size_t> prompt_lens, std::size_t global_len,
                               std::span<const std::size_t> visual_lens);

// Variants of the set mask. The defaults give the set-aware mask: a visual
// query of image k sees p_k, g and every visual token.
struct MaskOptions {
    bool attend_global = true;
    bool cross_image_visual = true;
};

// N x (N_p + N_g + N) attention mask with entries 0 (allowed) or -inf.
class AttnMask {
public:
    AttnMask() = default;
    AttnMask(std::size_t rows, std::size_t cols);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool allows(std::size_t i, std::size_t j) const { return allowed_[i * cols_ + j] != 0; }
    void set(std::size_t i, std::size_t j, bool allowed) { allowed_[i * cols_ + j] = allowed ? 1 : 0; }
    std::size_t allowed_in_row(std::size_t i) const;

    // Additive form: 0 where allowed, IEEE -inf elsewhere.
    template <typename T>
    BasicTensor<T> additive() const;

    bool operator==(const AttnMask&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> allowed_;
};

AttnMask build_set_mask(const TokenLayout& layout, const MaskOptions& options = {});

// Text-query rows for the joint-text-queries variant. A token of p_k sees p_k,
// g (when image k's visual rows do) and the visual columns image k's first
// query row sees; a token of g sees g and every visual column.
AttnMask build_text_query_mask(const TokenLayout& layout, const AttnMask& visual_mask);

// Plain-text dump: header lines describing spans, then one row per query of
// '0' (allowed) and '-' (masked) characters.
std::string format_mask_dump(const TokenLayout& layout, const AttnMask& mask);

}  // namespace t2is
