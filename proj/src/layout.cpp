#include "t2is/layout.hpp"

#include <limits>
#include <sstream>

#include "t2is/error.hpp"

namespace t2is {

std::size_t TokenLayout::prompt_tokens() const {
    std::size_t total = 0;
    for (const auto& s : prompt_spans) total += s.size();
    return total;
}

std::size_t TokenLayout::visual_tokens() const {
    std::size_t total = 0;
    for (const auto& s : visual_spans) total += s.size();
    return total;
}

Span TokenLayout::query_span(std::size_t k) const {
    const std::size_t off = text_tokens();
    return {visual_spans.at(k).begin - off, visual_spans.at(k).end - off};
}

std::size_t TokenLayout::image_of_query(std::size_t i) const {
    const std::size_t key = i + text_tokens();
    for (std::size_t k = 0; k < n; ++k) {
        if (visual_spans[k].contains(key)) return k;
    }
    throw DimensionError("query row " + std::to_string(i) + " outside layout with N=" + std::to_string(visual_tokens()));
}

TokenLayout build_token_layout(std::span<const std::size_t> prompt_lens, std::size_t global_len,
                               std::span<const std::size_t> visual_lens) {
    if (prompt_lens.empty()) throw ValidationError("token layout: empty prompt list");
    if (prompt_lens.size() != visual_lens.size()) {
        throw ValidationError("token layout: " + std::to_string(prompt_lens.size()) + " prompts but " +
                              std::to_string(visual_lens.size()) + " images");
    }
    if (global_len == 0) throw ValidationError("token layout: global prompt length is zero");
    for (std::size_t k = 0; k < prompt_lens.size(); ++k) {
        if (prompt_lens[k] == 0) throw ValidationError("token layout: prompt " + std::to_string(k) + " has length zero");
        if (visual_lens[k] == 0) throw ValidationError("token layout: image " + std::to_string(k) + " has no tokens");
    }
    TokenLayout layout;
    layout.n = prompt_lens.size();
    std::size_t cursor = 0;
    for (auto len : prompt_lens) {
        layout.prompt_spans.push_back({cursor, cursor + len});
        cursor += len;
    }
    layout.global_span = {cursor, cursor + global_len};
    cursor += global_len;
    for (auto len : visual_lens) {
        layout.visual_spans.push_back({cursor, cursor + len});
        cursor += len;
    }
    return layout;
}

AttnMask::AttnMask(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), allowed_(rows * cols, 0) {}

std::size_t AttnMask::allowed_in_row(std::size_t i) const {
    std::size_t count = 0;
    for (std::size_t j = 0; j < cols_; ++j) count += allowed_[i * cols_ + j];
    return count;
}

template <typename T>
BasicTensor<T> AttnMask::additive() const {
    BasicTensor<T> out({rows_, cols_});
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < allowed_.size(); ++i) out[i] = allowed_[i] ? T(0) : neg_inf;
    return out;
}

template BasicTensor<float> AttnMask::additive<float>() const;
template BasicTensor<double> AttnMask::additive<double>() const;

AttnMask build_set_mask(const TokenLayout& layout, const MaskOptions& options) {
    AttnMask mask(layout.visual_tokens(), layout.key_count());
    for (std::size_t k = 0; k < layout.n; ++k) {
        const Span rows = layout.query_span(k);
        for (std::size_t i = rows.begin; i < rows.end; ++i) {
            for (std::size_t j = layout.prompt_spans[k].begin; j < layout.prompt_spans[k].end; ++j) mask.set(i, j, true);
            if (options.attend_global) {
                for (std::size_t j = layout.global_span.begin; j < layout.global_span.end; ++j) mask.set(i, j, true);
            }
            for (std::size_t other = 0; other < layout.n; ++other) {
                if (other != k && !options.cross_image_visual) continue;
                for (std::size_t j = layout.visual_spans[other].begin; j < layout.visual_spans[other].end; ++j) {
                    mask.set(i, j, true);
                }
            }
        }
    }
    return mask;
}

AttnMask build_text_query_mask(const TokenLayout& layout, const AttnMask& visual_mask) {
    AttnMask mask(layout.text_tokens(), layout.key_count());
    const std::size_t text = layout.text_tokens();
    for (std::size_t k = 0; k < layout.n; ++k) {
        const std::size_t probe = layout.query_span(k).begin;
        const bool sees_global = visual_mask.allows(probe, layout.global_span.begin);
        for (std::size_t i = layout.prompt_spans[k].begin; i < layout.prompt_spans[k].end; ++i) {
            for (std::size_t j = layout.prompt_spans[k].begin; j < layout.prompt_spans[k].end; ++j) mask.set(i, j, true);
            if (sees_global) {
                for (std::size_t j = layout.global_span.begin; j < layout.global_span.end; ++j) mask.set(i, j, true);
            }
            for (std::size_t j = text; j < layout.key_count(); ++j) {
                if (visual_mask.allows(probe, j)) mask.set(i, j, true);
            }
        }
    }
    for (std::size_t i = layout.global_span.begin; i < layout.global_span.end; ++i) {
        for (std::size_t j = layout.global_span.begin; j < layout.global_span.end; ++j) mask.set(i, j, true);
        for (std::size_t j = text; j < layout.key_count(); ++j) mask.set(i, j, true);
    }
    return mask;
}

std::string format_mask_dump(const TokenLayout& layout, const AttnMask& mask) {
    std::ostringstream os;
    os << "# set-mask n=" << layout.n << " N_p=" << layout.prompt_tokens() << " N_g=" << layout.global_tokens()
       << " N=" << layout.visual_tokens() << " rows=" << mask.rows() << " cols=" << mask.cols() << "\n";
    for (std::size_t k = 0; k < layout.n; ++k) {
        os << "# p" << (k + 1) << " [" << layout.prompt_spans[k].begin << "," << layout.prompt_spans[k].end << ")\n";
    }
    os << "# g [" << layout.global_span.begin << "," << layout.global_span.end << ")\n";
    for (std::size_t k = 0; k < layout.n; ++k) {
        os << "# v" << (k + 1) << " [" << layout.visual_spans[k].begin << "," << layout.visual_spans[k].end << ")\n";
    }
    for (std::size_t i = 0; i < mask.rows(); ++i) {
        std::string line(mask.cols(), '-');
        for (std::size_t j = 0; j < mask.cols(); ++j) {
            if (mask.allows(i, j)) line[j] = '0';
        }
        os << line << "\n";
    }
    return os.str();
}

}  // namespace t2is
