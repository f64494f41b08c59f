#include "t2is/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "t2is/error.hpp"

namespace t2is {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

namespace {

void check_shape(const Shape& shape) {
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero dimension");
    }
}

template <typename T>
void require_rank2(const BasicTensor<T>& a, const char* op) {
    if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(a.shape()));
}

template <typename T>
void require_same(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), T(0));
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
        throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
    }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
    BasicTensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("from_rows: ragged rows");
        data.insert(data.end(), row.begin(), row.end());
    }
    return BasicTensor({r, c}, std::move(data));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), data_);
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    BasicTensor<T> out({m, p});
    const T* A = a.data().data();
    const T* B = b.data().data();
    T* C = out.data().data();
    // i-k-j order: each C[i][j] still accumulates k = 0..K-1 in sequence.
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = C + i * p;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = A[i * k + kk];
            const T* brow = B + kk * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    const std::size_t m = a.rows(), k = a.cols(), p = b.rows();
    BasicTensor<T> out({m, p});
    const T* A = a.data().data();
    const T* B = b.data().data();
    T* C = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = A + i * k;
        for (std::size_t j = 0; j < p; ++j) {
            const T* brow = B + j * k;
            T acc = 0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            C[i * p + j] = acc;
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_rank2(a, "matmul_tn");
    require_rank2(b, "matmul_tn");
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: inner dimensions disagree " + shape_str(a.shape()) + "^T x " +
                             shape_str(b.shape()));
    }
    const std::size_t k = a.rows(), m = a.cols(), p = b.cols();
    BasicTensor<T> out({m, p});
    const T* A = a.data().data();
    const T* B = b.data().data();
    T* C = out.data().data();
    for (std::size_t kk = 0; kk < k; ++kk) {
        const T* arow = A + kk * m;
        const T* brow = B + kk * p;
        for (std::size_t i = 0; i < m; ++i) {
            const T aki = arow[i];
            T* crow = C + i * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += aki * brow[j];
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x, const BasicTensor<T>* additive_mask) {
    require_rank2(x, "softmax_rows");
    if (additive_mask) require_same(x, *additive_mask, "softmax_rows");
    const std::size_t m = x.rows(), n = x.cols();
    BasicTensor<T> out({m, n});
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
        auto xr = x.row(i);
        auto orow = out.row(i);
        T mx = neg_inf;
        for (std::size_t j = 0; j < n; ++j) {
            const T v = additive_mask ? xr[j] + additive_mask->at(i, j) : xr[j];
            orow[j] = v;
            if (v > mx) mx = v;
        }
        if (mx == neg_inf) {
            throw DegenerateAttentionError("degenerate attention row " + std::to_string(i) +
                                           ": every key is masked");
        }
        T sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const T e = orow[j] == neg_inf ? T(0) : std::exp(orow[j] - mx);
            orow[j] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
    }
    return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same(a, b, "add");
    BasicTensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same(a, b, "sub");
    BasicTensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same(a, b, "mul");
    BasicTensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
    BasicTensor<T> out = a;
    for (auto& v : out.data()) v *= s;
    return out;
}

template <typename T>
BasicTensor<T> add_row_vector(const BasicTensor<T>& a, const BasicTensor<T>& v) {
    require_rank2(a, "add_row_vector");
    if (v.size() != a.cols()) {
        throw DimensionError("add_row_vector: " + shape_str(a.shape()) + " vs vector " + shape_str(v.shape()));
    }
    BasicTensor<T> out = a;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += v[j];
    }
    return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    require_rank2(a, "transpose");
    BasicTensor<T> out({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

template <typename T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    if (axis > 1) throw DimensionError("concat: axis must be 0 or 1");
    for (const auto& p : parts) require_rank2(p, "concat");
    const std::size_t fixed = parts[0].dim(1 - axis);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.dim(1 - axis) != fixed) {
            throw DimensionError("concat: " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()) +
                                 " disagree off the concat axis");
        }
        total += p.dim(axis);
    }
    if (axis == 0) {
        std::vector<T> data;
        data.reserve(total * fixed);
        for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
        return BasicTensor<T>({total, fixed}, std::move(data));
    }
    BasicTensor<T> out({fixed, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < fixed; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
        off += p.cols();
    }
    return out;
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end) {
    require_rank2(a, "slice_rows");
    if (begin >= end || end > a.rows()) {
        throw DimensionError("slice_rows: span [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") outside " + shape_str(a.shape()));
    }
    const std::size_t c = a.cols();
    std::vector<T> data(a.data().begin() + begin * c, a.data().begin() + end * c);
    return BasicTensor<T>({end - begin, c}, std::move(data));
}

template <typename T>
BasicTensor<T> layer_norm_rows(const BasicTensor<T>& a, T eps) {
    require_rank2(a, "layer_norm_rows");
    BasicTensor<T> out({a.rows(), a.cols()});
    const T n = static_cast<T>(a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto r = a.row(i);
        T mean = 0;
        for (auto v : r) mean += v;
        mean /= n;
        T var = 0;
        for (auto v : r) var += (v - mean) * (v - mean);
        var /= n;
        const T inv = T(1) / std::sqrt(var + eps);
        auto o = out.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) o[j] = (r[j] - mean) * inv;
    }
    return out;
}

template <typename T>
T gelu_scalar(T x) {
    const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T u = c * (x + static_cast<T>(0.044715) * x * x * x);
    return static_cast<T>(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_derivative(T x) {
    const T c = static_cast<T>(0.7978845608028654);
    const T u = c * (x + static_cast<T>(0.044715) * x * x * x);
    const T th = std::tanh(u);
    const T du = c * (T(1) + static_cast<T>(3 * 0.044715) * x * x);
    return static_cast<T>(0.5) * (T(1) + th) + static_cast<T>(0.5) * x * (T(1) - th * th) * du;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
    BasicTensor<T> out = a;
    for (auto& v : out.data()) v = gelu_scalar(v);
    return out;
}

template <typename T>
bool all_finite(const BasicTensor<T>& a) {
    return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same(a, b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

#define T2IS_INSTANTIATE(T)                                                                                 \
    template class BasicTensor<T>;                                                                          \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                           \
    template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);                        \
    template BasicTensor<T> matmul_tn(const BasicTensor<T>&, const BasicTensor<T>&);                        \
    template BasicTensor<T> softmax_rows(const BasicTensor<T>&, const BasicTensor<T>*);                     \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                              \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                              \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                              \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                \
    template BasicTensor<T> add_row_vector(const BasicTensor<T>&, const BasicTensor<T>&);                   \
    template BasicTensor<T> transpose(const BasicTensor<T>&);                                               \
    template BasicTensor<T> concat(std::span<const BasicTensor<T>>, std::size_t);                           \
    template BasicTensor<T> slice_rows(const BasicTensor<T>&, std::size_t, std::size_t);                    \
    template BasicTensor<T> layer_norm_rows(const BasicTensor<T>&, T);                                      \
    template BasicTensor<T> gelu(const BasicTensor<T>&);                                                    \
    template T gelu_scalar(T);                                                                              \
    template T gelu_derivative(T);                                                                          \
    template bool all_finite(const BasicTensor<T>&);                                                        \
    template T max_abs_diff(const BasicTensor<T>&, const BasicTensor<T>&);

T2IS_INSTANTIATE(float)
T2IS_INSTANTIATE(double)

#undef T2IS_INSTANTIATE

}  // namespace t2is
