#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace t2is {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array. Element type is float for normal runs and double for
// verification runs (gradient checks, tight equivalence tests).
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;
    explicit BasicTensor(Shape shape);
    BasicTensor(Shape shape, std::vector<T> data);

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
    static BasicTensor full(Shape shape, T value);
    static BasicTensor from_rows(std::initializer_list<std::initializer_list<T>> rows);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // 2-D access; rank is not checked on the hot path.
    T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * shape_[1], shape_[1]}; }

    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.at(1); }

    BasicTensor reshaped(Shape shape) const;

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicTensor<U>(shape_, std::move(out));
    }

    bool operator==(const BasicTensor& other) const = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// All kernels are pure: inputs are never modified.

// Standard product. Summation runs k = 0..K-1 in order for each output entry.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// a · bᵀ, same fixed order.
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);

// aᵀ · b, same fixed order.
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Row softmax of x + mask. Mask entries are 0 or -inf. Throws
// DegenerateAttentionError when a row has no finite entry left.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x, const BasicTensor<T>* additive_mask = nullptr);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s);

// Adds a length-C row vector to every row of an R×C matrix.
template <typename T>
BasicTensor<T> add_row_vector(const BasicTensor<T>& a, const BasicTensor<T>& v);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);

// Concatenation of rank-2 tensors along axis 0 or 1.
template <typename T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, std::size_t axis);

// Rows [begin, end) of a rank-2 tensor.
template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end);

// Per-row normalization to zero mean / unit variance, no affine parameters.
template <typename T>
BasicTensor<T> layer_norm_rows(const BasicTensor<T>& a, T eps);

// tanh approximation of GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a);
template <typename T>
T gelu_scalar(T x);
template <typename T>
T gelu_derivative(T x);

template <typename T>
bool all_finite(const BasicTensor<T>& a);

template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b);

}  // namespace t2is
