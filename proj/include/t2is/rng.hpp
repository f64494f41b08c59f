#pragma once

#include <array>
#include <cstdint>

#include "t2is/tensor.hpp"

namespace t2is {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
//
// Key    = (seed low 32 bits, seed high 32 bits)
// Counter= (block index low, block index high, stream low, stream high)
//
// Each block yields four 32-bit words consumed in order. Uniform doubles take
// 53 bits from two consecutive words; normals use Box-Muller on two uniforms,
// emitting the cosine branch then the sine branch.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    std::uint32_t next_u32();
    std::uint64_t next_u64();
    // [0, 1)
    double uniform();
    // Standard normal.
    double normal();
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

private:
    void refill();

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t block_ = 0;
    std::array<std::uint32_t, 4> buffer_{};
    int used_ = 4;
    bool has_spare_normal_ = false;
    double spare_normal_ = 0.0;
};

// One Philox4x32-10 block; exposed for known-answer tests.
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter, std::array<std::uint32_t, 2> key);

// SplitMix64 finalizer; used to derive independent sub-seeds.
std::uint64_t mix64(std::uint64_t x);

// Seed for image `index` of a set generated from `master`.
std::uint64_t derive_image_seed(std::uint64_t master, std::uint64_t index);

template <typename T>
BasicTensor<T> randn(Rng& rng, const Shape& shape);

}  // namespace t2is
