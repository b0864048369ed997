#pragma once

#include <random>

#include "hamr/rng.hpp"
#include "hamr/tensor.hpp"

namespace testutil {

inline hamr::Tensor rand_real(std::vector<int64_t> shape, std::mt19937_64& rng,
                              double lo = -1.0, double hi = 1.0) {
    hamr::Tensor t(std::move(shape), hamr::Dtype::Real64);
    std::uniform_real_distribution<double> d(lo, hi);
    for (int64_t i = 0; i < t.numel(); ++i) t.r(i) = d(rng);
    return t;
}

inline hamr::Tensor rand_complex(std::vector<int64_t> shape, std::mt19937_64& rng,
                                 double scale = 1.0) {
    hamr::Tensor t(std::move(shape), hamr::Dtype::Complex128);
    std::normal_distribution<double> d(0.0, scale);
    for (int64_t i = 0; i < t.numel(); ++i) t.set_c(i, {d(rng), d(rng)});
    return t;
}

inline bool bit_equal(const hamr::Tensor& a, const hamr::Tensor& b) {
    if (!a.same_shape(b) || a.dtype() != b.dtype()) return false;
    for (size_t i = 0; i < a.store_size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

}  // namespace testutil
