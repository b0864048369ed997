#pragma once

#include <complex>
#include <cstdint>

namespace hamr::fft {

bool is_pow2(int64_t n);

/// In-place radix-2 FFT of length n (power of two). sign = -1 forward,
/// +1 inverse. No normalization is applied here.
void fft_inplace(std::complex<double>* a, int64_t n, int sign);

/// Centered orthonormal 2D transforms on a row-major h*w block:
/// low spatial frequencies land in the middle of the array, and
/// ifft2(fft2(x)) == x. Both directions carry a 1/sqrt(h*w) factor.
void fft2_centered(const std::complex<double>* in, std::complex<double>* out,
                   int64_t h, int64_t w);
void ifft2_centered(const std::complex<double>* in, std::complex<double>* out,
                    int64_t h, int64_t w);

}  // namespace hamr::fft
