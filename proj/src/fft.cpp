#include "hamr/fft.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace hamr::fft {

bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

namespace {

struct Tables {
    std::vector<int> bitrev;                    // permutation for this size
    std::vector<std::complex<double>> twiddle;  // forward twiddles, n/2 entries
};

// Twiddles are evaluated with polar() per entry rather than recurrences so
// round-trip error stays at the 1e-15 level.
const Tables& tables_for(int64_t n) {
    static std::vector<Tables> cache(32);
    int lg = 0;
    while ((int64_t{1} << lg) < n) ++lg;
    Tables& t = cache[lg];
    if (t.bitrev.empty() && n >= 1) {
        t.bitrev.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            int64_t rev = 0;
            for (int b = 0; b < lg; ++b)
                if (i & (int64_t{1} << b)) rev |= int64_t{1} << (lg - 1 - b);
            t.bitrev[static_cast<size_t>(i)] = static_cast<int>(rev);
        }
        t.twiddle.resize(static_cast<size_t>(n / 2 > 0 ? n / 2 : 1));
        for (int64_t k = 0; k < n / 2; ++k)
            t.twiddle[static_cast<size_t>(k)] =
                std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
    }
    return t;
}

}  // namespace

void fft_inplace(std::complex<double>* a, int64_t n, int sign) {
    if (!is_pow2(n)) throw std::invalid_argument("fft: length must be a power of two");
    if (n == 1) return;
    const Tables& t = tables_for(n);
    for (int64_t i = 0; i < n; ++i) {
        int64_t j = t.bitrev[static_cast<size_t>(i)];
        if (i < j) std::swap(a[i], a[j]);
    }
    for (int64_t len = 2; len <= n; len <<= 1) {
        int64_t half = len >> 1;
        int64_t step = n / len;
        for (int64_t base = 0; base < n; base += len) {
            for (int64_t k = 0; k < half; ++k) {
                std::complex<double> w = t.twiddle[static_cast<size_t>(k * step)];
                if (sign > 0) w = std::conj(w);
                std::complex<double> u = a[base + k];
                std::complex<double> v = a[base + k + half] * w;
                a[base + k] = u + v;
                a[base + k + half] = u - v;
            }
        }
    }
}

namespace {

// Centered transform = rotate-by-half, plain FFT along rows and columns,
// rotate-by-half again, then orthonormal scaling. For even sizes the two
// shift flavors coincide, so the same routine serves both directions.
void fft2_shifted(const std::complex<double>* in, std::complex<double>* out,
                  int64_t h, int64_t w, int sign) {
    if (!is_pow2(h) || !is_pow2(w))
        throw std::invalid_argument("fft2: spatial dims must be powers of two");
    const int64_t hh = h / 2, hw = w / 2;
    std::vector<std::complex<double>> work(static_cast<size_t>(h * w));
    for (int64_t r = 0; r < h; ++r) {
        int64_t sr = (r + hh) % h;
        for (int64_t c = 0; c < w; ++c) work[static_cast<size_t>(r * w + c)] = in[sr * w + ((c + hw) % w)];
    }
    for (int64_t r = 0; r < h; ++r) fft_inplace(work.data() + r * w, w, sign);
    std::vector<std::complex<double>> col(static_cast<size_t>(h));
    for (int64_t c = 0; c < w; ++c) {
        for (int64_t r = 0; r < h; ++r) col[static_cast<size_t>(r)] = work[static_cast<size_t>(r * w + c)];
        fft_inplace(col.data(), h, sign);
        for (int64_t r = 0; r < h; ++r) work[static_cast<size_t>(r * w + c)] = col[static_cast<size_t>(r)];
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(h * w));
    for (int64_t r = 0; r < h; ++r) {
        int64_t sr = (r + hh) % h;
        for (int64_t c = 0; c < w; ++c)
            out[sr * w + ((c + hw) % w)] = work[static_cast<size_t>(r * w + c)] * scale;
    }
}

}  // namespace

void fft2_centered(const std::complex<double>* in, std::complex<double>* out,
                   int64_t h, int64_t w) {
    fft2_shifted(in, out, h, w, -1);
}

void ifft2_centered(const std::complex<double>* in, std::complex<double>* out,
                    int64_t h, int64_t w) {
    fft2_shifted(in, out, h, w, +1);
}

}  // namespace hamr::fft
