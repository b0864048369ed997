#pragma once

#include <cstdint>
#include <string>

#include "hamr/tensor.hpp"

namespace hamr::kspace {

// Multi-coil Cartesian encoding. Images are complex [T,H,W], coil
// sensitivities complex [C,H,W], k-space complex [T,C,H,W], masks real
// {0,1} [T,H,W] shared across coils.

/// y[t,c] = fft2(S_c * x[t]) (no mask).
Tensor coil_expand_fft(const Tensor& x, const Tensor& sens);
/// x[t] = sum_c conj(S_c) * ifft2(y[t,c]); adjoint of coil_expand_fft.
Tensor coil_combine_ifft(const Tensor& y, const Tensor& sens);
/// Pointwise mask multiply on [T,C,H,W] or [T,H,W].
Tensor apply_mask(const Tensor& y, const Tensor& mask);

/// y = M * fft2(S_c * x); linear in x.
Tensor forward_encode(const Tensor& x, const Tensor& sens, const Tensor& mask);
/// x = sum_c conj(S_c) * ifft2(y_c). Exact adjoint of forward_encode under
/// Re<a,b> for y supported on the mask.
Tensor adjoint_encode(const Tensor& y, const Tensor& sens);

/// Root-sum-of-squares coil combination, complex [C,H,W] -> real [H,W].
Tensor rss(const Tensor& coils);

/// Per-frame RSS of the per-coil inverse FFT: [T,C,H,W] -> real [T,H,W].
Tensor zero_filled_recon(const Tensor& y);

/// x' = x - lambda * (A^H(M(Ax - y)) + reg_out). lambda >= 0 enforced.
Tensor data_consistency_step(const Tensor& x, const Tensor& y, const Tensor& sens,
                             const Tensor& mask, double lambda_t, const Tensor& reg_out);

enum class MaskKind { Uniform, KtGaussian, Radial };

MaskKind mask_kind_from_string(const std::string& s);
std::string mask_kind_name(MaskKind k);

struct SamplingMask {
    MaskKind kind = MaskKind::Uniform;
    Tensor pattern;            // real {0,1} [T,H,W], structural pattern union ACS
    double target_accel = 0.0;
    int64_t acs_lines = 0;
    int64_t structural_px = 0; // samples of the pattern alone, ACS ignored

    /// total / structural. ACS calibration columns are a fixed overhead and
    /// are excluded from the acceleration accounting.
    double achieved_accel() const;
};

/// Deterministic for a fixed seed. uniform: every round(target)-th column;
/// kt_gaussian: per-frame Gaussian column draws (sigma = W/6, centered),
/// global budget round(T*W/target) spread across frames; radial:
/// ceil(H*W/(target*max(H,W))) equiangular spokes, golden-angle offset per
/// frame, nearest-grid rasterization. The central acs_lines columns are
/// forced on in every frame.
SamplingMask make_mask(MaskKind kind, int64_t T, int64_t H, int64_t W,
                       double target_accel, int64_t acs_lines, uint64_t seed);

}  // namespace hamr::kspace
