#include "hamr/kspace.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <vector>

#include "hamr/fft.hpp"
#include "hamr/rng.hpp"

namespace hamr::kspace {

namespace {

void check_image(const Tensor& x) {
    ensure(x.is_complex() && x.rank() == 3, "kspace: complex image [T,H,W] expected");
}

void check_sens(const Tensor& sens, int64_t H, int64_t W) {
    ensure(sens.is_complex() && sens.rank() == 3, "kspace: sensitivities [C,H,W] expected");
    ensure(sens.dim(1) == H && sens.dim(2) == W, "kspace: sensitivity grid mismatch");
}

void check_kspace(const Tensor& y) {
    ensure(y.is_complex() && y.rank() == 4, "kspace: k-space [T,C,H,W] expected");
}

}  // namespace

Tensor coil_expand_fft(const Tensor& x, const Tensor& sens) {
    check_image(x);
    int64_t T = x.dim(0), H = x.dim(1), W = x.dim(2);
    check_sens(sens, H, W);
    int64_t C = sens.dim(0), hw = H * W;
    Tensor out({T, C, H, W}, Dtype::Complex128);
    std::vector<cplx> buf(static_cast<size_t>(hw));
    for (int64_t t = 0; t < T; ++t) {
        const cplx* xi = x.cdata() + t * hw;
        for (int64_t c = 0; c < C; ++c) {
            const cplx* s = sens.cdata() + c * hw;
            for (int64_t i = 0; i < hw; ++i) buf[static_cast<size_t>(i)] = s[i] * xi[i];
            fft::fft2_centered(buf.data(), out.cdata() + (t * C + c) * hw, H, W);
        }
    }
    return out;
}

Tensor coil_combine_ifft(const Tensor& y, const Tensor& sens) {
    check_kspace(y);
    int64_t T = y.dim(0), C = y.dim(1), H = y.dim(2), W = y.dim(3);
    check_sens(sens, H, W);
    ensure(sens.dim(0) == C, "kspace: coil count mismatch");
    int64_t hw = H * W;
    Tensor out({T, H, W}, Dtype::Complex128);
    std::vector<cplx> buf(static_cast<size_t>(hw));
    for (int64_t t = 0; t < T; ++t) {
        cplx* xi = out.cdata() + t * hw;
        for (int64_t c = 0; c < C; ++c) {
            fft::ifft2_centered(y.cdata() + (t * C + c) * hw, buf.data(), H, W);
            const cplx* s = sens.cdata() + c * hw;
            for (int64_t i = 0; i < hw; ++i) xi[i] += std::conj(s[i]) * buf[static_cast<size_t>(i)];
        }
    }
    return out;
}

Tensor apply_mask(const Tensor& y, const Tensor& mask) {
    ensure(y.is_complex(), "apply_mask: complex data expected");
    ensure(!mask.is_complex() && mask.rank() == 3, "apply_mask: real mask [T,H,W] expected");
    int64_t T = mask.dim(0), hw = mask.dim(1) * mask.dim(2);
    int64_t C = 1;
    if (y.rank() == 4) {
        ensure(y.dim(0) == T && y.dim(2) == mask.dim(1) && y.dim(3) == mask.dim(2),
               "apply_mask: shape mismatch");
        C = y.dim(1);
    } else {
        ensure(y.rank() == 3 && y.same_shape(mask), "apply_mask: shape mismatch");
    }
    Tensor out = y;
    cplx* p = out.cdata();
    for (int64_t t = 0; t < T; ++t) {
        const double* m = mask.data() + t * hw;
        for (int64_t c = 0; c < C; ++c) {
            cplx* slice = p + (t * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) slice[i] *= m[i];
        }
    }
    return out;
}

Tensor forward_encode(const Tensor& x, const Tensor& sens, const Tensor& mask) {
    return apply_mask(coil_expand_fft(x, sens), mask);
}

Tensor adjoint_encode(const Tensor& y, const Tensor& sens) {
    return coil_combine_ifft(y, sens);
}

Tensor rss(const Tensor& coils) {
    ensure(coils.is_complex() && coils.rank() == 3, "rss: complex [C,H,W] expected");
    int64_t C = coils.dim(0), hw = coils.dim(1) * coils.dim(2);
    Tensor out({coils.dim(1), coils.dim(2)}, Dtype::Real64);
    for (int64_t i = 0; i < hw; ++i) {
        double s = 0.0;
        for (int64_t c = 0; c < C; ++c) s += std::norm(coils.c(c * hw + i));
        out.r(i) = std::sqrt(s);
    }
    return out;
}

Tensor zero_filled_recon(const Tensor& y) {
    check_kspace(y);
    int64_t T = y.dim(0), C = y.dim(1), H = y.dim(2), W = y.dim(3);
    int64_t hw = H * W;
    Tensor out({T, H, W}, Dtype::Real64);
    std::vector<cplx> buf(static_cast<size_t>(hw));
    std::vector<double> acc(static_cast<size_t>(hw));
    for (int64_t t = 0; t < T; ++t) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int64_t c = 0; c < C; ++c) {
            fft::ifft2_centered(y.cdata() + (t * C + c) * hw, buf.data(), H, W);
            for (int64_t i = 0; i < hw; ++i) acc[static_cast<size_t>(i)] += std::norm(buf[static_cast<size_t>(i)]);
        }
        for (int64_t i = 0; i < hw; ++i) out.r(t * hw + i) = std::sqrt(acc[static_cast<size_t>(i)]);
    }
    return out;
}

Tensor data_consistency_step(const Tensor& x, const Tensor& y, const Tensor& sens,
                             const Tensor& mask, double lambda_t, const Tensor& reg_out) {
    ensure(lambda_t >= 0.0, "data_consistency_step: lambda must be nonnegative");
    check_image(x);
    ensure(reg_out.same_shape(x) && reg_out.is_complex(),
           "data_consistency_step: reg_out must match x");
    Tensor residual = forward_encode(x, sens, mask);
    ensure(residual.same_shape(y), "data_consistency_step: k-space shape mismatch");
    for (int64_t i = 0; i < residual.numel(); ++i)
        residual.set_c(i, residual.c(i) - y.c(i));
    Tensor grad = adjoint_encode(apply_mask(residual, mask), sens);
    Tensor out = x;
    for (int64_t i = 0; i < out.numel(); ++i)
        out.set_c(i, out.c(i) - lambda_t * (grad.c(i) + reg_out.c(i)));
    return out;
}

MaskKind mask_kind_from_string(const std::string& s) {
    if (s == "uniform") return MaskKind::Uniform;
    if (s == "kt_gaussian") return MaskKind::KtGaussian;
    if (s == "radial") return MaskKind::Radial;
    ensure(false, "unknown mask kind: " + s);
    return MaskKind::Uniform;
}

std::string mask_kind_name(MaskKind k) {
    switch (k) {
        case MaskKind::Uniform: return "uniform";
        case MaskKind::KtGaussian: return "kt_gaussian";
        case MaskKind::Radial: return "radial";
    }
    return "uniform";
}

double SamplingMask::achieved_accel() const {
    ensure(structural_px > 0, "mask: empty structural pattern");
    return static_cast<double>(pattern.numel()) / static_cast<double>(structural_px);
}

SamplingMask make_mask(MaskKind kind, int64_t T, int64_t H, int64_t W,
                       double target_accel, int64_t acs_lines, uint64_t seed) {
    ensure(T >= 1 && H >= 2 && W >= 2, "make_mask: bad grid");
    ensure(target_accel >= 2.0, "make_mask: target acceleration must be >= 2");
    ensure(acs_lines >= 2 && acs_lines % 2 == 0, "make_mask: acs_lines must be even and >= 2");
    ensure(acs_lines < W, "make_mask: ACS block wider than the grid");
    // Feasibility: the ACS block alone must not exceed the sampling budget.
    ensure(static_cast<double>(acs_lines) <= static_cast<double>(W) / target_accel,
           "make_mask: ACS block alone exceeds the sampling budget");

    SamplingMask m;
    m.kind = kind;
    m.target_accel = target_accel;
    m.acs_lines = acs_lines;
    m.pattern = Tensor::zeros({T, H, W});

    auto set_col = [&](int64_t t, int64_t col) {
        for (int64_t r = 0; r < H; ++r) m.pattern.r(m.pattern.idx3(t, r, col)) = 1.0;
    };

    int64_t structural = 0;
    if (kind == MaskKind::Uniform) {
        int64_t R = std::llround(target_accel);
        ensure(R >= 2, "make_mask: uniform step must be >= 2");
        for (int64_t t = 0; t < T; ++t)
            for (int64_t col = 0; col < W; col += R) {
                set_col(t, col);
                structural += H;
            }
    } else if (kind == MaskKind::KtGaussian) {
        int64_t budget_total = std::llround(static_cast<double>(T * W) / target_accel);
        budget_total = std::max<int64_t>(budget_total, T);
        std::mt19937_64 rng = make_rng(seed, "mask-kt");
        std::normal_distribution<double> gauss(static_cast<double>(W) / 2.0,
                                               static_cast<double>(W) / 6.0);
        int64_t base = budget_total / T, rem = budget_total % T;
        for (int64_t t = 0; t < T; ++t) {
            int64_t budget = base + (t < rem ? 1 : 0);
            budget = std::min(budget, W);
            std::set<int64_t> cols;
            int64_t guard = 0;
            while (static_cast<int64_t>(cols.size()) < budget) {
                ensure(++guard < 100000, "make_mask: kt draw did not converge");
                int64_t col = std::llround(gauss(rng));
                if (col < 0 || col >= W) continue;
                cols.insert(col);
            }
            for (int64_t col : cols) {
                set_col(t, col);
                structural += H;
            }
        }
    } else {
        int64_t L = std::max(H, W);
        int64_t spokes = static_cast<int64_t>(
            std::ceil(static_cast<double>(H * W) / (target_accel * static_cast<double>(L))));
        spokes = std::max<int64_t>(spokes, 1);
        const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
        for (int64_t t = 0; t < T; ++t) {
            std::set<int64_t> px;
            for (int64_t j = 0; j < spokes; ++j) {
                double theta = static_cast<double>(j) * std::numbers::pi / static_cast<double>(spokes) +
                               static_cast<double>(t) * golden;
                double cx = std::cos(theta), cy = std::sin(theta);
                for (int64_t s = 0; s < L; ++s) {
                    double r = static_cast<double>(s) - static_cast<double>(L) / 2.0;
                    int64_t ix = std::llround(static_cast<double>(W) / 2.0 + r * cx);
                    int64_t iy = std::llround(static_cast<double>(H) / 2.0 + r * cy);
                    if (ix < 0 || ix >= W || iy < 0 || iy >= H) continue;
                    px.insert(iy * W + ix);
                }
            }
            for (int64_t p : px) m.pattern.r(t * H * W + p) = 1.0;
            structural += static_cast<int64_t>(px.size());
        }
        (void)seed;  // radial is deterministic; frame offset comes from the golden angle
    }
    m.structural_px = structural;

    int64_t acs0 = W / 2 - acs_lines / 2;
    for (int64_t t = 0; t < T; ++t)
        for (int64_t col = acs0; col < acs0 + acs_lines; ++col) set_col(t, col);
    return m;
}

}  // namespace hamr::kspace
