#include <cmath>
#include <set>

#include "doctest.h"
#include "hamr/fft.hpp"
#include "hamr/kspace.hpp"
#include "hamr/rng.hpp"
#include "helpers.hpp"

using namespace hamr;
using namespace hamr::kspace;
using testutil::bit_equal;
using testutil::rand_complex;
using testutil::rand_real;

namespace {

Tensor ones_mask(int64_t T, int64_t H, int64_t W) { return Tensor::full({T, H, W}, 1.0); }

Tensor unit_sens(int64_t C, int64_t H, int64_t W, uint64_t seed) {
    auto rng = make_rng(seed, "sens");
    Tensor raw = rand_complex({C, H, W}, rng);
    int64_t hw = H * W;
    for (int64_t i = 0; i < hw; ++i) {
        double s = 0.0;
        for (int64_t c = 0; c < C; ++c) s += std::norm(raw.c(c * hw + i));
        s = std::sqrt(s);
        for (int64_t c = 0; c < C; ++c) raw.set_c(c * hw + i, raw.c(c * hw + i) / s);
    }
    return raw;
}

double re_inner(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += (a.c(i) * std::conj(b.c(i))).real();
    return s;
}

Tensor random_mask(int64_t T, int64_t H, int64_t W, uint64_t seed, double p = 0.4) {
    auto rng = make_rng(seed, "randmask");
    std::bernoulli_distribution bd(p);
    Tensor m = Tensor::zeros({T, H, W});
    for (int64_t i = 0; i < m.numel(); ++i) m.r(i) = bd(rng) ? 1.0 : 0.0;
    m.r(0) = 1.0;
    return m;
}

}  // namespace

TEST_CASE("forward_encode reductions") {
    SUBCASE("zero image gives zero k-space") {
        Tensor x = Tensor::zeros({2, 8, 8}, Dtype::Complex128);
        Tensor y = forward_encode(x, unit_sens(3, 8, 8, 1), random_mask(2, 8, 8, 2));
        CHECK(y.max_abs() == 0.0);
    }
    SUBCASE("full mask, single unit coil reduces to fft2") {
        auto rng = make_rng(3, "fe");
        Tensor x = rand_complex({1, 8, 8}, rng);
        Tensor s = Tensor::zeros({1, 8, 8}, Dtype::Complex128);
        for (int64_t i = 0; i < 64; ++i) s.set_c(i, {1.0, 0.0});
        Tensor y = forward_encode(x, s, ones_mask(1, 8, 8));
        Tensor ref({8, 8}, Dtype::Complex128);
        fft::fft2_centered(x.cdata(), ref.cdata(), 8, 8);
        double m = 0.0;
        for (int64_t i = 0; i < 64; ++i) m = std::max(m, std::abs(y.c(i) - ref.c(i)));
        CHECK(m < 1e-14);
    }
}

TEST_CASE("encode operators are linear") {
    auto rng = make_rng(5, "lin");
    Tensor x1 = rand_complex({2, 8, 8}, rng);
    Tensor x2 = rand_complex({2, 8, 8}, rng);
    Tensor sens = unit_sens(4, 8, 8, 6);
    Tensor mask = random_mask(2, 8, 8, 7);
    double a = 1.3, b = -0.7;
    Tensor xc({2, 8, 8}, Dtype::Complex128);
    for (int64_t i = 0; i < xc.numel(); ++i) xc.set_c(i, a * x1.c(i) + b * x2.c(i));
    Tensor yc = forward_encode(xc, sens, mask);
    Tensor y1 = forward_encode(x1, sens, mask);
    Tensor y2 = forward_encode(x2, sens, mask);
    double worst = 0.0, scale = yc.max_abs();
    for (int64_t i = 0; i < yc.numel(); ++i)
        worst = std::max(worst, std::abs(yc.c(i) - (a * y1.c(i) + b * y2.c(i))));
    CHECK(worst / scale < 1e-12);
}

TEST_CASE("adjointness holds to 1e-10 over 100 random trials") {
    double worst = 0.0;
    for (uint64_t trial = 0; trial < 100; ++trial) {
        auto rng = make_rng(trial, "adjtrial");
        int64_t C = 1 + static_cast<int64_t>(trial % 4);
        int64_t T = 1 + static_cast<int64_t>(trial % 2);
        Tensor x = rand_complex({T, 8, 8}, rng);
        Tensor sens = rand_complex({C, 8, 8}, rng);  // adjointness needs no normalization
        Tensor mask = random_mask(T, 8, 8, trial * 31 + 7);
        // y must live in the sampled subspace, matching acquired data
        Tensor y = apply_mask(rand_complex({T, C, 8, 8}, rng), mask);
        Tensor Ax = forward_encode(x, sens, mask);
        Tensor Aty = adjoint_encode(y, sens);
        worst = std::max(worst, std::abs(re_inner(Ax, y) - re_inner(x, Aty)));
    }
    CHECK(worst <= 1e-10);
}

TEST_CASE("adjoint reductions") {
    SUBCASE("zero k-space gives zero image") {
        Tensor y = Tensor::zeros({1, 2, 8, 8}, Dtype::Complex128);
        CHECK(adjoint_encode(y, unit_sens(2, 8, 8, 9)).max_abs() == 0.0);
    }
    SUBCASE("single unit coil reduces to ifft2") {
        auto rng = make_rng(10, "adj");
        Tensor y = rand_complex({1, 1, 8, 8}, rng);
        Tensor s = Tensor::zeros({1, 8, 8}, Dtype::Complex128);
        for (int64_t i = 0; i < 64; ++i) s.set_c(i, {1.0, 0.0});
        Tensor x = adjoint_encode(y, s);
        Tensor ref({8, 8}, Dtype::Complex128);
        fft::ifft2_centered(y.cdata(), ref.cdata(), 8, 8);
        double m = 0.0;
        for (int64_t i = 0; i < 64; ++i) m = std::max(m, std::abs(x.c(i) - ref.c(i)));
        CHECK(m < 1e-14);
    }
}

TEST_CASE("rss") {
    SUBCASE("single coil is the magnitude") {
        auto rng = make_rng(11, "rss");
        Tensor x = rand_complex({1, 4, 4}, rng);
        Tensor r = rss(x);
        for (int64_t i = 0; i < 16; ++i) CHECK(r.r(i) == doctest::Approx(std::abs(x.c(i))));
    }
    SUBCASE("3-4-5 coils") {
        Tensor x({2, 4, 4}, Dtype::Complex128);
        for (int64_t i = 0; i < 16; ++i) {
            x.set_c(i, {3.0, 0.0});
            x.set_c(16 + i, {0.0, 4.0});
        }
        Tensor r = rss(x);
        for (int64_t i = 0; i < 16; ++i) CHECK(r.r(i) == doctest::Approx(5.0));
    }
    SUBCASE("random 4-coil matches the direct formula and is nonnegative") {
        auto rng = make_rng(12, "rss4");
        Tensor x = rand_complex({4, 8, 8}, rng);
        Tensor r = rss(x);
        for (int64_t i = 0; i < 64; ++i) {
            double s = 0.0;
            for (int64_t c = 0; c < 4; ++c) s += std::norm(x.c(c * 64 + i));
            CHECK(r.r(i) == doctest::Approx(std::sqrt(s)));
            CHECK(r.r(i) >= 0.0);
        }
    }
}

TEST_CASE("uniform mask example: R=8, acs=8 at width 64") {
    SamplingMask m = make_mask(MaskKind::Uniform, 2, 64, 64, 8.0, 8, 0);
    std::set<int64_t> want;
    for (int64_t c = 0; c < 64; c += 8) want.insert(c);
    for (int64_t c = 28; c < 36; ++c) want.insert(c);
    for (int64_t t = 0; t < 2; ++t)
        for (int64_t col = 0; col < 64; ++col) {
            bool on = m.pattern.r(m.pattern.idx3(t, 0, col)) == 1.0;
            CHECK(on == (want.count(col) > 0));
            for (int64_t r = 0; r < 64; ++r)
                CHECK(m.pattern.r(m.pattern.idx3(t, r, col)) ==
                      m.pattern.r(m.pattern.idx3(t, 0, col)));
        }
    CHECK(m.achieved_accel() == doctest::Approx(8.0));
    CHECK(m.achieved_accel() >= 7.2);
    CHECK(m.achieved_accel() <= 8.8);
}

TEST_CASE("masks are deterministic, binary, with a solid ACS block") {
    for (MaskKind kind : {MaskKind::Uniform, MaskKind::KtGaussian, MaskKind::Radial}) {
        SamplingMask a = make_mask(kind, 3, 32, 32, 4.0, 4, 99);
        SamplingMask b = make_mask(kind, 3, 32, 32, 4.0, 4, 99);
        CHECK(bit_equal(a.pattern, b.pattern));
        for (int64_t i = 0; i < a.pattern.numel(); ++i) {
            double v = a.pattern.r(i);
            CHECK((v == 0.0 || v == 1.0));
        }
        for (int64_t t = 0; t < 3; ++t)
            for (int64_t r = 0; r < 32; ++r)
                for (int64_t col = 14; col < 18; ++col)
                    CHECK(a.pattern.r(a.pattern.idx3(t, r, col)) == 1.0);
    }
    SamplingMask s1 = make_mask(MaskKind::KtGaussian, 2, 32, 32, 4.0, 4, 1);
    SamplingMask s2 = make_mask(MaskKind::KtGaussian, 2, 32, 32, 4.0, 4, 2);
    CHECK(!bit_equal(s1.pattern, s2.pattern));
}

TEST_CASE("achieved acceleration stays within 10% of target across seeds") {
    struct Cfg {
        MaskKind kind;
        double target;
        int64_t acs;
    };
    const Cfg cfgs[] = {
        {MaskKind::Uniform, 8.0, 8},    {MaskKind::Uniform, 16.0, 4},
        {MaskKind::KtGaussian, 8.0, 8}, {MaskKind::KtGaussian, 16.0, 4},
        {MaskKind::KtGaussian, 24.0, 2}, {MaskKind::Radial, 8.0, 8},
        {MaskKind::Radial, 16.0, 4},    {MaskKind::Radial, 24.0, 2},
    };
    for (const Cfg& c : cfgs) {
        for (uint64_t seed = 0; seed < 20; ++seed) {
            SamplingMask m = make_mask(c.kind, 5, 64, 64, c.target, c.acs, seed);
            double a = m.achieved_accel();
            INFO(mask_kind_name(c.kind) << " target " << c.target << " seed " << seed
                                        << " achieved " << a);
            CHECK(a >= 0.9 * c.target);
            CHECK(a <= 1.1 * c.target);
        }
    }
}

TEST_CASE("radial pattern is symmetric under 180 degree rotation") {
    SamplingMask m = make_mask(MaskKind::Radial, 3, 64, 64, 8.0, 8, 0);
    for (int64_t t = 0; t < 3; ++t) {
        int64_t total = 0, matched = 0;
        for (int64_t r = 0; r < 64; ++r)
            for (int64_t c = 0; c < 64; ++c) {
                if (m.pattern.r(m.pattern.idx3(t, r, c)) != 1.0) continue;
                ++total;
                int64_t rr = 64 - r, rc = 64 - c;
                if (rr < 0 || rr >= 64 || rc < 0 || rc >= 64) continue;
                if (m.pattern.r(m.pattern.idx3(t, rr, rc)) == 1.0) ++matched;
            }
        CHECK(total > 0);
        CHECK(static_cast<double>(matched) / static_cast<double>(total) >= 0.9);
    }
}

TEST_CASE("mask feasibility errors") {
    CHECK_THROWS(make_mask(MaskKind::Uniform, 1, 16, 16, 8.0, 16, 0));  // ACS as wide as grid
    CHECK_THROWS(make_mask(MaskKind::KtGaussian, 1, 64, 64, 16.0, 8, 0));  // ACS alone over budget
    CHECK_THROWS(make_mask(MaskKind::Uniform, 1, 64, 64, 1.5, 4, 0));   // silly target
    CHECK_THROWS(make_mask(MaskKind::Uniform, 1, 64, 64, 8.0, 3, 0));   // odd ACS
}

TEST_CASE("data consistency step") {
    SUBCASE("lambda 0 is the identity") {
        auto rng = make_rng(20, "dc");
        Tensor x = rand_complex({1, 8, 8}, rng);
        Tensor sens = unit_sens(2, 8, 8, 21);
        Tensor mask = random_mask(1, 8, 8, 22);
        Tensor y = forward_encode(rand_complex({1, 8, 8}, rng), sens, mask);
        Tensor reg = Tensor::zeros({1, 8, 8}, Dtype::Complex128);
        Tensor out = data_consistency_step(x, y, sens, mask, 0.0, reg);
        CHECK(bit_equal(out, x));
    }
    SUBCASE("negative lambda is a hard error") {
        Tensor x = Tensor::zeros({1, 8, 8}, Dtype::Complex128);
        Tensor sens = unit_sens(1, 8, 8, 23);
        Tensor mask = ones_mask(1, 8, 8);
        Tensor y = Tensor::zeros({1, 1, 8, 8}, Dtype::Complex128);
        CHECK_THROWS(data_consistency_step(x, y, sens, mask, -0.1, x));
    }
    SUBCASE("consistent x is a fixed point under full sampling") {
        auto rng = make_rng(24, "dcfix");
        Tensor s = Tensor::zeros({1, 8, 8}, Dtype::Complex128);
        for (int64_t i = 0; i < 64; ++i) s.set_c(i, {1.0, 0.0});
        Tensor mask = ones_mask(1, 8, 8);
        Tensor y = forward_encode(rand_complex({1, 8, 8}, rng), s, mask);
        Tensor x = adjoint_encode(y, s);
        Tensor reg = Tensor::zeros({1, 8, 8}, Dtype::Complex128);
        Tensor out = data_consistency_step(x, y, s, mask, 1.0, reg);
        double m = 0.0;
        for (int64_t i = 0; i < x.numel(); ++i) m = std::max(m, std::abs(out.c(i) - x.c(i)));
        CHECK(m / x.max_abs() < 1e-12);
    }
    SUBCASE("random undersampled case matches term-by-term recomputation") {
        auto rng = make_rng(25, "dcterm");
        Tensor x = rand_complex({2, 8, 8}, rng);
        Tensor sens = unit_sens(3, 8, 8, 26);
        Tensor mask = random_mask(2, 8, 8, 27);
        Tensor y = apply_mask(rand_complex({2, 3, 8, 8}, rng), mask);
        Tensor reg = rand_complex({2, 8, 8}, rng, 0.3);
        double lam = 0.37;
        Tensor out = data_consistency_step(x, y, sens, mask, lam, reg);

        Tensor ax = forward_encode(x, sens, mask);
        for (int64_t i = 0; i < ax.numel(); ++i) ax.set_c(i, ax.c(i) - y.c(i));
        Tensor grad = adjoint_encode(apply_mask(ax, mask), sens);
        double worst = 0.0;
        for (int64_t i = 0; i < x.numel(); ++i) {
            cplx want = x.c(i) - lam * (grad.c(i) + reg.c(i));
            worst = std::max(worst, std::abs(out.c(i) - want));
        }
        CHECK(worst / x.max_abs() < 1e-12);
    }
}

TEST_CASE("zero-filled reconstruction") {
    SUBCASE("fully sampled data reproduces the ground-truth magnitude") {
        auto rng = make_rng(30, "zf");
        Tensor gt = rand_complex({2, 16, 16}, rng);
        Tensor sens = unit_sens(4, 16, 16, 31);
        Tensor y = forward_encode(gt, sens, ones_mask(2, 16, 16));
        Tensor zf = zero_filled_recon(y);
        double worst = 0.0;
        for (int64_t i = 0; i < gt.numel(); ++i)
            worst = std::max(worst, std::abs(zf.r(i) - std::abs(gt.c(i))));
        CHECK(worst < 1e-10);
    }
    SUBCASE("zero data gives a zero image") {
        Tensor y = Tensor::zeros({1, 2, 8, 8}, Dtype::Complex128);
        CHECK(zero_filled_recon(y).max_abs() == 0.0);
    }
}
