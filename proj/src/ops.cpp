#include "hamr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "hamr/fft.hpp"
#include "hamr/kspace.hpp"

namespace hamr::diff {

namespace {

Tape& tape_of(const Var& v) {
    ensure(v.ok(), "op on an invalid Var");
    return *v.tape;
}

void same_tape(const Var& a, const Var& b) {
    ensure(a.ok() && b.ok() && a.tape == b.tape, "operands live on different tapes");
}

// Store-level helpers. Complex tensors are interleaved doubles, so adding or
// scaling the raw store is the correct complex operation as long as the
// factor is real.
void acc(Tensor& dst, const Tensor& src, double k = 1.0) {
    ensure(dst.store_size() == src.store_size(), "gradient accumulate: store mismatch");
    double* d = dst.data();
    const double* s = src.data();
    size_t n = dst.store_size();
    for (size_t i = 0; i < n; ++i) d[i] += k * s[i];
}

bool any_rg(const Var& a) { return a.requires_grad(); }
bool any_rg(const Var& a, const Var& b) { return a.requires_grad() || b.requires_grad(); }

}  // namespace

Var add(Var a, Var b) {
    same_tape(a, b);
    Tape& t = tape_of(a);
    const Tensor& va = a.val();
    const Tensor& vb = b.val();
    ensure(va.same_shape(vb) && va.dtype() == vb.dtype(), "add: shape/dtype mismatch");
    Tensor out = va;
    acc(out, vb);
    int64_t ia = a.id, ib = b.id;
    return t.record(std::move(out), any_rg(a, b), [ia, ib](Tape& tp, int64_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(ia)) acc(tp.grad_accum(ia), g);
        if (tp.requires_grad(ib)) acc(tp.grad_accum(ib), g);
    });
}

Var sub(Var a, Var b) {
    same_tape(a, b);
    Tape& t = tape_of(a);
    const Tensor& va = a.val();
    const Tensor& vb = b.val();
    ensure(va.same_shape(vb) && va.dtype() == vb.dtype(), "sub: shape/dtype mismatch");
    Tensor out = va;
    acc(out, vb, -1.0);
    int64_t ia = a.id, ib = b.id;
    return t.record(std::move(out), any_rg(a, b), [ia, ib](Tape& tp, int64_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(ia)) acc(tp.grad_accum(ia), g);
        if (tp.requires_grad(ib)) acc(tp.grad_accum(ib), g, -1.0);
    });
}

Var mul(Var a, Var b) {
    same_tape(a, b);
    Tape& t = tape_of(a);
    const Tensor& va = a.val();
    const Tensor& vb = b.val();
    ensure(va.same_shape(vb) && va.dtype() == vb.dtype(), "mul: shape/dtype mismatch");
    Tensor out(va.shape(), va.dtype());
    int64_t n = va.numel();
    if (va.is_complex()) {
        const cplx* pa = va.cdata();
        const cplx* pb = vb.cdata();
        cplx* po = out.cdata();
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    } else {
        const double* pa = va.data();
        const double* pb = vb.data();
        double* po = out.data();
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    }
    int64_t ia = a.id, ib = b.id;
    return t.record(std::move(out), any_rg(a, b), [ia, ib](Tape& tp, int64_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& va2 = tp.val(ia);
        const Tensor& vb2 = tp.val(ib);
        int64_t n2 = va2.numel();
        if (va2.is_complex()) {
            // d/da of a*b with g = dL/dRe + i dL/dIm gives conj(b) * g.
            const cplx* pg = g.cdata();
            if (tp.requires_grad(ia)) {
                cplx* ga = tp.grad_accum(ia).cdata();
                const cplx* pb2 = vb2.cdata();
                for (int64_t i = 0; i < n2; ++i) ga[i] += std::conj(pb2[i]) * pg[i];
            }
            if (tp.requires_grad(ib)) {
                cplx* gb = tp.grad_accum(ib).cdata();
                const cplx* pa2 = va2.cdata();
                for (int64_t i = 0; i < n2; ++i) gb[i] += std::conj(pa2[i]) * pg[i];
            }
        } else {
            const double* pg = g.data();
            if (tp.requires_grad(ia)) {
                double* ga = tp.grad_accum(ia).data();
                const double* pb2 = vb2.data();
                for (int64_t i = 0; i < n2; ++i) ga[i] += pb2[i] * pg[i];
            }
            if (tp.requires_grad(ib)) {
                double* gb = tp.grad_accum(ib).data();
                const double* pa2 = va2.data();
                for (int64_t i = 0; i < n2; ++i) gb[i] += pa2[i] * pg[i];
            }
        }
    });
}

Var div(Var a, Var b) {
    same_tape(a, b);
    Tape& t = tape_of(a);
    const Tensor& va = a.val();
    const Tensor& vb = b.val();
    ensure(!va.is_complex() && !vb.is_complex(), "div: real tensors only");
    ensure(va.same_shape(vb), "div: shape mismatch");
    Tensor out(va.shape(), Dtype::Real64);
    int64_t n = va.numel();
    for (int64_t i = 0; i < n; ++i) out.r(i) = va.r(i) / vb.r(i);
    int64_t ia = a.id, ib = b.id;
    return t.record(std::move(out), any_rg(a, b), [ia, ib](Tape& tp, int64_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& w = tp.val(self);
        const Tensor& vb2 = tp.val(ib);
        int64_t n2 = g.numel();
        if (tp.requires_grad(ia)) {
            Tensor& ga = tp.grad_accum(ia);
            for (int64_t i = 0; i < n2; ++i) ga.r(i) += g.r(i) / vb2.r(i);
        }
        if (tp.requires_grad(ib)) {
            Tensor& gb = tp.grad_accum(ib);
            for (int64_t i = 0; i < n2; ++i) gb.r(i) -= g.r(i) * w.r(i) / vb2.r(i);
        }
    });
}

Var scale(Var x, double k) {
    Tape& t = tape_of(x);
    Tensor out = x.val();
    double* d = out.data();
    for (size_t i = 0; i < out.store_size(); ++i) d[i] *= k;
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, k](Tape& tp, int64_t self) {
        if (tp.requires_grad(ix)) acc(tp.grad_accum(ix), tp.grad(self), k);
    });
}

Var add_scalar(Var x, double k) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(!vx.is_complex(), "add_scalar: real input expected");
    Tensor out = vx;
    for (int64_t i = 0; i < out.numel(); ++i) out.r(i) += k;
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix](Tape& tp, int64_t self) {
        if (tp.requires_grad(ix)) acc(tp.grad_accum(ix), tp.grad(self));
    });
}

Var neg(Var x) { return scale(x, -1.0); }

Var scale_by(Var x, Var s) {
    same_tape(x, s);
    Tape& t = tape_of(x);
    const Tensor& vs = s.val();
    ensure(!vs.is_complex() && vs.numel() == 1, "scale_by: scalar factor must be a real scalar");
    double k = vs.r(0);
    Tensor out = x.val();
    double* d = out.data();
    for (size_t i = 0; i < out.store_size(); ++i) d[i] *= k;
    int64_t ix = x.id, is = s.id;
    return t.record(std::move(out), any_rg(x, s), [ix, is](Tape& tp, int64_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& vx = tp.val(ix);
        double k2 = tp.val(is).r(0);
        if (tp.requires_grad(ix)) acc(tp.grad_accum(ix), g, k2);
        if (tp.requires_grad(is)) {
            // dL/ds = sum Re(g * conj(x)); for real x this is sum(g*x).
            double s_acc = 0.0;
            const double* pg = g.data();
            const double* px = vx.data();
            for (size_t i = 0; i < g.store_size(); ++i) s_acc += pg[i] * px[i];
            tp.grad_accum(is).r(0) += s_acc;
        }
    });
}

Var sub_bcast(Var x, Var s) {
    same_tape(x, s);
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    const Tensor& vs = s.val();
    ensure(!vx.is_complex() && !vs.is_complex() && vs.numel() == 1,
           "sub_bcast: real tensor minus real scalar");
    Tensor out = vx;
    double k = vs.r(0);
    for (int64_t i = 0; i < out.numel(); ++i) out.r(i) -= k;
    int64_t ix = x.id, is = s.id;
    return t.record(std::move(out), any_rg(x, s), [ix, is](Tape& tp, int64_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(ix)) acc(tp.grad_accum(ix), g);
        if (tp.requires_grad(is)) tp.grad_accum(is).r(0) -= g.sum_real();
    });
}

Var div_bcast_safe(Var x, Var den, double floor) {
    same_tape(x, den);
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    const Tensor& vd = den.val();
    ensure(!vx.is_complex() && !vd.is_complex() && vd.numel() == 1,
           "div_bcast_safe: real tensor over real scalar");
    ensure(floor > 0.0, "div_bcast_safe: floor must be positive");
    double m = std::max(vd.r(0), floor);
    Tensor out = vx;
    for (int64_t i = 0; i < out.numel(); ++i) out.r(i) /= m;
    int64_t ix = x.id, id = den.id;
    return t.record(std::move(out), any_rg(x, den), [ix, id, floor](Tape& tp, int64_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& w = tp.val(self);
        double dval = tp.val(id).r(0);
        double m2 = std::max(dval, floor);
        if (tp.requires_grad(ix)) acc(tp.grad_accum(ix), g, 1.0 / m2);
        if (tp.requires_grad(id) && dval > floor) {
            double s_acc = 0.0;
            for (int64_t i = 0; i < g.numel(); ++i) s_acc += g.r(i) * w.r(i);
            tp.grad_accum(id).r(0) -= s_acc / m2;
        }
    });
}

namespace {

template <typename Fwd, typename Dfn>
Var unary_real(Var x, const char* name, Fwd f, Dfn dfdx_from) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(!vx.is_complex(), std::string(name) + ": real input expected");
    Tensor out(vx.shape(), Dtype::Real64);
    for (int64_t i = 0; i < vx.numel(); ++i) out.r(i) = f(vx.r(i));
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, dfdx_from](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& g = tp.grad(self);
        const Tensor& vx2 = tp.val(ix);
        const Tensor& w = tp.val(self);
        Tensor& gx = tp.grad_accum(ix);
        for (int64_t i = 0; i < g.numel(); ++i)
            gx.r(i) += g.r(i) * dfdx_from(vx2.r(i), w.r(i));
    });
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

}  // namespace

Var relu(Var x) {
    return unary_real(
        x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var tanh_op(Var x) {
    return unary_real(
        x, "tanh", [](double v) { return std::tanh(v); },
        [](double, double w) { return 1.0 - w * w; });
}

Var sigmoid(Var x) {
    return unary_real(
        x, "sigmoid", [](double v) { return stable_sigmoid(v); },
        [](double, double w) { return w * (1.0 - w); });
}

Var softplus(Var x) {
    return unary_real(
        x, "softplus", [](double v) { return stable_softplus(v); },
        [](double v, double) { return stable_sigmoid(v); });
}

Var exp_op(Var x) {
    return unary_real(
        x, "exp", [](double v) { return std::exp(v); },
        [](double, double w) { return w; });
}

Var log1p_op(Var x) {
    const Tensor& vx = x.val();
    ensure(!vx.is_complex(), "log1p: real input expected");
    for (int64_t i = 0; i < vx.numel(); ++i)
        ensure(vx.r(i) > -1.0, "log1p: input must stay above -1");
    return unary_real(
        x, "log1p", [](double v) { return std::log1p(v); },
        [](double v, double) { return 1.0 / (1.0 + v); });
}

Var abs_op(Var x) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    Tensor out(vx.shape(), Dtype::Real64);
    int64_t n = vx.numel();
    if (vx.is_complex()) {
        const cplx* p = vx.cdata();
        for (int64_t i = 0; i < n; ++i) out.r(i) = std::abs(p[i]);
    } else {
        for (int64_t i = 0; i < n; ++i) out.r(i) = std::abs(vx.r(i));
    }
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& g = tp.grad(self);
        const Tensor& vx2 = tp.val(ix);
        const Tensor& w = tp.val(self);
        Tensor& gx = tp.grad_accum(ix);
        int64_t n2 = g.numel();
        if (vx2.is_complex()) {
            cplx* pg = gx.cdata();
            const cplx* px = vx2.cdata();
            for (int64_t i = 0; i < n2; ++i) {
                double m = w.r(i);
                if (m > 0.0) pg[i] += (g.r(i) / m) * px[i];
            }
        } else {
            for (int64_t i = 0; i < n2; ++i) {
                double v = vx2.r(i);
                double sgn = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                gx.r(i) += g.r(i) * sgn;
            }
        }
    });
}

Var sum(Var x) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(!vx.is_complex(), "sum: real input expected");
    Tensor out = Tensor::scalar(vx.sum_real());
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        double g = tp.grad(self).r(0);
        Tensor& gx = tp.grad_accum(ix);
        for (int64_t i = 0; i < gx.numel(); ++i) gx.r(i) += g;
    });
}

Var mean(Var x) {
    const Tensor& vx = x.val();
    return scale(sum(x), 1.0 / static_cast<double>(vx.numel()));
}

namespace {

Var reduce_extreme(Var x, bool want_max) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(!vx.is_complex(), "reduce_max/min: real input expected");
    int64_t best = 0;
    for (int64_t i = 1; i < vx.numel(); ++i) {
        if (want_max ? vx.r(i) > vx.r(best) : vx.r(i) < vx.r(best)) best = i;
    }
    Tensor out = Tensor::scalar(vx.r(best));
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, best](Tape& tp, int64_t self) {
        if (tp.requires_grad(ix)) tp.grad_accum(ix).r(best) += tp.grad(self).r(0);
    });
}

}  // namespace

Var reduce_max(Var x) { return reduce_extreme(x, true); }
Var reduce_min(Var x) { return reduce_extreme(x, false); }

Var index_scalar(Var x, int64_t i) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(!vx.is_complex(), "index_scalar: real input expected");
    ensure(i >= 0 && i < vx.numel(), "index_scalar: index out of range");
    Tensor out = Tensor::scalar(vx.r(i));
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, i](Tape& tp, int64_t self) {
        if (tp.requires_grad(ix)) tp.grad_accum(ix).r(i) += tp.grad(self).r(0);
    });
}

Var concat_channels(Var a, Var b) {
    same_tape(a, b);
    Tape& t = tape_of(a);
    const Tensor& va = a.val();
    const Tensor& vb = b.val();
    ensure(!va.is_complex() && !vb.is_complex(), "concat_channels: real NCHW expected");
    ensure(va.rank() == 4 && vb.rank() == 4, "concat_channels: rank-4 tensors expected");
    ensure(va.dim(0) == vb.dim(0) && va.dim(2) == vb.dim(2) && va.dim(3) == vb.dim(3),
           "concat_channels: N/H/W mismatch");
    int64_t N = va.dim(0), Ca = va.dim(1), Cb = vb.dim(1), H = va.dim(2), W = va.dim(3);
    Tensor out({N, Ca + Cb, H, W}, Dtype::Real64);
    int64_t hw = H * W;
    for (int64_t n = 0; n < N; ++n) {
        std::copy(va.data() + n * Ca * hw, va.data() + (n + 1) * Ca * hw,
                  out.data() + n * (Ca + Cb) * hw);
        std::copy(vb.data() + n * Cb * hw, vb.data() + (n + 1) * Cb * hw,
                  out.data() + (n * (Ca + Cb) + Ca) * hw);
    }
    int64_t ia = a.id, ib = b.id;
    return t.record(std::move(out), any_rg(a, b), [ia, ib, N, Ca, Cb, hw](Tape& tp, int64_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(ia)) {
            Tensor& ga = tp.grad_accum(ia);
            for (int64_t n = 0; n < N; ++n) {
                const double* src = g.data() + n * (Ca + Cb) * hw;
                double* dst = ga.data() + n * Ca * hw;
                for (int64_t i = 0; i < Ca * hw; ++i) dst[i] += src[i];
            }
        }
        if (tp.requires_grad(ib)) {
            Tensor& gb = tp.grad_accum(ib);
            for (int64_t n = 0; n < N; ++n) {
                const double* src = g.data() + (n * (Ca + Cb) + Ca) * hw;
                double* dst = gb.data() + n * Cb * hw;
                for (int64_t i = 0; i < Cb * hw; ++i) dst[i] += src[i];
            }
        }
    });
}

Var slice_channels(Var x, int64_t start, int64_t count) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(!vx.is_complex() && vx.rank() == 4, "slice_channels: real NCHW expected");
    int64_t N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    ensure(start >= 0 && count >= 1 && start + count <= C, "slice_channels: range out of bounds");
    Tensor out({N, count, H, W}, Dtype::Real64);
    int64_t hw = H * W;
    for (int64_t n = 0; n < N; ++n)
        std::copy(vx.data() + (n * C + start) * hw, vx.data() + (n * C + start + count) * hw,
                  out.data() + n * count * hw);
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, start, count, N, C, hw](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad_accum(ix);
        for (int64_t n = 0; n < N; ++n) {
            const double* src = g.data() + n * count * hw;
            double* dst = gx.data() + (n * C + start) * hw;
            for (int64_t i = 0; i < count * hw; ++i) dst[i] += src[i];
        }
    });
}

Var avg_pool2d(Var x, int64_t k) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(!vx.is_complex() && vx.rank() == 4, "avg_pool2d: real NCHW expected");
    ensure(k >= 1, "avg_pool2d: window must be positive");
    int64_t N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    ensure(H % k == 0 && W % k == 0, "avg_pool2d: dims must be divisible by the window");
    int64_t Ho = H / k, Wo = W / k;
    Tensor out({N, C, Ho, Wo}, Dtype::Real64);
    double inv = 1.0 / static_cast<double>(k * k);
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* in = vx.data() + nc * H * W;
        double* o = out.data() + nc * Ho * Wo;
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                double s = 0.0;
                for (int64_t dy = 0; dy < k; ++dy)
                    for (int64_t dx = 0; dx < k; ++dx)
                        s += in[(oy * k + dy) * W + ox * k + dx];
                o[oy * Wo + ox] = s * inv;
            }
    }
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, k, N, C, H, W, Ho, Wo, inv](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad_accum(ix);
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const double* go = g.data() + nc * Ho * Wo;
            double* gi = gx.data() + nc * H * W;
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t ox = 0; ox < Wo; ++ox) {
                    double v = go[oy * Wo + ox] * inv;
                    for (int64_t dy = 0; dy < k; ++dy)
                        for (int64_t dx = 0; dx < k; ++dx)
                            gi[(oy * k + dy) * W + ox * k + dx] += v;
                }
        }
    });
}

Var reshape(Var x, std::vector<int64_t> shape) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(shape_numel(shape) == vx.numel(), "reshape: element count mismatch");
    Tensor out(shape, vx.dtype());
    std::copy(vx.data(), vx.data() + vx.store_size(), out.data());
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        acc(tp.grad_accum(ix), tp.grad(self), 1.0);
    });
}

Var slice_frame(Var x, int64_t tt) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(vx.rank() >= 1, "slice_frame: rank >= 1 expected");
    int64_t T = vx.dim(0);
    ensure(tt >= 0 && tt < T, "slice_frame: index out of range");
    std::vector<int64_t> oshape = vx.shape();
    oshape[0] = 1;
    Tensor out(oshape, vx.dtype());
    size_t slots = vx.store_size() / T;
    std::copy(vx.data() + tt * slots, vx.data() + (tt + 1) * slots, out.data());
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, tt, slots](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const double* g = tp.grad(self).data();
        double* gx = tp.grad_accum(ix).data() + tt * slots;
        for (size_t i = 0; i < slots; ++i) gx[i] += g[i];
    });
}

Var real_to_complex(Var x) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(!vx.is_complex(), "real_to_complex: real input expected");
    Tensor out = vx.to_complex();
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const cplx* g = tp.grad(self).cdata();
        double* gx = tp.grad_accum(ix).data();
        for (int64_t i = 0; i < tp.grad(self).numel(); ++i) gx[i] += g[i].real();
    });
}

Var complex_to_channels(Var x) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(vx.is_complex() && vx.rank() == 3, "complex_to_channels: complex [T,H,W] expected");
    int64_t T = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    Tensor out({T, 2, H, W}, Dtype::Real64);
    const cplx* p = vx.cdata();
    for (int64_t tt = 0; tt < T; ++tt)
        for (int64_t i = 0; i < H * W; ++i) {
            cplx v = p[tt * H * W + i];
            out.data()[(tt * 2 + 0) * H * W + i] = v.real();
            out.data()[(tt * 2 + 1) * H * W + i] = v.imag();
        }
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, T, H, W](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& g = tp.grad(self);
        cplx* gx = tp.grad_accum(ix).cdata();
        for (int64_t tt = 0; tt < T; ++tt)
            for (int64_t i = 0; i < H * W; ++i)
                gx[tt * H * W + i] += cplx{g.data()[(tt * 2 + 0) * H * W + i],
                                           g.data()[(tt * 2 + 1) * H * W + i]};
    });
}

Var channels_to_complex(Var x) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(!vx.is_complex() && vx.rank() == 4 && vx.dim(1) == 2,
           "channels_to_complex: real [T,2,H,W] expected");
    int64_t T = vx.dim(0), H = vx.dim(2), W = vx.dim(3);
    Tensor out({T, H, W}, Dtype::Complex128);
    cplx* p = out.cdata();
    for (int64_t tt = 0; tt < T; ++tt)
        for (int64_t i = 0; i < H * W; ++i)
            p[tt * H * W + i] = cplx{vx.data()[(tt * 2 + 0) * H * W + i],
                                     vx.data()[(tt * 2 + 1) * H * W + i]};
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, T, H, W](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& g = tp.grad(self);
        const cplx* pg = g.cdata();
        Tensor& gx = tp.grad_accum(ix);
        for (int64_t tt = 0; tt < T; ++tt)
            for (int64_t i = 0; i < H * W; ++i) {
                gx.data()[(tt * 2 + 0) * H * W + i] += pg[tt * H * W + i].real();
                gx.data()[(tt * 2 + 1) * H * W + i] += pg[tt * H * W + i].imag();
            }
    });
}

Var temporal_neighbor_channels(Var x, int64_t radius) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(vx.is_complex() && vx.rank() == 3, "temporal_neighbor_channels: complex [T,H,W] expected");
    ensure(radius >= 0, "temporal_neighbor_channels: radius must be nonnegative");
    int64_t T = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    int64_t K = 2 * radius + 1;
    Tensor out({T, 2 * K, H, W}, Dtype::Real64);
    const cplx* p = vx.cdata();
    int64_t hw = H * W;
    for (int64_t tt = 0; tt < T; ++tt)
        for (int64_t d = -radius; d <= radius; ++d) {
            int64_t src = ((tt + d) % T + T) % T;
            int64_t ch = 2 * (d + radius);
            double* o_re = out.data() + (tt * 2 * K + ch) * hw;
            double* o_im = out.data() + (tt * 2 * K + ch + 1) * hw;
            const cplx* s = p + src * hw;
            for (int64_t i = 0; i < hw; ++i) {
                o_re[i] = s[i].real();
                o_im[i] = s[i].imag();
            }
        }
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, radius, T, hw, K](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& g = tp.grad(self);
        cplx* gx = tp.grad_accum(ix).cdata();
        for (int64_t tt = 0; tt < T; ++tt)
            for (int64_t d = -radius; d <= radius; ++d) {
                int64_t src = ((tt + d) % T + T) % T;
                int64_t ch = 2 * (d + radius);
                const double* g_re = g.data() + (tt * 2 * K + ch) * hw;
                const double* g_im = g.data() + (tt * 2 * K + ch + 1) * hw;
                cplx* dst = gx + src * hw;
                for (int64_t i = 0; i < hw; ++i) dst[i] += cplx{g_re[i], g_im[i]};
            }
    });
}

namespace {

struct ConvDims {
    int64_t N, Ci, H, W, Co, k, pad, Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int64_t stride, int64_t pad) {
    ensure(!x.is_complex() && !w.is_complex(), "conv2d: real tensors expected");
    ensure(x.rank() == 4 && w.rank() == 4, "conv2d: NCHW input and OCkk weight expected");
    ensure(w.dim(2) == w.dim(3), "conv2d: square kernels only");
    ensure(w.dim(2) % 2 == 1, "conv2d: kernel size must be odd");
    ensure(x.dim(1) == w.dim(1), "conv2d: input channels do not match weight");
    ensure(stride == 1, "conv2d: only stride 1 is supported");
    ConvDims d{};
    d.N = x.dim(0);
    d.Ci = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Co = w.dim(0);
    d.k = w.dim(2);
    d.pad = pad;
    ensure(pad >= 0 && pad <= d.k / 2, "conv2d: pad out of range");
    d.Ho = d.H + 2 * pad - d.k + 1;
    d.Wo = d.W + 2 * pad - d.k + 1;
    ensure(d.Ho >= 1 && d.Wo >= 1, "conv2d: output would be empty");
    return d;
}

// Forward accumulation arranged so the inner loop is a contiguous saxpy
// over output columns.
void conv_forward(const ConvDims& d, const double* x, const double* w,
                  const double* bias, double* out) {
    for (int64_t n = 0; n < d.N; ++n)
        for (int64_t co = 0; co < d.Co; ++co) {
            double* o = out + (n * d.Co + co) * d.Ho * d.Wo;
            double b = bias ? bias[co] : 0.0;
            for (int64_t i = 0; i < d.Ho * d.Wo; ++i) o[i] = b;
            for (int64_t ci = 0; ci < d.Ci; ++ci) {
                const double* in = x + (n * d.Ci + ci) * d.H * d.W;
                for (int64_t ky = 0; ky < d.k; ++ky)
                    for (int64_t kx = 0; kx < d.k; ++kx) {
                        double wv = w[((co * d.Ci + ci) * d.k + ky) * d.k + kx];
                        if (wv == 0.0) continue;
                        int64_t x0 = std::max<int64_t>(0, d.pad - kx);
                        int64_t x1 = std::min(d.Wo, d.W + d.pad - kx);
                        for (int64_t oy = 0; oy < d.Ho; ++oy) {
                            int64_t iy = oy + ky - d.pad;
                            if (iy < 0 || iy >= d.H) continue;
                            const double* irow = in + iy * d.W + (x0 + kx - d.pad);
                            double* orow = o + oy * d.Wo + x0;
                            for (int64_t i = 0; i < x1 - x0; ++i) orow[i] += wv * irow[i];
                        }
                    }
            }
        }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, int64_t stride, int64_t pad) {
    same_tape(x, w);
    bool has_bias = b.ok();
    if (has_bias) same_tape(x, b);
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    const Tensor& vw = w.val();
    ConvDims d = conv_dims(vx, vw, stride, pad);
    const double* bias = nullptr;
    if (has_bias) {
        const Tensor& vb = b.val();
        ensure(!vb.is_complex() && vb.numel() == d.Co, "conv2d: bias must be [O]");
        bias = vb.data();
    }
    Tensor out({d.N, d.Co, d.Ho, d.Wo}, Dtype::Real64);
    conv_forward(d, vx.data(), vw.data(), bias, out.data());
    int64_t ix = x.id, iw = w.id, ib = has_bias ? b.id : -1;
    return t.record(std::move(out), has_bias ? (any_rg(x, w) || b.requires_grad()) : any_rg(x, w),
                    [ix, iw, ib, d](Tape& tp, int64_t self) {
        const Tensor& g = tp.grad(self);
        const double* go = g.data();
        if (ib >= 0 && tp.requires_grad(ib)) {
            Tensor& gb = tp.grad_accum(ib);
            for (int64_t n = 0; n < d.N; ++n)
                for (int64_t co = 0; co < d.Co; ++co) {
                    const double* gslice = go + (n * d.Co + co) * d.Ho * d.Wo;
                    double s = 0.0;
                    for (int64_t i = 0; i < d.Ho * d.Wo; ++i) s += gslice[i];
                    gb.r(co) += s;
                }
        }
        if (tp.requires_grad(iw)) {
            const double* in = tp.val(ix).data();
            Tensor& gw = tp.grad_accum(iw);
            double* gwp = gw.data();
            for (int64_t n = 0; n < d.N; ++n)
                for (int64_t co = 0; co < d.Co; ++co) {
                    const double* gslice = go + (n * d.Co + co) * d.Ho * d.Wo;
                    for (int64_t ci = 0; ci < d.Ci; ++ci) {
                        const double* islice = in + (n * d.Ci + ci) * d.H * d.W;
                        for (int64_t ky = 0; ky < d.k; ++ky)
                            for (int64_t kx = 0; kx < d.k; ++kx) {
                                int64_t x0 = std::max<int64_t>(0, d.pad - kx);
                                int64_t x1 = std::min(d.Wo, d.W + d.pad - kx);
                                double s = 0.0;
                                for (int64_t oy = 0; oy < d.Ho; ++oy) {
                                    int64_t iy = oy + ky - d.pad;
                                    if (iy < 0 || iy >= d.H) continue;
                                    const double* irow = islice + iy * d.W + (x0 + kx - d.pad);
                                    const double* grow = gslice + oy * d.Wo + x0;
                                    for (int64_t i = 0; i < x1 - x0; ++i) s += grow[i] * irow[i];
                                }
                                gwp[((co * d.Ci + ci) * d.k + ky) * d.k + kx] += s;
                            }
                    }
                }
        }
        if (tp.requires_grad(ix)) {
            const double* wp = tp.val(iw).data();
            Tensor& gx = tp.grad_accum(ix);
            double* gi = gx.data();
            for (int64_t n = 0; n < d.N; ++n)
                for (int64_t co = 0; co < d.Co; ++co) {
                    const double* gslice = go + (n * d.Co + co) * d.Ho * d.Wo;
                    for (int64_t ci = 0; ci < d.Ci; ++ci) {
                        double* gislice = gi + (n * d.Ci + ci) * d.H * d.W;
                        for (int64_t ky = 0; ky < d.k; ++ky)
                            for (int64_t kx = 0; kx < d.k; ++kx) {
                                double wv = wp[((co * d.Ci + ci) * d.k + ky) * d.k + kx];
                                if (wv == 0.0) continue;
                                int64_t x0 = std::max<int64_t>(0, d.pad - kx);
                                int64_t x1 = std::min(d.Wo, d.W + d.pad - kx);
                                for (int64_t oy = 0; oy < d.Ho; ++oy) {
                                    int64_t iy = oy + ky - d.pad;
                                    if (iy < 0 || iy >= d.H) continue;
                                    double* girow = gislice + iy * d.W + (x0 + kx - d.pad);
                                    const double* grow = gslice + oy * d.Wo + x0;
                                    for (int64_t i = 0; i < x1 - x0; ++i) girow[i] += wv * grow[i];
                                }
                            }
                    }
                }
        }
    });
}

Var conv2d(Var x, Var w, int64_t stride, int64_t pad) {
    return conv2d(x, w, Var{}, stride, pad);
}

Var instance_norm(Var x, double eps) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(!vx.is_complex() && vx.rank() == 4, "instance_norm: real NCHW expected");
    ensure(eps > 0.0, "instance_norm: eps must be positive");
    int64_t NC = vx.dim(0) * vx.dim(1);
    int64_t hw = vx.dim(2) * vx.dim(3);
    Tensor out(vx.shape(), Dtype::Real64);
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(NC));
    for (int64_t s = 0; s < NC; ++s) {
        const double* in = vx.data() + s * hw;
        double* o = out.data() + s * hw;
        double mu = 0.0;
        for (int64_t i = 0; i < hw; ++i) mu += in[i];
        mu /= static_cast<double>(hw);
        double var = 0.0;
        for (int64_t i = 0; i < hw; ++i) {
            double dif = in[i] - mu;
            var += dif * dif;
        }
        var /= static_cast<double>(hw);
        double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(s)] = inv;
        for (int64_t i = 0; i < hw; ++i) o[i] = (in[i] - mu) * inv;
    }
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, NC, hw, inv_std](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& g = tp.grad(self);
        const Tensor& xhat = tp.val(self);
        Tensor& gx = tp.grad_accum(ix);
        for (int64_t s = 0; s < NC; ++s) {
            const double* gp = g.data() + s * hw;
            const double* hp = xhat.data() + s * hw;
            double* gi = gx.data() + s * hw;
            double gmean = 0.0, ghmean = 0.0;
            for (int64_t i = 0; i < hw; ++i) {
                gmean += gp[i];
                ghmean += gp[i] * hp[i];
            }
            gmean /= static_cast<double>(hw);
            ghmean /= static_cast<double>(hw);
            double inv = (*inv_std)[static_cast<size_t>(s)];
            for (int64_t i = 0; i < hw; ++i)
                gi[i] += inv * (gp[i] - gmean - hp[i] * ghmean);
        }
    });
}

Var softmax_vec(Var x) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    ensure(!vx.is_complex() && vx.rank() == 1, "softmax_vec: real 1-D input expected");
    int64_t n = vx.numel();
    Tensor out(vx.shape(), Dtype::Real64);
    double mx = vx.max_value();
    double z = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double e = std::exp(vx.r(i) - mx);
        out.r(i) = e;
        z += e;
    }
    for (int64_t i = 0; i < n; ++i) out.r(i) /= z;
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, n](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& g = tp.grad(self);
        const Tensor& y = tp.val(self);
        Tensor& gx = tp.grad_accum(ix);
        double dot = 0.0;
        for (int64_t i = 0; i < n; ++i) dot += g.r(i) * y.r(i);
        for (int64_t i = 0; i < n; ++i) gx.r(i) += y.r(i) * (g.r(i) - dot);
    });
}

namespace {

void batched_fft2(const Tensor& in, Tensor& out, bool inverse) {
    ensure(in.is_complex() && in.rank() >= 2, "fft2: complex tensor with spatial dims expected");
    int64_t W = in.dim(in.rank() - 1);
    int64_t H = in.dim(in.rank() - 2);
    ensure(fft::is_pow2(H) && fft::is_pow2(W), "fft2: spatial dims must be powers of two");
    int64_t batch = in.numel() / (H * W);
    for (int64_t bidx = 0; bidx < batch; ++bidx) {
        const cplx* src = in.cdata() + bidx * H * W;
        cplx* dst = out.cdata() + bidx * H * W;
        if (inverse)
            fft::ifft2_centered(src, dst, H, W);
        else
            fft::fft2_centered(src, dst, H, W);
    }
}

Var fft2_dir(Var x, bool inverse) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    Tensor out(vx.shape(), Dtype::Complex128);
    batched_fft2(vx, out, inverse);
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, inverse](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& g = tp.grad(self);
        Tensor tmp(g.shape(), Dtype::Complex128);
        batched_fft2(g, tmp, !inverse);
        acc(tp.grad_accum(ix), tmp);
    });
}

}  // namespace

Var fft2_op(Var x) { return fft2_dir(x, false); }
Var ifft2_op(Var x) { return fft2_dir(x, true); }

namespace {

void check_encode_shapes(const Tensor& x, const Tensor& sens, const Tensor* mask) {
    ensure(x.is_complex() && x.rank() == 3, "encode: complex image [T,H,W] expected");
    ensure(sens.is_complex() && sens.rank() == 3, "encode: sensitivities [C,H,W] expected");
    ensure(sens.dim(1) == x.dim(1) && sens.dim(2) == x.dim(2), "encode: sensitivity grid mismatch");
    if (mask) {
        ensure(!mask->is_complex() && mask->rank() == 3, "encode: mask [T,H,W] expected");
        ensure(mask->dim(0) == x.dim(0) && mask->dim(1) == x.dim(1) && mask->dim(2) == x.dim(2),
               "encode: mask grid mismatch");
    }
}

}  // namespace

Var encode_op(Var x, const Tensor& sens, const Tensor& mask) {
    Tape& t = tape_of(x);
    const Tensor& vx = x.val();
    check_encode_shapes(vx, sens, &mask);
    Tensor out = kspace::forward_encode(vx, sens, mask);
    auto sens_p = std::make_shared<Tensor>(sens);
    auto mask_p = std::make_shared<Tensor>(mask);
    int64_t ix = x.id;
    return t.record(std::move(out), any_rg(x), [ix, sens_p, mask_p](Tape& tp, int64_t self) {
        if (!tp.requires_grad(ix)) return;
        // adjoint of M F S is S^H F^-1 M
        Tensor back = kspace::adjoint_encode(kspace::apply_mask(tp.grad(self), *mask_p), *sens_p);
        acc(tp.grad_accum(ix), back);
    });
}

Var adjoint_op(Var y, const Tensor& sens) {
    Tape& t = tape_of(y);
    const Tensor& vy = y.val();
    ensure(vy.is_complex() && vy.rank() == 4, "adjoint: k-space [T,C,H,W] expected");
    Tensor out = kspace::coil_combine_ifft(vy, sens);
    auto sens_p = std::make_shared<Tensor>(sens);
    int64_t iy = y.id;
    return t.record(std::move(out), any_rg(y), [iy, sens_p](Tape& tp, int64_t self) {
        if (!tp.requires_grad(iy)) return;
        Tensor back = kspace::coil_expand_fft(tp.grad(self), *sens_p);
        acc(tp.grad_accum(iy), back);
    });
}

Var mask_mul(Var y, const Tensor& mask) {
    Tape& t = tape_of(y);
    Tensor out = kspace::apply_mask(y.val(), mask);
    auto mask_p = std::make_shared<Tensor>(mask);
    int64_t iy = y.id;
    return t.record(std::move(out), any_rg(y), [iy, mask_p](Tape& tp, int64_t self) {
        if (!tp.requires_grad(iy)) return;
        // the mask is real and diagonal, so it is its own adjoint
        Tensor back = kspace::apply_mask(tp.grad(self), *mask_p);
        acc(tp.grad_accum(iy), back);
    });
}

}  // namespace hamr::diff
