#pragma once

#include "hamr/tape.hpp"

namespace hamr::diff {

// Elementwise binary ops, same shape. add/sub/mul accept real or complex
// operands (both sides the same dtype); div is real-only.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

// Scalar broadcasts. scale/add_scalar take compile-time constants; the *_by
// variants take a real scalar Var so the factor stays differentiable.
Var scale(Var x, double k);
Var add_scalar(Var x, double k);          // real x
Var neg(Var x);
Var scale_by(Var x, Var s);               // s real scalar; x real or complex
Var sub_bcast(Var x, Var s);              // real x minus scalar s
// x / max(den, floor) with den a real scalar; gradient to den vanishes when
// the floor is active.
Var div_bcast_safe(Var x, Var den, double floor);

// Unary elementwise (real input).
Var relu(Var x);
Var tanh_op(Var x);
Var sigmoid(Var x);
Var softplus(Var x);
Var exp_op(Var x);
Var log1p_op(Var x);
// abs: real input -> |x| with sign subgradient (0 at 0); complex input ->
// magnitude with gradient g * x/|x| (0 at the origin).
Var abs_op(Var x);

// Reductions over all elements (real input -> real scalar).
Var sum(Var x);
Var mean(Var x);
Var reduce_max(Var x);                    // subgradient to first argmax
Var reduce_min(Var x);
Var index_scalar(Var x, int64_t i);       // x flat element i as a scalar

// Layout ops on real NCHW tensors.
Var concat_channels(Var a, Var b);
Var slice_channels(Var x, int64_t start, int64_t count);
Var avg_pool2d(Var x, int64_t k);         // stride k, dims divisible by k

// Same-store ops.
Var reshape(Var x, std::vector<int64_t> shape);   // numel preserved
Var slice_frame(Var x, int64_t t);                // x[t] with leading dim kept as 1
Var real_to_complex(Var x);                       // zero imaginary part

// Complex [T,H,W] <-> real [T,2,H,W] channel views (re, im).
Var complex_to_channels(Var x);
Var channels_to_complex(Var x);
// Circular temporal neighborhood: complex [T,H,W] -> real [T,2*(2r+1),H,W],
// channel pair 2*(d+r) holding re/im of frame (t+d) mod T for d in [-r, r].
Var temporal_neighbor_channels(Var x, int64_t radius);

// conv2d on real NCHW input with [O,C,k,k] weight, zero padding. Only
// stride 1 is supported on the backward path.
Var conv2d(Var x, Var w, Var b, int64_t stride, int64_t pad);
Var conv2d(Var x, Var w, int64_t stride, int64_t pad);

Var instance_norm(Var x, double eps = 1e-5);  // per (n,c) over H*W
Var softmax_vec(Var x);                       // 1-D real

// Centered orthonormal 2D transforms over the trailing two dims of a
// complex tensor (rank >= 2, power-of-two spatial dims).
Var fft2_op(Var x);
Var ifft2_op(Var x);

// MRI encoding. sens: complex [C,H,W], mask: real {0,1} [T,H,W].
// encode_op: complex image [T,H,W] -> masked k-space [T,C,H,W].
// adjoint_op: k-space [T,C,H,W] -> coil-combined image [T,H,W].
Var encode_op(Var x, const Tensor& sens, const Tensor& mask);
Var adjoint_op(Var y, const Tensor& sens);
// Pointwise mask multiply; y complex [T,C,H,W] or [T,H,W].
Var mask_mul(Var y, const Tensor& mask);

}  // namespace hamr::diff
