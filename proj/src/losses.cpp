#include "hamr/losses.hpp"

#include "hamr/fft.hpp"

#include "json.hpp"

#include <cmath>
#include <limits>

namespace hamr::losses {

using diff::add;
using diff::add_scalar;
using diff::neg;
using diff::scale;

void LossWeights::validate() const {
    ensure(!per_protocol.empty(), "loss weights: no protocols configured");
    for (const auto& [id, w] : per_protocol)
        ensure(w.w_base >= 0.0 && w.w_ms >= 0.0 && w.w_freq >= 0.0 && w.w_l1 >= 0.0,
               "loss weights: negative weight for protocol " + id);
    ensure(!scales.empty(), "loss weights: scale set is empty");
    for (int64_t s : scales)
        ensure(s >= 1 && fft::is_pow2(s), "loss weights: scales must be positive powers of 2");
    ensure(beta >= 0.0, "loss weights: beta must be >= 0");
    ensure(ssim.window >= 1 && ssim.window % 2 == 1, "loss weights: ssim window must be odd");
}

const ProtocolWeights& LossWeights::for_protocol(const std::string& protocol_id) const {
    auto it = per_protocol.find(protocol_id);
    ensure(it != per_protocol.end(), "loss weights: unknown protocol " + protocol_id);
    return it->second;
}

LossWeights LossWeights::defaults() {
    LossWeights w;
    w.per_protocol["cine"] = {1.0, 0.5, 0.25, 0.1};
    w.per_protocol["lge"] = {0.5, 1.0, 0.25, 0.1};
    w.per_protocol["mapping"] = {1.0, 0.5, 0.1, 0.1};
    w.per_protocol["perfusion"] = {0.75, 0.75, 0.25, 0.1};
    return w;
}

namespace {

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                         const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known)
            if (it.key() == k) ok = true;
        ensure(ok, "loss weights: unknown key \"" + it.key() + "\" in " + where);
    }
}

} // namespace

LossWeights LossWeights::from_json_text(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ensure(j.is_object(), "loss weights: top-level JSON object expected");
    reject_unknown_keys(j, {"beta", "scales", "ssim", "protocols"}, "loss weights");
    LossWeights w = defaults();
    if (j.contains("beta")) w.beta = j.at("beta").get<double>();
    if (j.contains("scales")) w.scales = j.at("scales").get<std::vector<int64_t>>();
    if (j.contains("ssim")) {
        const auto& s = j.at("ssim");
        reject_unknown_keys(s, {"window", "k1", "k2"}, "ssim");
        if (s.contains("window")) w.ssim.window = s.at("window").get<int64_t>();
        if (s.contains("k1")) w.ssim.k1 = s.at("k1").get<double>();
        if (s.contains("k2")) w.ssim.k2 = s.at("k2").get<double>();
    }
    if (j.contains("protocols")) {
        w.per_protocol.clear();
        for (auto it = j.at("protocols").begin(); it != j.at("protocols").end(); ++it) {
            const auto& p = it.value();
            reject_unknown_keys(p, {"w_base", "w_ms", "w_freq", "w_l1"}, "protocol " + it.key());
            ProtocolWeights pw;
            pw.w_base = p.at("w_base").get<double>();
            pw.w_ms = p.at("w_ms").get<double>();
            pw.w_freq = p.at("w_freq").get<double>();
            pw.w_l1 = p.value("w_l1", 0.1);
            w.per_protocol[it.key()] = pw;
        }
    }
    w.validate();
    return w;
}

std::string LossWeights::to_json_text() const {
    nlohmann::json j;
    j["beta"] = beta;
    j["scales"] = scales;
    j["ssim"] = {{"window", ssim.window}, {"k1", ssim.k1}, {"k2", ssim.k2}};
    nlohmann::json protos = nlohmann::json::object();
    for (const auto& [id, w] : per_protocol)
        protos[id] = {{"w_base", w.w_base}, {"w_ms", w.w_ms}, {"w_freq", w.w_freq}, {"w_l1", w.w_l1}};
    j["protocols"] = protos;
    return j.dump(2);
}

namespace {

// [H,W] or [T,H,W] real -> [N,1,H,W] for conv-based windowing. Rank-4
// single-channel inputs pass through unchanged.
Var as_nchw(Var x) {
    const Tensor& v = x.val();
    ensure(!v.is_complex(), "ssim: real input expected");
    if (v.rank() == 4) {
        ensure(v.dim(1) == 1, "ssim: single-channel [N,1,H,W] expected");
        return x;
    }
    ensure(v.rank() == 2 || v.rank() == 3, "ssim: [H,W] or [T,H,W] input expected");
    if (v.rank() == 2) return diff::reshape(x, {1, 1, v.dim(0), v.dim(1)});
    return diff::reshape(x, {v.dim(0), 1, v.dim(1), v.dim(2)});
}

Var uniform_window(Tape& t, int64_t w) {
    Tensor k({1, 1, w, w}, Dtype::Real64);
    double v = 1.0 / double(w * w);
    for (int64_t i = 0; i < k.numel(); ++i) k.data()[i] = v;
    return t.constant(std::move(k));
}

double scalar_value(Var v) { return v.val().data()[0]; }

Var one_minus(Var s) { return add_scalar(neg(s), 1.0); }

} // namespace

Var ssim_var(Var x, Var y, const SsimCfg& cfg, double L) {
    ensure(L > 0.0, "ssim: dynamic range must be positive");
    ensure(cfg.window >= 1 && cfg.window % 2 == 1, "ssim: window must be odd");
    ensure(x.val().same_shape(y.val()), "ssim: shape mismatch");
    Var x4 = as_nchw(x), y4 = as_nchw(y);
    int64_t H = x4.val().dim(2), W = x4.val().dim(3);
    ensure(cfg.window <= H && cfg.window <= W, "ssim: window larger than image");

    Tape& t = *x.tape;
    Var K = uniform_window(t, cfg.window);
    double c1 = (cfg.k1 * L) * (cfg.k1 * L);
    double c2 = (cfg.k2 * L) * (cfg.k2 * L);

    Var mx = diff::conv2d(x4, K, 1, 0);
    Var my = diff::conv2d(y4, K, 1, 0);
    Var mxx = diff::conv2d(diff::mul(x4, x4), K, 1, 0);
    Var myy = diff::conv2d(diff::mul(y4, y4), K, 1, 0);
    Var mxy = diff::conv2d(diff::mul(x4, y4), K, 1, 0);

    Var vx = diff::sub(mxx, diff::mul(mx, mx));
    Var vy = diff::sub(myy, diff::mul(my, my));
    Var cxy = diff::sub(mxy, diff::mul(mx, my));

    Var num = diff::mul(add_scalar(scale(diff::mul(mx, my), 2.0), c1),
                        add_scalar(scale(cxy, 2.0), c2));
    Var den = diff::mul(add_scalar(add(diff::mul(mx, mx), diff::mul(my, my)), c1),
                        add_scalar(add(vx, vy), c2));
    return diff::mean(diff::div(num, den));
}

Var ms_ssim_loss_var(Var x, Var y, const SsimCfg& cfg,
                     const std::vector<int64_t>& scales, double L) {
    ensure(!scales.empty(), "ms-ssim: scale set is empty");
    Var x4 = as_nchw(x), y4 = as_nchw(y);
    int64_t H = x4.val().dim(2), W = x4.val().dim(3);
    Var acc = x.tape->scalar(0.0);
    for (int64_t s : scales) {
        ensure(s >= 1 && fft::is_pow2(s), "ms-ssim: scales must be positive powers of 2");
        ensure(std::min(H, W) / s >= cfg.window, "ms-ssim: scale too large for image");
        Var xs = s == 1 ? x4 : diff::avg_pool2d(x4, s);
        Var ys = s == 1 ? y4 : diff::avg_pool2d(y4, s);
        acc = add(acc, scale(one_minus(ssim_var(xs, ys, cfg, L)), 1.0 / double(s)));
    }
    return scale(acc, 1.0 / double(scales.size()));
}

namespace {

// log1p of the centered spectrum magnitude, min-max scaled to [0,1].
// A flat spectrum (all-zero input) normalizes to an all-zero map.
Var norm_log_spectrum(Var frame) {
    Var mag = diff::abs_op(diff::fft2_op(diff::real_to_complex(frame)));
    Var ln = diff::log1p_op(mag);
    Var lo = diff::reduce_min(ln);
    Var range = diff::sub(diff::reduce_max(ln), lo);
    return diff::div_bcast_safe(diff::sub_bcast(ln, lo), range, 1e-30);
}

} // namespace

Var freq_ssim_loss_var(Var x, Var y, const SsimCfg& cfg) {
    const Tensor& vx = x.val();
    ensure(!vx.is_complex() && (vx.rank() == 2 || vx.rank() == 3),
           "freq-ssim: real [H,W] or [T,H,W] input expected");
    ensure(vx.same_shape(y.val()), "freq-ssim: shape mismatch");
    Var x3 = vx.rank() == 2 ? diff::reshape(x, {1, vx.dim(0), vx.dim(1)}) : x;
    Var y3 = vx.rank() == 2 ? diff::reshape(y, {1, vx.dim(0), vx.dim(1)}) : y;
    int64_t T = x3.val().dim(0);
    Var acc = x.tape->scalar(0.0);
    for (int64_t f = 0; f < T; ++f) {
        Var nx = norm_log_spectrum(diff::slice_frame(x3, f));
        Var ny = norm_log_spectrum(diff::slice_frame(y3, f));
        acc = add(acc, one_minus(ssim_var(nx, ny, cfg, 1.0)));
    }
    return scale(acc, 1.0 / double(T));
}

TotalLoss total_loss(Var pred, const Tensor& gt, const std::string& protocol_id,
                     const LossWeights& weights, Var reg) {
    weights.validate();
    const ProtocolWeights& pw = weights.for_protocol(protocol_id);
    ensure(pred.val().same_shape(gt), "total loss: pred/gt shape mismatch");
    ensure(!reg.val().is_complex() && reg.val().numel() == 1, "total loss: reg must be a real scalar");

    Tape& t = *pred.tape;
    Var gtv = t.constant(gt);
    double L = gt.max_value();

    Var base = one_minus(ssim_var(pred, gtv, weights.ssim, L));
    Var ms = ms_ssim_loss_var(pred, gtv, weights.ssim, weights.scales, L);
    Var freq = freq_ssim_loss_var(pred, gtv, weights.ssim);
    Var l1 = diff::mean(diff::abs_op(diff::sub(pred, gtv)));

    Var total = scale(base, pw.w_base);
    total = add(total, scale(ms, pw.w_ms));
    total = add(total, scale(freq, pw.w_freq));
    total = add(total, scale(l1, pw.w_l1));
    total = add(total, scale(reg, weights.beta));

    TotalLoss out{total, {}};
    out.parts.base_ssim = scalar_value(base);
    out.parts.ms_ssim = scalar_value(ms);
    out.parts.freq_ssim = scalar_value(freq);
    out.parts.l1 = scalar_value(l1);
    out.parts.reg = scalar_value(reg);
    out.parts.total = scalar_value(total);
    return out;
}

double ssim(const Tensor& x, const Tensor& gt, const SsimCfg& cfg, double L) {
    if (L <= 0.0) L = gt.max_value();
    Tape t;
    return scalar_value(ssim_var(t.constant(x), t.constant(gt), cfg, L));
}

double psnr(const Tensor& x, const Tensor& gt) {
    ensure(!x.is_complex() && !gt.is_complex(), "psnr: real inputs expected");
    ensure(x.same_shape(gt), "psnr: shape mismatch");
    double maxg = gt.max_value();
    ensure(maxg > 0.0, "psnr: max(gt) must be positive");
    double se = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        double d = x.data()[i] - gt.data()[i];
        se += d * d;
    }
    double rmse = std::sqrt(se / double(x.numel()));
    if (rmse == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(maxg / rmse);
}

} // namespace hamr::losses
