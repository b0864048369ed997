#pragma once

#include "hamr/ops.hpp"

#include <map>
#include <string>
#include <vector>

namespace hamr::losses {

using diff::Tape;
using diff::Var;

struct SsimCfg {
    int64_t window = 7;
    double k1 = 0.01;
    double k2 = 0.03;
};

struct ProtocolWeights {
    double w_base = 1.0;
    double w_ms = 0.5;
    double w_freq = 0.25;
    double w_l1 = 0.1;
};

struct LossWeights {
    std::map<std::string, ProtocolWeights> per_protocol;
    std::vector<int64_t> scales{1, 2, 4};
    double beta = 1e-5;
    SsimCfg ssim;

    static LossWeights defaults();
    static LossWeights from_json_text(const std::string& text);
    std::string to_json_text() const;

    void validate() const;
    const ProtocolWeights& for_protocol(const std::string& protocol_id) const;
};

struct LossBreakdown {
    double base_ssim = 0.0;
    double ms_ssim = 0.0;
    double freq_ssim = 0.0;
    double l1 = 0.0;
    double reg = 0.0;
    double total = 0.0;
};

// Differentiable loss pieces. Inputs are real magnitude images, [H,W] or
// [T,H,W]; outputs are real scalar Vars. L is the dynamic range (callers
// normally pass max(gt)).
Var ssim_var(Var x, Var y, const SsimCfg& cfg, double L);
Var ms_ssim_loss_var(Var x, Var y, const SsimCfg& cfg,
                     const std::vector<int64_t>& scales, double L);
Var freq_ssim_loss_var(Var x, Var y, const SsimCfg& cfg);

// total = w_base*base + w_ms*ms + w_freq*freq + w_l1*l1 + beta*reg, summed in
// exactly that order so the breakdown recombines bit-for-bit. reg is the
// adapter penalty already on the tape; pass a zero scalar when no adapters
// are in play.
struct TotalLoss {
    Var total;
    LossBreakdown parts;
};
TotalLoss total_loss(Var pred, const Tensor& gt, const std::string& protocol_id,
                     const LossWeights& weights, Var reg);

// Plain metrics, no tape involved. ssim uses L = max(gt) when L <= 0.
double ssim(const Tensor& x, const Tensor& gt, const SsimCfg& cfg = {}, double L = 0.0);
double psnr(const Tensor& x, const Tensor& gt);

} // namespace hamr::losses
