#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hamr/ops.hpp"

namespace hamr::backbone {

using diff::Tape;
using diff::Var;

struct BackboneConfig {
    int64_t cascades = 6;
    int64_t width = 16;           // feature channels per cascade
    int64_t temporal_radius = 2;  // trunk sees frames t-r..t+r, circular
    double lambda_raw_init = 0.5413248546129181;  // softplus -> 1
};

// One cascade: 4-layer conv trunk on stacked re/im neighbor channels, a
// sigmoid gate fusing current features with the aggregated memory bank, a
// head conv back to a complex residual, per-stage 1x1 memory projections
// with softmax scores, and the data-consistency weight.
struct CascadeParams {
    std::vector<Tensor> trunk_w, trunk_b;  // 4 layers, 3x3
    Tensor gate_w, gate_b;                 // 1x1, 2C -> C
    Tensor head_w, head_b;                 // 3x3, C -> 2
    std::vector<Tensor> mem_w, mem_b;      // 1x1, C -> C, one per earlier stage
    Tensor mem_scores;                     // [stage index], absent for cascade 0
    Tensor lambda_raw;                     // scalar, lambda_t = softplus
};

struct Model {
    BackboneConfig cfg;
    std::vector<CascadeParams> cascades;
};

Model make_model(const BackboneConfig& cfg, uint64_t seed);

// Deterministic traversal (construction order); the canonical parameter
// order for optimizers and checkpoints. Names look like "cascade2/trunk0/w".
void for_each_param(Model& m, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_param(const Model& m,
                    const std::function<void(const std::string&, const Tensor&)>& fn);
int64_t backbone_param_count(const Model& m);

// Tape-bound mirror of Model, in the same traversal order.
struct BoundCascade {
    std::vector<Var> trunk_w, trunk_b;
    Var gate_w, gate_b, head_w, head_b;
    std::vector<Var> mem_w, mem_b;
    Var mem_scores;
    Var lambda_raw;
};

struct BoundModel {
    BackboneConfig cfg;
    std::vector<BoundCascade> cascades;
};

BoundModel bind(Tape& t, const Model& m, bool trainable = true);
// Rebind from pre-made leaves (for_each_param order); lets callers own the
// leaf creation, e.g. gradient checks.
BoundModel bind_vars(const Model& m, const std::vector<Var>& vars);
std::vector<Var> bound_vars(const BoundModel& bm);  // traversal order

// Softmax-weighted sum of projected bank entries; zeros of the given shape
// for an empty bank. bank size must equal the cascade's stage index.
Var memory_aggregate(Tape& t, const std::vector<Var>& bank, const BoundCascade& p,
                     const std::vector<int64_t>& shape);

// alpha = sigmoid(gate([current || aggregated])), out = alpha*current +
// (1-alpha)*aggregated.
Var fuse_features(Var current, Var aggregated, Var gate_w, Var gate_b);

struct CascadeOut {
    Var x_next;    // complex [T,H,W]
    Var features;  // real [T,C,H,W], to be appended to the bank by the caller
};

CascadeOut cascade_forward(Var x, Var y, const Tensor& sens, const Tensor& mask,
                           const BoundCascade& p, const std::vector<Var>& memory,
                           int64_t temporal_radius);

// Unrolled reconstruction from masked k-space: adjoint start, all cascades
// with a shared memory bank, magnitude output [T,H,W]. Sensitivities are
// assumed RSS-normalized, so the final coil-combined magnitude is |x|.
Var reconstruct(Tape& t, const BoundModel& m, const Tensor& y, const Tensor& sens,
                const Tensor& mask);

struct ParamCounts {
    int64_t backbone = 0;
    std::map<std::string, int64_t> per_adapter;
    int64_t adapter_total = 0;
    int64_t total = 0;
    double adapter_fraction = 0.0;
};

// adapter_sizes: registry key -> parameter count, supplied by the adapter
// registry so this module does not depend on it.
ParamCounts count_params(const Model& m,
                         const std::map<std::string, int64_t>& adapter_sizes = {});

}  // namespace hamr::backbone
