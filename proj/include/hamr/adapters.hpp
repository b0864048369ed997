#pragma once

#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "hamr/ops.hpp"

namespace hamr::adapters {

using diff::Tape;
using diff::Var;

inline const std::string kUniversalKey = "universal";

struct AdapterConfig {
    int64_t channels = 32;  // lift width C; the stack is 1 -> C -> C/4 -> C/16 -> 1
    double alpha_init = 0.1;
    double norm_eps = 1e-5;
};

// Residual image adapter: T(x) = x + alpha * tanh(W3*phi(W2*phi(W1*lift(N(x)))))
// with N instance norm and phi = instance norm + ReLU.
struct AdapterParams {
    Tensor lift_w, lift_b;  // 1x1, 1 -> C
    Tensor w1, b1;          // 3x3, C -> C/4
    Tensor w2, b2;          // 3x3, C/4 -> C/16
    Tensor w3, b3;          // 3x3, C/16 -> 1
    Tensor alpha;           // scalar
    double norm_eps = 1e-5;
};

AdapterParams make_adapter(const AdapterConfig& cfg, uint64_t seed);
int64_t adapter_param_count(const AdapterParams& p);

// Traversal order: lift, w1, w2, w3 (weight then bias), alpha.
void for_each_param(AdapterParams& p, const std::string& prefix,
                    const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_param(const AdapterParams& p, const std::string& prefix,
                    const std::function<void(const std::string&, const Tensor&)>& fn);

struct BoundAdapter {
    Var lift_w, lift_b, w1, b1, w2, b2, w3, b3, alpha;
    double norm_eps = 1e-5;
};

BoundAdapter bind(Tape& t, const AdapterParams& p, bool trainable = true);
BoundAdapter bind_vars(const AdapterParams& p, const std::vector<Var>& vars);
std::vector<Var> bound_vars(const BoundAdapter& b);

// Differentiable forward on a magnitude stack [T,H,W]; frames are adapted
// independently.
Var adapter_apply(Var x, const BoundAdapter& p);
// Convenience evaluation on plain tensors (scratch tape).
Tensor adapter_apply(const Tensor& x, const AdapterParams& p);

struct AdapterRegistry {
    std::map<std::string, AdapterParams> protocol_adapters;  // by protocol id
    std::map<std::string, AdapterParams> center_adapters;    // by center id
    AdapterParams universal;
    double prob_universal = 0.15;
};

AdapterRegistry make_registry(const AdapterConfig& cfg,
                              const std::vector<std::string>& protocol_ids,
                              const std::vector<std::string>& center_ids, uint64_t seed);

// Serialized/reported keys: "protocol/<id>", "center/<id>", "universal".
std::vector<std::string> registry_keys(const AdapterRegistry& reg);
AdapterParams& at_key(AdapterRegistry& reg, const std::string& key);
const AdapterParams& at_key(const AdapterRegistry& reg, const std::string& key);
std::map<std::string, int64_t> param_counts(const AdapterRegistry& reg);

// Traversal over every adapter, protocols then centers (sorted) then
// universal; names look like "protocol/cine/w1/w".
void for_each_param(AdapterRegistry& reg,
                    const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_param(const AdapterRegistry& reg,
                    const std::function<void(const std::string&, const Tensor&)>& fn);

enum class SelectMode { Train, Eval };

struct AdapterSelection {
    std::string protocol_key;  // protocol id, always deterministic
    std::string center_key;    // center id, or kUniversalKey
    bool stochastic = false;   // true when drawn in train mode
};

// Train mode on a known center draws the universal adapter with probability
// prob_universal; eval mode (and any unknown center) resolves
// deterministically, falling back to the universal adapter.
AdapterSelection select_adapters(const AdapterRegistry& reg, const std::string& protocol_id,
                                 const std::string& center_id, SelectMode mode,
                                 std::mt19937_64& rng);

std::string center_registry_key(const AdapterSelection& sel);
std::string protocol_registry_key(const AdapterSelection& sel);

const AdapterParams& resolve_center(const AdapterRegistry& reg, const AdapterSelection& sel);
const AdapterParams& resolve_protocol(const AdapterRegistry& reg, const AdapterSelection& sel);

// I_final = T_protocol(T_center_active(I_base)).
Var adapt(Var I_base, const BoundAdapter& center_active, const BoundAdapter& protocol);
Tensor adapt(const Tensor& I_base, const AdapterSelection& sel, const AdapterRegistry& reg);

// Sum of squared Frobenius norms over every adapter tensor in the registry
// (diagnostic; real-valued).
double adapter_param_norm(const AdapterRegistry& reg);
// On-tape penalty over the adapters bound for this step, so gradients reach
// exactly the selected adapters.
Var adapter_param_norm(Tape& t, const std::vector<BoundAdapter>& active);

}  // namespace hamr::adapters
