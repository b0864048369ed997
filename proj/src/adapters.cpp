#include "hamr/adapters.hpp"

#include <cmath>

#include "hamr/rng.hpp"

namespace hamr::adapters {

namespace {

Tensor conv_weight(int64_t O, int64_t C, int64_t k, uint64_t seed, const std::string& name) {
    Tensor w({O, C, k, k}, Dtype::Real64);
    double bound = 1.0 / std::sqrt(static_cast<double>(C * k * k));
    auto rng = make_rng(seed, name);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (int64_t i = 0; i < w.numel(); ++i) w.r(i) = dist(rng);
    return w;
}

}  // namespace

AdapterParams make_adapter(const AdapterConfig& cfg, uint64_t seed) {
    ensure(cfg.channels >= 16 && cfg.channels % 16 == 0,
           "adapter: channel width must be a positive multiple of 16");
    const int64_t C = cfg.channels;
    AdapterParams p;
    p.lift_w = conv_weight(C, 1, 1, seed, "lift");
    p.lift_b = Tensor::zeros({C});
    p.w1 = conv_weight(C / 4, C, 3, seed, "w1");
    p.b1 = Tensor::zeros({C / 4});
    p.w2 = conv_weight(C / 16, C / 4, 3, seed, "w2");
    p.b2 = Tensor::zeros({C / 16});
    p.w3 = conv_weight(1, C / 16, 3, seed, "w3");
    p.b3 = Tensor::zeros({1});
    p.alpha = Tensor::scalar(cfg.alpha_init);
    p.norm_eps = cfg.norm_eps;
    return p;
}

namespace {

template <class ParamsT, class Fn>
void traverse_adapter(ParamsT& p, const std::string& prefix, Fn&& fn) {
    fn(prefix + "/lift/w", p.lift_w);
    fn(prefix + "/lift/b", p.lift_b);
    fn(prefix + "/w1/w", p.w1);
    fn(prefix + "/w1/b", p.b1);
    fn(prefix + "/w2/w", p.w2);
    fn(prefix + "/w2/b", p.b2);
    fn(prefix + "/w3/w", p.w3);
    fn(prefix + "/w3/b", p.b3);
    fn(prefix + "/alpha", p.alpha);
}

}  // namespace

void for_each_param(AdapterParams& p, const std::string& prefix,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
    traverse_adapter(p, prefix, fn);
}

void for_each_param(const AdapterParams& p, const std::string& prefix,
                    const std::function<void(const std::string&, const Tensor&)>& fn) {
    traverse_adapter(p, prefix, fn);
}

int64_t adapter_param_count(const AdapterParams& p) {
    int64_t n = 0;
    for_each_param(p, "", [&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
}

BoundAdapter bind(Tape& t, const AdapterParams& p, bool trainable) {
    std::vector<Var> vars;
    for_each_param(p, "", [&](const std::string&, const Tensor& w) {
        vars.push_back(t.leaf(w, trainable));
    });
    return bind_vars(p, vars);
}

BoundAdapter bind_vars(const AdapterParams& p, const std::vector<Var>& vars) {
    ensure(vars.size() == 9, "adapter bind_vars: expected 9 vars");
    BoundAdapter b;
    b.lift_w = vars[0];
    b.lift_b = vars[1];
    b.w1 = vars[2];
    b.b1 = vars[3];
    b.w2 = vars[4];
    b.b2 = vars[5];
    b.w3 = vars[6];
    b.b3 = vars[7];
    b.alpha = vars[8];
    b.norm_eps = p.norm_eps;
    return b;
}

std::vector<Var> bound_vars(const BoundAdapter& b) {
    return {b.lift_w, b.lift_b, b.w1, b.b1, b.w2, b.b2, b.w3, b.b3, b.alpha};
}

Var adapter_apply(Var x, const BoundAdapter& p) {
    ensure(x.val().rank() == 3 && !x.is_complex(),
           "adapter_apply: expected a real [T,H,W] stack");
    int64_t T = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    Var x4 = diff::reshape(x, {T, 1, H, W});
    Var u = diff::instance_norm(x4, p.norm_eps);
    Var h = diff::conv2d(u, p.lift_w, p.lift_b, 1, 0);
    Var a1 = diff::relu(diff::instance_norm(diff::conv2d(h, p.w1, p.b1, 1, 1), p.norm_eps));
    Var a2 = diff::relu(diff::instance_norm(diff::conv2d(a1, p.w2, p.b2, 1, 1), p.norm_eps));
    Var r = diff::tanh_op(diff::conv2d(a2, p.w3, p.b3, 1, 1));
    Var out = diff::add(x4, diff::scale_by(r, p.alpha));
    return diff::reshape(out, {T, H, W});
}

Tensor adapter_apply(const Tensor& x, const AdapterParams& p) {
    Tape t;
    return adapter_apply(t.constant(x), bind(t, p, false)).val();
}

AdapterRegistry make_registry(const AdapterConfig& cfg,
                              const std::vector<std::string>& protocol_ids,
                              const std::vector<std::string>& center_ids, uint64_t seed) {
    AdapterRegistry reg;
    for (const auto& id : protocol_ids)
        reg.protocol_adapters.emplace(id, make_adapter(cfg, derive_seed(seed, "protocol/" + id)));
    for (const auto& id : center_ids)
        reg.center_adapters.emplace(id, make_adapter(cfg, derive_seed(seed, "center/" + id)));
    reg.universal = make_adapter(cfg, derive_seed(seed, kUniversalKey));
    return reg;
}

std::vector<std::string> registry_keys(const AdapterRegistry& reg) {
    std::vector<std::string> keys;
    for (const auto& [id, p] : reg.protocol_adapters) keys.push_back("protocol/" + id);
    for (const auto& [id, p] : reg.center_adapters) keys.push_back("center/" + id);
    keys.push_back(kUniversalKey);
    return keys;
}

AdapterParams& at_key(AdapterRegistry& reg, const std::string& key) {
    if (key == kUniversalKey) return reg.universal;
    if (key.rfind("protocol/", 0) == 0) {
        auto it = reg.protocol_adapters.find(key.substr(9));
        ensure(it != reg.protocol_adapters.end(), "adapter registry: no adapter for " + key);
        return it->second;
    }
    if (key.rfind("center/", 0) == 0) {
        auto it = reg.center_adapters.find(key.substr(7));
        ensure(it != reg.center_adapters.end(), "adapter registry: no adapter for " + key);
        return it->second;
    }
    throw std::runtime_error("adapter registry: malformed key " + key);
}

const AdapterParams& at_key(const AdapterRegistry& reg, const std::string& key) {
    return at_key(const_cast<AdapterRegistry&>(reg), key);
}

std::map<std::string, int64_t> param_counts(const AdapterRegistry& reg) {
    std::map<std::string, int64_t> out;
    for (const auto& key : registry_keys(reg)) out[key] = adapter_param_count(at_key(reg, key));
    return out;
}

void for_each_param(AdapterRegistry& reg,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
    for (auto& [id, p] : reg.protocol_adapters) for_each_param(p, "protocol/" + id, fn);
    for (auto& [id, p] : reg.center_adapters) for_each_param(p, "center/" + id, fn);
    for_each_param(reg.universal, kUniversalKey, fn);
}

void for_each_param(const AdapterRegistry& reg,
                    const std::function<void(const std::string&, const Tensor&)>& fn) {
    for (const auto& [id, p] : reg.protocol_adapters) for_each_param(p, "protocol/" + id, fn);
    for (const auto& [id, p] : reg.center_adapters) for_each_param(p, "center/" + id, fn);
    for_each_param(reg.universal, kUniversalKey, fn);
}

AdapterSelection select_adapters(const AdapterRegistry& reg, const std::string& protocol_id,
                                 const std::string& center_id, SelectMode mode,
                                 std::mt19937_64& rng) {
    ensure(reg.protocol_adapters.count(protocol_id) > 0,
           "select_adapters: unknown protocol " + protocol_id);
    AdapterSelection sel;
    sel.protocol_key = protocol_id;
    bool known_center = reg.center_adapters.count(center_id) > 0;
    if (mode == SelectMode::Train && known_center) {
        std::bernoulli_distribution pick_universal(reg.prob_universal);
        sel.center_key = pick_universal(rng) ? kUniversalKey : center_id;
        sel.stochastic = true;
    } else {
        sel.center_key = known_center ? center_id : kUniversalKey;
        sel.stochastic = false;
    }
    return sel;
}

std::string center_registry_key(const AdapterSelection& sel) {
    return sel.center_key == kUniversalKey ? kUniversalKey : "center/" + sel.center_key;
}

std::string protocol_registry_key(const AdapterSelection& sel) {
    return "protocol/" + sel.protocol_key;
}

const AdapterParams& resolve_center(const AdapterRegistry& reg, const AdapterSelection& sel) {
    return at_key(reg, center_registry_key(sel));
}

const AdapterParams& resolve_protocol(const AdapterRegistry& reg, const AdapterSelection& sel) {
    return at_key(reg, protocol_registry_key(sel));
}

Var adapt(Var I_base, const BoundAdapter& center_active, const BoundAdapter& protocol) {
    return adapter_apply(adapter_apply(I_base, center_active), protocol);
}

Tensor adapt(const Tensor& I_base, const AdapterSelection& sel, const AdapterRegistry& reg) {
    Tape t;
    BoundAdapter c = bind(t, resolve_center(reg, sel), false);
    BoundAdapter p = bind(t, resolve_protocol(reg, sel), false);
    return adapt(t.constant(I_base), c, p).val();
}

double adapter_param_norm(const AdapterRegistry& reg) {
    double s = 0.0;
    for_each_param(reg, [&](const std::string&, const Tensor& t) {
        for (int64_t i = 0; i < t.numel(); ++i) s += t.r(i) * t.r(i);
    });
    return s;
}

Var adapter_param_norm(Tape& t, const std::vector<BoundAdapter>& active) {
    Var acc = t.scalar(0.0);
    for (const auto& b : active)
        for (const Var& w : bound_vars(b)) acc = diff::add(acc, diff::sum(diff::mul(w, w)));
    return acc;
}

}  // namespace hamr::adapters
