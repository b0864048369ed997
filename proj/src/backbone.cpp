#include "hamr/backbone.hpp"

#include <cmath>

#include "hamr/rng.hpp"

namespace hamr::backbone {

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

Model make_model(const BackboneConfig& cfg, uint64_t seed) {
    ensure(cfg.cascades >= 1, "backbone: cascade count must be >= 1");
    ensure(cfg.width >= 1 && cfg.temporal_radius >= 0, "backbone: bad config");
    Model m;
    m.cfg = cfg;
    const int64_t C = cfg.width;
    const int64_t in_ch = 2 * (2 * cfg.temporal_radius + 1);
    for (int64_t i = 0; i < cfg.cascades; ++i) {
        CascadeParams p;
        std::string base = "cascade" + std::to_string(i) + "/";
        for (int l = 0; l < 4; ++l) {
            int64_t ci = (l == 0) ? in_ch : C;
            p.trunk_w.push_back(conv_weight(C, ci, 3, seed, base + "trunk" + std::to_string(l)));
            p.trunk_b.push_back(Tensor::zeros({C}));
        }
        p.gate_w = conv_weight(C, 2 * C, 1, seed, base + "gate");
        p.gate_b = Tensor::zeros({C});
        // Zero head: the model starts as pure data-consistency iterations.
        p.head_w = Tensor::zeros({2, C, 3, 3});
        p.head_b = Tensor::zeros({2});
        for (int64_t j = 0; j < i; ++j) {
            p.mem_w.push_back(conv_weight(C, C, 1, seed, base + "mem" + std::to_string(j)));
            p.mem_b.push_back(Tensor::zeros({C}));
        }
        if (i > 0) p.mem_scores = Tensor::zeros({i});
        p.lambda_raw = Tensor::scalar(cfg.lambda_raw_init);
        m.cascades.push_back(std::move(p));
    }
    return m;
}

namespace {

template <class ModelT, class Fn>
void traverse(ModelT& m, Fn&& fn) {
    for (size_t i = 0; i < m.cascades.size(); ++i) {
        auto& p = m.cascades[i];
        std::string base = "cascade" + std::to_string(i) + "/";
        for (size_t l = 0; l < p.trunk_w.size(); ++l) {
            fn(base + "trunk" + std::to_string(l) + "/w", p.trunk_w[l]);
            fn(base + "trunk" + std::to_string(l) + "/b", p.trunk_b[l]);
        }
        fn(base + "gate/w", p.gate_w);
        fn(base + "gate/b", p.gate_b);
        fn(base + "head/w", p.head_w);
        fn(base + "head/b", p.head_b);
        for (size_t j = 0; j < p.mem_w.size(); ++j) {
            fn(base + "mem" + std::to_string(j) + "/w", p.mem_w[j]);
            fn(base + "mem" + std::to_string(j) + "/b", p.mem_b[j]);
        }
        if (p.mem_scores.defined()) fn(base + "mem_scores", p.mem_scores);
        fn(base + "lambda_raw", p.lambda_raw);
    }
}

}  // namespace

void for_each_param(Model& m, const std::function<void(const std::string&, Tensor&)>& fn) {
    traverse(m, fn);
}

void for_each_param(const Model& m,
                    const std::function<void(const std::string&, const Tensor&)>& fn) {
    traverse(m, fn);
}

int64_t backbone_param_count(const Model& m) {
    int64_t n = 0;
    for_each_param(m, [&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
}

BoundModel bind(Tape& t, const Model& m, bool trainable) {
    std::vector<Var> vars;
    for_each_param(m, [&](const std::string&, const Tensor& p) {
        vars.push_back(t.leaf(p, trainable));
    });
    return bind_vars(m, vars);
}

BoundModel bind_vars(const Model& m, const std::vector<Var>& vars) {
    BoundModel bm;
    bm.cfg = m.cfg;
    size_t k = 0;
    auto next = [&]() {
        ensure(k < vars.size(), "bind_vars: too few vars");
        return vars[k++];
    };
    for (const auto& p : m.cascades) {
        BoundCascade b;
        for (size_t l = 0; l < p.trunk_w.size(); ++l) {
            b.trunk_w.push_back(next());
            b.trunk_b.push_back(next());
        }
        b.gate_w = next();
        b.gate_b = next();
        b.head_w = next();
        b.head_b = next();
        for (size_t j = 0; j < p.mem_w.size(); ++j) {
            b.mem_w.push_back(next());
            b.mem_b.push_back(next());
        }
        if (p.mem_scores.defined()) b.mem_scores = next();
        b.lambda_raw = next();
        bm.cascades.push_back(std::move(b));
    }
    ensure(k == vars.size(), "bind_vars: too many vars");
    return bm;
}

std::vector<Var> bound_vars(const BoundModel& bm) {
    std::vector<Var> vars;
    for (const auto& b : bm.cascades) {
        for (size_t l = 0; l < b.trunk_w.size(); ++l) {
            vars.push_back(b.trunk_w[l]);
            vars.push_back(b.trunk_b[l]);
        }
        vars.push_back(b.gate_w);
        vars.push_back(b.gate_b);
        vars.push_back(b.head_w);
        vars.push_back(b.head_b);
        for (size_t j = 0; j < b.mem_w.size(); ++j) {
            vars.push_back(b.mem_w[j]);
            vars.push_back(b.mem_b[j]);
        }
        if (b.mem_scores.ok()) vars.push_back(b.mem_scores);
        vars.push_back(b.lambda_raw);
    }
    return vars;
}

Var memory_aggregate(Tape& t, const std::vector<Var>& bank, const BoundCascade& p,
                     const std::vector<int64_t>& shape) {
    ensure(bank.size() == p.mem_w.size(),
           "memory_aggregate: bank size does not match this cascade's stage index");
    for (const auto& f : bank)
        ensure(f.shape() == shape, "memory_aggregate: bank entry shape mismatch");
    if (bank.empty()) return t.constant(Tensor::zeros(shape));
    Var w = diff::softmax_vec(p.mem_scores);
    Var acc;
    for (size_t j = 0; j < bank.size(); ++j) {
        Var proj = diff::conv2d(bank[j], p.mem_w[j], p.mem_b[j], 1, 0);
        Var term = diff::scale_by(proj, diff::index_scalar(w, static_cast<int64_t>(j)));
        acc = acc.ok() ? diff::add(acc, term) : term;
    }
    return acc;
}

Var fuse_features(Var current, Var aggregated, Var gate_w, Var gate_b) {
    ensure(current.shape() == aggregated.shape(), "fuse_features: shape mismatch");
    Var cat = diff::concat_channels(current, aggregated);
    Var alpha = diff::sigmoid(diff::conv2d(cat, gate_w, gate_b, 1, 0));
    Var keep = diff::mul(alpha, current);
    Var mix = diff::mul(diff::add_scalar(diff::neg(alpha), 1.0), aggregated);
    return diff::add(keep, mix);
}

namespace {

Var trunk_forward(Var x, const BoundCascade& p, int64_t radius) {
    Var h = diff::temporal_neighbor_channels(x, radius);
    for (size_t l = 0; l < p.trunk_w.size(); ++l) {
        h = diff::conv2d(h, p.trunk_w[l], p.trunk_b[l], 1, 1);
        if (l + 1 < p.trunk_w.size()) h = diff::relu(h);
    }
    return h;
}

}  // namespace

CascadeOut cascade_forward(Var x, Var y, const Tensor& sens, const Tensor& mask,
                           const BoundCascade& p, const std::vector<Var>& memory,
                           int64_t temporal_radius) {
    Tape& t = *x.tape;
    Var features = trunk_forward(x, p, temporal_radius);
    Var agg = memory_aggregate(t, memory, p, features.shape());
    Var enhanced = fuse_features(features, agg, p.gate_w, p.gate_b);
    Var reg = diff::channels_to_complex(diff::conv2d(enhanced, p.head_w, p.head_b, 1, 1));
    Var lambda = diff::softplus(p.lambda_raw);
    Var resid = diff::sub(diff::encode_op(x, sens, mask), y);
    Var corr = diff::add(diff::adjoint_op(resid, sens), reg);
    Var x_next = diff::sub(x, diff::scale_by(corr, lambda));
    return {x_next, features};
}

Var reconstruct(Tape& t, const BoundModel& m, const Tensor& y, const Tensor& sens,
                const Tensor& mask) {
    ensure(!m.cascades.empty(), "reconstruct: empty model");
    Var yv = t.constant(y);
    Var x = diff::adjoint_op(yv, sens);
    std::vector<Var> memory;
    for (const auto& p : m.cascades) {
        CascadeOut out = cascade_forward(x, yv, sens, mask, p, memory, m.cfg.temporal_radius);
        memory.push_back(out.features);
        x = out.x_next;
    }
    return diff::abs_op(x);
}

ParamCounts count_params(const Model& m, const std::map<std::string, int64_t>& adapter_sizes) {
    ParamCounts c;
    c.backbone = backbone_param_count(m);
    c.per_adapter = adapter_sizes;
    for (const auto& [key, n] : adapter_sizes) {
        ensure(n >= 0, "count_params: negative adapter size for " + key);
        c.adapter_total += n;
    }
    c.total = c.backbone + c.adapter_total;
    c.adapter_fraction =
        c.backbone > 0 ? static_cast<double>(c.adapter_total) / static_cast<double>(c.backbone)
                       : 0.0;
    return c;
}

}  // namespace hamr::backbone
