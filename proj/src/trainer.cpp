#include "hamr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hamr/ops.hpp"
#include "hamr/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hamr::train {

namespace d = diff;

void TrainConfig::validate() const {
    if (lr_backbone <= 0.0 || lr_adapter <= 0.0)
        throw std::invalid_argument("TrainConfig: learning rates must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: negative weight_decay");
    if (eta_min < 0.0 || eta_min >= lr_backbone)
        throw std::invalid_argument("TrainConfig: eta_min must be in [0, lr_backbone)");
    if (accumulation_steps < 1)
        throw std::invalid_argument("TrainConfig: accumulation_steps must be >= 1");
    if (patience < 1) throw std::invalid_argument("TrainConfig: patience must be >= 1");
    if (prob_universal < 0.0 || prob_universal > 1.0)
        throw std::invalid_argument("TrainConfig: prob_universal outside [0, 1]");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (clip_max_norm <= 0.0) throw std::invalid_argument("TrainConfig: clip_max_norm must be > 0");
    if (finetune.wc_min <= 0.0 || finetune.wc_max < finetune.wc_min)
        throw std::invalid_argument("TrainConfig: bad finetune weight clamp range");
    if (finetune.warm_restart_epochs < 1)
        throw std::invalid_argument("TrainConfig: warm_restart_epochs must be >= 1");
    if (finetune.eta_min <= 0.0)
        throw std::invalid_argument("TrainConfig: finetune eta_min must be > 0");
    if (finetune.adapter_mult_min <= 0.0 ||
        finetune.adapter_mult_max < finetune.adapter_mult_min)
        throw std::invalid_argument("TrainConfig: bad adapter lr multiplier range");
    weights.validate();
}

double lr_schedule(int64_t step, int64_t total_steps, double base_lr, double eta_min,
                   int64_t warm_restart_T0) {
    if (total_steps <= 0) throw std::invalid_argument("lr_schedule: total_steps must be > 0");
    if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
    double pos;
    if (warm_restart_T0 > 0) {
        int64_t start = 0, len = warm_restart_T0;
        while (step >= start + len) {
            start += len;
            len *= 2;
        }
        pos = static_cast<double>(step - start) / static_cast<double>(len);
    } else {
        if (step > total_steps) step = total_steps;
        pos = static_cast<double>(step) / static_cast<double>(total_steps);
    }
    return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + std::cos(std::numbers::pi * pos));
}

double clip_gradients(GradMap& grads, double max_norm) {
    if (max_norm <= 0.0) throw std::invalid_argument("clip_gradients: max_norm must be > 0");
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        const double* p = g.data();
        for (int64_t i = 0; i < g.numel(); ++i) sq += p[i] * p[i];
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm) {
        double s = max_norm / norm;
        for (auto& [name, g] : grads) {
            double* p = g.data();
            for (int64_t i = 0; i < g.numel(); ++i) p[i] *= s;
        }
    }
    return norm;
}

void adamw_step(AdamW& opt, const ParamRefs& params, const GradMap& grads,
                const std::map<std::string, double>& lr, double weight_decay) {
    for (const auto& [name, theta] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;  // frozen or unused this step
        const Tensor& g = git->second;
        if (!g.same_shape(*theta))
            throw std::invalid_argument("adamw_step: gradient shape mismatch for " + name);
        const double* gd = g.data();
        for (int64_t i = 0; i < g.numel(); ++i)
            if (!std::isfinite(gd[i]))
                throw std::runtime_error("adamw_step: non-finite gradient for " + name);
        auto lit = lr.find(name);
        if (lit == lr.end()) throw std::invalid_argument("adamw_step: no learning rate for " + name);
        const double step_lr = lit->second;

        AdamState& st = opt.state[name];
        if (st.m.numel() != theta->numel()) {
            st.m = Tensor::zeros(theta->shape());
            st.v = Tensor::zeros(theta->shape());
            st.step = 0;
        }
        st.step += 1;
        const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.step));
        const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.step));
        double* th = theta->data();
        double* m = st.m.data();
        double* v = st.v.data();
        for (int64_t i = 0; i < g.numel(); ++i) {
            th[i] -= step_lr * weight_decay * th[i];  // decoupled decay
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gd[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gd[i] * gd[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            th[i] -= step_lr * mh / (std::sqrt(vh) + opt.eps);
        }
    }
}

void accumulate_grads(GradMap& into, const std::vector<std::string>& names,
                      const std::vector<Var>& vars, Tape& tape) {
    if (names.size() != vars.size())
        throw std::invalid_argument("accumulate_grads: names/vars size mismatch");
    for (size_t i = 0; i < vars.size(); ++i) {
        if (!tape.requires_grad(vars[i].id)) continue;
        Tensor g = tape.grad_or_zeros(vars[i].id);
        auto it = into.find(names[i]);
        if (it == into.end()) {
            into.emplace(names[i], std::move(g));
        } else {
            Tensor& acc = it->second;
            if (!acc.same_shape(g))
                throw std::invalid_argument("accumulate_grads: shape drift for " + names[i]);
            double* a = acc.data();
            const double* b = g.data();
            for (int64_t k = 0; k < acc.numel(); ++k) a[k] += b[k];
        }
    }
}

bool EarlyStop::update(double val) {
    if (val > best) {
        best = val;
        since_best = 0;
        return true;
    }
    ++since_best;
    return false;
}

ParamRefs checkpoint_params(Checkpoint& ck) {
    ParamRefs out;
    backbone::for_each_param(ck.model,
                             [&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); });
    if (ck.has_adapters)
        adapters::for_each_param(ck.registry,
                                 [&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); });
    return out;
}

namespace {

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

Dtype dtype_from_name(const std::string& s) {
    if (s == "real64") return Dtype::Real64;
    if (s == "complex128") return Dtype::Complex128;
    throw std::runtime_error("checkpoint: unknown dtype " + s);
}

// One canonical uniform draw; keeps weighted sampling independent of the
// library's distribution internals.
double unit_draw(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

size_t weighted_pick(const std::vector<double>& cum, std::mt19937_64& rng) {
    const double u = unit_draw(rng) * cum.back();
    auto it = std::upper_bound(cum.begin(), cum.end(), u);
    size_t i = static_cast<size_t>(it - cum.begin());
    return std::min(i, cum.size() - 1);
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& dir) {
    fs::create_directories(dir);
    json j;
    j["format"] = "hamr-checkpoint";
    j["version"] = 1;
    j["backbone"] = {{"cascades", ck.model.cfg.cascades},
                     {"width", ck.model.cfg.width},
                     {"temporal_radius", ck.model.cfg.temporal_radius},
                     {"lambda_raw_init", ck.model.cfg.lambda_raw_init}};
    json ja;
    ja["present"] = ck.has_adapters;
    if (ck.has_adapters) {
        ja["channels"] = ck.registry.universal.lift_w.dim(0);
        ja["norm_eps"] = ck.registry.universal.norm_eps;
        ja["prob_universal"] = ck.registry.prob_universal;
        std::vector<std::string> protos, centers;
        for (const auto& [id, p] : ck.registry.protocol_adapters) protos.push_back(id);
        for (const auto& [id, p] : ck.registry.center_adapters) centers.push_back(id);
        ja["protocols"] = protos;
        ja["centers"] = centers;
    }
    j["adapters"] = ja;

    json steps = json::object();
    for (const auto& [name, st] : ck.opt.state) steps[name] = st.step;
    j["optimizer"] = {{"beta1", ck.opt.beta1},
                      {"beta2", ck.opt.beta2},
                      {"eps", ck.opt.eps},
                      {"steps", steps}};
    j["state"] = {{"epoch", ck.state.epoch},
                  {"step", ck.state.step},
                  {"best_val_ssim", ck.state.best_val_ssim},
                  {"best_epoch", ck.state.best_epoch},
                  {"epochs_since_best", ck.state.epochs_since_best},
                  {"rng_state", ck.state.rng_state},
                  {"loss_history", ck.state.loss_history}};

    // Tensor payloads: parameters plus optimizer moments, one file each.
    std::vector<std::pair<std::string, const Tensor*>> entries;
    auto& mut = const_cast<Checkpoint&>(ck);
    for (auto& [name, t] : checkpoint_params(mut)) entries.emplace_back(name, t);
    for (const auto& [name, st] : ck.opt.state) {
        entries.emplace_back("opt/" + name + "/m", &st.m);
        entries.emplace_back("opt/" + name + "/v", &st.v);
    }
    json tensors = json::array();
    int seq = 0;
    for (const auto& [name, t] : entries) {
        std::string file = "t" + std::to_string(seq++) + ".bin";
        std::string path = (fs::path(dir) / file).string();
        synth::write_tensor_file(path, *t);
        tensors.push_back({{"name", name},
                           {"file", file},
                           {"dtype", dtype_name(t->dtype())},
                           {"shape", t->shape()},
                           {"sha256", synth::sha256_hex_file(path)}});
    }
    j["tensors"] = tensors;

    std::ofstream out(fs::path(dir) / "model.json", std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot write " + dir);
    out << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "model.json", std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: missing model.json in " + dir);
    json j = json::parse(in);
    if (j.value("format", "") != "hamr-checkpoint")
        throw std::runtime_error("load_checkpoint: not a checkpoint directory: " + dir);

    Checkpoint ck;
    backbone::BackboneConfig mc;
    mc.cascades = j["backbone"]["cascades"].get<int64_t>();
    mc.width = j["backbone"]["width"].get<int64_t>();
    mc.temporal_radius = j["backbone"]["temporal_radius"].get<int64_t>();
    mc.lambda_raw_init = j["backbone"]["lambda_raw_init"].get<double>();
    ck.model = backbone::make_model(mc, 0);

    const json& ja = j["adapters"];
    ck.has_adapters = ja["present"].get<bool>();
    if (ck.has_adapters) {
        adapters::AdapterConfig ac;
        ac.channels = ja["channels"].get<int64_t>();
        ac.norm_eps = ja["norm_eps"].get<double>();
        ck.registry = adapters::make_registry(ac, ja["protocols"].get<std::vector<std::string>>(),
                                              ja["centers"].get<std::vector<std::string>>(), 0);
        ck.registry.prob_universal = ja["prob_universal"].get<double>();
    }

    ck.opt.beta1 = j["optimizer"]["beta1"].get<double>();
    ck.opt.beta2 = j["optimizer"]["beta2"].get<double>();
    ck.opt.eps = j["optimizer"]["eps"].get<double>();

    const json& js = j["state"];
    ck.state.epoch = js["epoch"].get<int64_t>();
    ck.state.step = js["step"].get<int64_t>();
    ck.state.best_val_ssim = js["best_val_ssim"].get<double>();
    ck.state.best_epoch = js["best_epoch"].get<int64_t>();
    ck.state.epochs_since_best = js["epochs_since_best"].get<int64_t>();
    ck.state.rng_state = js["rng_state"].get<std::string>();
    ck.state.loss_history = js["loss_history"].get<std::vector<double>>();

    std::map<std::string, Tensor*> by_name;
    for (auto& [name, t] : checkpoint_params(ck)) by_name[name] = t;

    for (const json& e : j["tensors"]) {
        const std::string name = e["name"].get<std::string>();
        const std::string path = (fs::path(dir) / e["file"].get<std::string>()).string();
        if (e["sha256"].get<std::string>() != synth::sha256_hex_file(path))
            throw std::runtime_error("load_checkpoint: checksum mismatch for " + name);
        Tensor t = synth::read_tensor_file(path, e["shape"].get<std::vector<int64_t>>(),
                                           dtype_from_name(e["dtype"].get<std::string>()));
        if (name.rfind("opt/", 0) == 0) {
            // opt/<param>/m or /v
            std::string rest = name.substr(4);
            bool is_m = rest.size() > 2 && rest.compare(rest.size() - 2, 2, "/m") == 0;
            bool is_v = rest.size() > 2 && rest.compare(rest.size() - 2, 2, "/v") == 0;
            if (!is_m && !is_v) throw std::runtime_error("load_checkpoint: bad moment name " + name);
            std::string pname = rest.substr(0, rest.size() - 2);
            AdamState& st = ck.opt.state[pname];
            (is_m ? st.m : st.v) = std::move(t);
        } else {
            auto it = by_name.find(name);
            if (it == by_name.end())
                throw std::runtime_error("load_checkpoint: unknown parameter " + name);
            *it->second = std::move(t);
        }
    }
    for (const auto& [pname, n] : j["optimizer"]["steps"].items()) {
        auto it = ck.opt.state.find(pname);
        if (it == ck.opt.state.end())
            throw std::runtime_error("load_checkpoint: step count without moments: " + pname);
        it->second.step = n.get<int64_t>();
    }
    return ck;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::string out = "epoch,step,train_loss,val_ssim,val_psnr,lr_backbone,lr_adapter\n";
    for (const MetricsRow& r : rows) {
        out += std::to_string(r.epoch) + "," + std::to_string(r.step) + "," +
               fmt17(r.train_loss) + "," + fmt17(r.val_ssim) + "," + fmt17(r.val_psnr) + "," +
               fmt17(r.lr_backbone) + "," + fmt17(r.lr_adapter) + "\n";
    }
    return out;
}

Tensor reconstruct_case(const Checkpoint& ck, const synth::Case& cs, bool adapted) {
    Tape t;
    backbone::BoundModel bm = backbone::bind(t, ck.model, false);
    Var base = backbone::reconstruct(t, bm, cs.y, cs.sens, cs.mask.pattern);
    Tensor img = t.val(base.id);
    if (adapted && ck.has_adapters) {
        std::mt19937_64 unused(0);  // eval-mode routing draws nothing
        auto sel = adapters::select_adapters(ck.registry, cs.protocol_id, cs.center_id,
                                             adapters::SelectMode::Eval, unused);
        return adapters::adapt(img, sel, ck.registry);
    }
    return img;
}

std::pair<double, double> validate(const Checkpoint& ck, const synth::Dataset& ds,
                                   const std::vector<size_t>& idx, bool adapted) {
    if (idx.empty()) throw std::invalid_argument("validate: empty case list");
    double ssim_sum = 0.0, psnr_sum = 0.0;
    for (size_t i : idx) {
        const synth::Case& cs = ds.cases.at(i);
        Tensor pred = reconstruct_case(ck, cs, adapted);
        ssim_sum += losses::ssim(pred, cs.gt_image);
        psnr_sum += losses::psnr(pred, cs.gt_image);
    }
    const double n = static_cast<double>(idx.size());
    return {ssim_sum / n, psnr_sum / n};
}

namespace {

struct PhasePlan {
    bool finetune = false;
    std::map<std::string, double> center_weight;  // loss scale + sampling weight
    std::function<bool(const std::string&)> trainable;  // null: everything
    std::map<std::string, double> adapter_mult;   // by center id
    double neutral_mult = 1.0;                    // protocol/universal adapters
    int64_t warm_restart_T0_steps = 0;
    double eta_min = 1e-6;
    bool clip = false;
};

bool is_backbone_param(const std::string& name) { return name.rfind("cascade", 0) == 0; }

// Adapter params are named "<kind>/<id>/..."; centers get their own
// multiplier in the fine-tune phase.
double finetune_adapter_mult(const std::string& name, const PhasePlan& plan) {
    if (name.rfind("center/", 0) == 0) {
        std::string id = name.substr(7, name.find('/', 7) - 7);
        auto it = plan.adapter_mult.find(id);
        if (it != plan.adapter_mult.end()) return it->second;
    }
    return plan.neutral_mult;
}

void collect_adapter_names(const adapters::AdapterRegistry& reg, const std::string& key,
                           std::vector<std::string>& names) {
    adapters::for_each_param(adapters::at_key(reg, key), key,
                             [&](const std::string& n, const Tensor&) { names.push_back(n); });
}

backbone::BoundModel bind_backbone(Tape& t, const backbone::Model& m,
                                   const std::vector<std::string>& names,
                                   const std::function<bool(const std::string&)>& trainable) {
    std::vector<Var> leaves;
    size_t i = 0;
    backbone::for_each_param(m, [&](const std::string&, const Tensor& ten) {
        bool rg = !trainable || trainable(names[i]);
        leaves.push_back(t.leaf(ten, rg));
        ++i;
    });
    return backbone::bind_vars(m, leaves);
}

TrainResult run_loop(const TrainConfig& cfg, const synth::Dataset& ds,
                     const std::vector<size_t>& train_idx, const std::vector<size_t>& val_idx,
                     Checkpoint ck, int64_t stop_at_epoch, const PhasePlan& plan) {
    cfg.validate();
    if (train_idx.empty()) throw std::invalid_argument("train: empty training split");
    if (val_idx.empty()) throw std::invalid_argument("train: empty validation split");
    for (size_t i : train_idx)
        if (i >= ds.cases.size()) throw std::out_of_range("train: case index out of range");
    for (size_t i : val_idx)
        if (i >= ds.cases.size()) throw std::out_of_range("train: case index out of range");

    const int64_t n_train = static_cast<int64_t>(train_idx.size());
    const int64_t steps_per_epoch =
        (n_train + cfg.accumulation_steps - 1) / cfg.accumulation_steps;
    const int64_t total_steps = cfg.epochs * steps_per_epoch;

    std::mt19937_64 rng = make_rng(cfg.seed, plan.finetune ? "finetune-loop" : "train-loop");
    if (!ck.state.rng_state.empty()) {
        std::istringstream is(ck.state.rng_state);
        is >> rng;
        if (!is) throw std::runtime_error("train: corrupt RNG state in checkpoint");
    }

    std::vector<std::string> bb_names;
    backbone::for_each_param(ck.model, [&](const std::string& n, const Tensor&) {
        bb_names.push_back(n);
    });
    ParamRefs params = checkpoint_params(ck);

    // Sampling weights for the fine-tune phase (cumulative, unnormalized).
    std::vector<double> cum_w;
    if (plan.finetune && !plan.center_weight.empty()) {
        double acc = 0.0;
        for (size_t i : train_idx) {
            acc += plan.center_weight.at(ds.cases[i].center_id);
            cum_w.push_back(acc);
        }
    }

    EarlyStop stopper{cfg.patience, ck.state.best_val_ssim, ck.state.epochs_since_best};
    Checkpoint best = ck;
    TrainResult result;
    double last_val_ssim = 0.0, last_val_psnr = 0.0;
    const int64_t last_epoch =
        stop_at_epoch > 0 ? std::min<int64_t>(stop_at_epoch, cfg.epochs) : cfg.epochs;

    for (int64_t epoch = ck.state.epoch; epoch < last_epoch; ++epoch) {
        std::vector<size_t> order(train_idx);
        if (!cum_w.empty()) {
            for (auto& slot : order) slot = train_idx[weighted_pick(cum_w, rng)];
        } else {
            std::shuffle(order.begin(), order.end(), rng);
        }

        GradMap acc;
        int64_t micros = 0;
        double group_loss = 0.0, last_group_mean = 0.0;
        bool nan_hit = false;

        for (size_t pos = 0; pos < order.size(); ++pos) {
            const synth::Case& cs = ds.cases[order[pos]];
            Tape t;
            backbone::BoundModel bm = bind_backbone(t, ck.model, bb_names, plan.trainable);
            std::vector<std::string> names = bb_names;
            std::vector<Var> vars = backbone::bound_vars(bm);

            Var pred;
            std::vector<adapters::BoundAdapter> active;
            if (ck.has_adapters) {
                auto sel = adapters::select_adapters(ck.registry, cs.protocol_id, cs.center_id,
                                                     adapters::SelectMode::Train, rng);
                const std::string ckey = adapters::center_registry_key(sel);
                const std::string pkey = adapters::protocol_registry_key(sel);
                auto bc = adapters::bind(t, adapters::at_key(ck.registry, ckey), true);
                auto bp = adapters::bind(t, adapters::at_key(ck.registry, pkey), true);
                collect_adapter_names(ck.registry, ckey, names);
                for (Var v : adapters::bound_vars(bc)) vars.push_back(v);
                collect_adapter_names(ck.registry, pkey, names);
                for (Var v : adapters::bound_vars(bp)) vars.push_back(v);
                active = {bc, bp};
                Var base = backbone::reconstruct(t, bm, cs.y, cs.sens, cs.mask.pattern);
                pred = adapters::adapt(base, bc, bp);
            } else {
                pred = backbone::reconstruct(t, bm, cs.y, cs.sens, cs.mask.pattern);
            }
            Var reg = ck.has_adapters ? adapters::adapter_param_norm(t, active) : t.scalar(0.0);
            losses::TotalLoss tl =
                losses::total_loss(pred, cs.gt_image, cs.protocol_id, cfg.weights, reg);
            Var objective = tl.total;
            if (!plan.center_weight.empty()) {
                double w = plan.center_weight.at(cs.center_id);
                if (w != 1.0) objective = d::scale(objective, w);
            }

            const double lv = t.val(objective.id).data()[0];
            if (!std::isfinite(lv)) {
                nan_hit = true;
                break;
            }
            t.backward(objective);
            accumulate_grads(acc, names, vars, t);
            group_loss += lv;
            ++micros;

            if (micros == cfg.accumulation_steps || pos + 1 == order.size()) {
                const double inv = 1.0 / static_cast<double>(micros);
                for (auto& [name, g] : acc) {
                    double* p = g.data();
                    for (int64_t k = 0; k < g.numel(); ++k) p[k] *= inv;
                }
                if (plan.clip) clip_gradients(acc, cfg.clip_max_norm);

                const double lr_b = lr_schedule(ck.state.step, total_steps, cfg.lr_backbone,
                                                plan.eta_min, plan.warm_restart_T0_steps);
                const double lr_a = plan.finetune
                                        ? lr_b * plan.neutral_mult
                                        : lr_schedule(ck.state.step, total_steps, cfg.lr_adapter,
                                                      plan.eta_min, plan.warm_restart_T0_steps);
                std::map<std::string, double> lrmap;
                for (const auto& [name, ptr] : params) {
                    if (is_backbone_param(name)) {
                        lrmap[name] = lr_b;
                    } else if (plan.finetune) {
                        lrmap[name] = lr_b * finetune_adapter_mult(name, plan);
                    } else {
                        lrmap[name] = lr_a;
                    }
                }
                adamw_step(ck.opt, params, acc, lrmap, cfg.weight_decay);
                ck.state.step += 1;
                last_group_mean = group_loss * inv;
                ck.state.loss_history.push_back(last_group_mean);
                result.log.push_back({epoch + 1, ck.state.step, last_group_mean, last_val_ssim,
                                      last_val_psnr, lr_b, lr_a});
                acc.clear();
                micros = 0;
                group_loss = 0.0;
            }
        }

        if (nan_hit) {
            result.aborted_nan = true;
            result.checkpoint = best;
            return result;
        }

        auto [vs, vp] = validate(ck, ds, val_idx, ck.has_adapters);
        last_val_ssim = vs;
        last_val_psnr = vp;
        ck.state.epoch = epoch + 1;
        std::ostringstream os;
        os << rng;
        ck.state.rng_state = os.str();
        const bool improved = stopper.update(vs);
        ck.state.best_val_ssim = stopper.best;
        ck.state.epochs_since_best = stopper.since_best;
        if (improved) {
            ck.state.best_epoch = epoch + 1;
            best = ck;
        } else {
            best.state.best_val_ssim = stopper.best;
            best.state.epochs_since_best = stopper.since_best;
        }
        result.log.push_back({epoch + 1, ck.state.step, last_group_mean, vs, vp,
                              lr_schedule(ck.state.step, total_steps, cfg.lr_backbone,
                                          plan.eta_min, plan.warm_restart_T0_steps),
                              plan.finetune
                                  ? plan.neutral_mult *
                                        lr_schedule(ck.state.step, total_steps, cfg.lr_backbone,
                                                    plan.eta_min, plan.warm_restart_T0_steps)
                                  : lr_schedule(ck.state.step, total_steps, cfg.lr_adapter,
                                                plan.eta_min, plan.warm_restart_T0_steps)});
        if (stopper.should_stop()) break;
    }

    result.checkpoint = best;
    return result;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const synth::Dataset& ds,
                  const std::vector<size_t>& train_idx, const std::vector<size_t>& val_idx,
                  const Checkpoint* resume, int64_t stop_at_epoch) {
    cfg.validate();
    Checkpoint ck;
    if (resume) {
        ck = *resume;
    } else {
        ck.model = backbone::make_model(cfg.model, derive_seed(cfg.seed, "model-init"));
        ck.has_adapters = cfg.use_adapters;
        if (cfg.use_adapters) {
            std::vector<std::string> protos;
            for (const auto& p : ds.protocols) protos.push_back(p.protocol_id);
            std::sort(protos.begin(), protos.end());
            std::set<std::string> centers;
            for (size_t i : train_idx) centers.insert(ds.cases.at(i).center_id);
            ck.registry = adapters::make_registry(
                cfg.adapter, protos, {centers.begin(), centers.end()},
                derive_seed(cfg.seed, "adapters-init"));
            ck.registry.prob_universal = cfg.prob_universal;
        }
    }
    PhasePlan plan;
    plan.eta_min = cfg.eta_min;
    return run_loop(cfg, ds, train_idx, val_idx, std::move(ck), stop_at_epoch, plan);
}

double center_weight(double mean_ssim, double center_ssim, double wc_min, double wc_max) {
    if (center_ssim <= 0.0)
        throw std::invalid_argument("center_weight: center SSIM must be positive");
    return std::clamp(mean_ssim / center_ssim, wc_min, wc_max);
}

double adapter_lr_mult(double w_c, const FinetuneConfig& fc) {
    const double t = (w_c - fc.wc_min) / (fc.wc_max - fc.wc_min);
    const double m = fc.adapter_mult_min + t * (fc.adapter_mult_max - fc.adapter_mult_min);
    return std::clamp(m, fc.adapter_mult_min, fc.adapter_mult_max);
}

TrainResult progressive_finetune(const TrainConfig& cfg, const Checkpoint& start,
                                 const synth::Dataset& ds,
                                 const std::vector<size_t>& train_idx,
                                 const std::vector<size_t>& val_idx,
                                 const std::map<std::string, double>& baseline_ssim) {
    cfg.validate();
    if (train_idx.empty()) throw std::invalid_argument("progressive_finetune: empty training split");

    std::set<std::string> centers;
    for (size_t i : train_idx) centers.insert(ds.cases.at(i).center_id);
    double mean = 0.0;
    for (const std::string& c : centers) {
        auto it = baseline_ssim.find(c);
        if (it == baseline_ssim.end())
            throw std::invalid_argument("progressive_finetune: no baseline SSIM for center " + c);
        mean += it->second;
    }
    mean /= static_cast<double>(centers.size());

    PhasePlan plan;
    plan.finetune = true;
    for (const std::string& c : centers) {
        const double w = center_weight(mean, baseline_ssim.at(c), cfg.finetune.wc_min,
                                       cfg.finetune.wc_max);
        plan.center_weight[c] = w;
        plan.adapter_mult[c] = adapter_lr_mult(w, cfg.finetune);
    }
    plan.neutral_mult = adapter_lr_mult(1.0, cfg.finetune);
    plan.eta_min = cfg.finetune.eta_min;
    plan.clip = true;
    const int64_t spe = (static_cast<int64_t>(train_idx.size()) + cfg.accumulation_steps - 1) /
                        cfg.accumulation_steps;
    plan.warm_restart_T0_steps = cfg.finetune.warm_restart_epochs * spe;

    const int64_t last = start.model.cfg.cascades - 1;
    const std::string last_prefix = "cascade" + std::to_string(last) + "/";
    plan.trainable = [last_prefix](const std::string& name) {
        if (!is_backbone_param(name)) return true;  // adapters
        if (name.rfind(last_prefix, 0) == 0) return true;
        if (name.find("/head/") != std::string::npos) return true;
        if (name.size() >= 10 && name.compare(name.size() - 10, 10, "lambda_raw") == 0) return true;
        return false;
    };

    Checkpoint ck = start;
    ck.state = TrainState{};  // fresh phase: new schedule, new moments
    ck.opt = AdamW{};
    if (ck.has_adapters) ck.registry.prob_universal = cfg.prob_universal;
    return run_loop(cfg, ds, train_idx, val_idx, std::move(ck), -1, plan);
}

}  // namespace hamr::train
