#include "hamr/evalcli.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>
#include <tuple>

#include "hamr/kspace.hpp"
#include "json.hpp"

namespace hamr::evalcli {

using nlohmann::json;

EvalMode mode_from_string(const std::string& s) {
    if (s == "zero_filled") return EvalMode::ZeroFilled;
    if (s == "baseline") return EvalMode::Baseline;
    if (s == "adapted") return EvalMode::Adapted;
    throw std::invalid_argument("unknown eval mode: " + s +
                                " (want zero_filled | baseline | adapted)");
}

std::string mode_name(EvalMode m) {
    switch (m) {
        case EvalMode::ZeroFilled: return "zero_filled";
        case EvalMode::Baseline: return "baseline";
        default: return "adapted";
    }
}

namespace {

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string fmt4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

Tensor frame_of(const Tensor& stack, int64_t t) {
    const int64_t H = stack.dim(1), W = stack.dim(2);
    Tensor f({H, W}, Dtype::Real64);
    for (int64_t i = 0; i < H * W; ++i) f.r(i) = stack.r(t * H * W + i);
    return f;
}

// mean over frames of the per-frame metrics against gt
void score_frames(const Tensor& pred, const Tensor& gt, CaseScore& sc) {
    ensure(pred.same_shape(gt) && !pred.is_complex() && gt.rank() == 3,
           "evaluate: prediction/gt shape mismatch");
    const int64_t T = gt.dim(0);
    double ss = 0.0, ps = 0.0;
    for (int64_t t = 0; t < T; ++t) {
        Tensor xt = frame_of(pred, t), gt_t = frame_of(gt, t);
        ss += losses::ssim(xt, gt_t);
        ps += losses::psnr(xt, gt_t);
    }
    sc.frames = T;
    sc.ssim = ss / static_cast<double>(T);
    sc.psnr = ps / static_cast<double>(T);
}

} // namespace

ModeReport evaluate(const train::Checkpoint& ck, const synth::Dataset& ds, EvalMode mode) {
    std::vector<size_t> all(ds.cases.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    return evaluate(ck, ds, all, mode);
}

ModeReport evaluate(const train::Checkpoint& ck, const synth::Dataset& ds,
                    const std::vector<size_t>& idx, EvalMode mode) {
    ensure(!idx.empty(), "evaluate: empty case list");
    if (mode == EvalMode::Adapted)
        ensure(ck.has_adapters, "evaluate: adapted mode needs a checkpoint with adapters");

    std::vector<size_t> order(idx);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return ds.cases.at(a).case_id < ds.cases.at(b).case_id;
    });

    ModeReport rep;
    rep.mode = mode;
    for (size_t i : order) {
        const synth::Case& cs = ds.cases.at(i);
        const synth::CenterProfile& prof = ds.center(cs.center_id);
        CaseScore sc;
        sc.case_id = cs.case_id;
        sc.center_id = cs.center_id;
        sc.protocol_id = cs.protocol_id;
        sc.vendor = synth::vendor_name(prof.vendor_tag);
        sc.field_strength = prof.field_strength;

        Tensor pred;
        switch (mode) {
            case EvalMode::ZeroFilled:
                pred = kspace::zero_filled_recon(cs.y);
                break;
            case EvalMode::Baseline:
                pred = train::reconstruct_case(ck, cs, false);
                break;
            case EvalMode::Adapted: {
                ensure(ck.registry.protocol_adapters.count(cs.protocol_id) > 0,
                       "evaluate: protocol '" + cs.protocol_id + "' has no adapter");
                std::mt19937_64 unused(0);  // eval routing draws nothing
                auto sel = adapters::select_adapters(ck.registry, cs.protocol_id, cs.center_id,
                                                     adapters::SelectMode::Eval, unused);
                sc.protocol_key = adapters::protocol_registry_key(sel);
                sc.center_key = adapters::center_registry_key(sel);
                pred = train::reconstruct_case(ck, cs, true);
                break;
            }
        }
        score_frames(pred, cs.gt_image, sc);
        rep.cases.push_back(std::move(sc));
    }

    std::map<std::tuple<std::string, std::string, double>, GroupRow> groups;
    for (const CaseScore& sc : rep.cases) {
        GroupRow& g = groups[{sc.center_id, sc.vendor, sc.field_strength}];
        if (g.n_cases == 0) {
            g.center_id = sc.center_id;
            g.vendor = sc.vendor;
            g.field_strength = sc.field_strength;
        }
        g.n_cases++;
        g.ssim += sc.ssim;
        g.psnr += sc.psnr;
    }
    rep.total_cases = static_cast<int64_t>(rep.cases.size());
    double wssim = 0.0, wpsnr = 0.0;
    for (auto& [key, g] : groups) {
        g.ssim /= static_cast<double>(g.n_cases);
        g.psnr /= static_cast<double>(g.n_cases);
        wssim += static_cast<double>(g.n_cases) * g.ssim;
        wpsnr += static_cast<double>(g.n_cases) * g.psnr;
        rep.rows.push_back(g);
    }
    rep.overall_ssim = wssim / static_cast<double>(rep.total_cases);
    rep.overall_psnr = wpsnr / static_cast<double>(rep.total_cases);
    return rep;
}

std::map<std::string, double> per_center_ssim(const train::Checkpoint& ck,
                                              const synth::Dataset& ds,
                                              const std::vector<size_t>& idx, bool adapted) {
    ModeReport rep = evaluate(ck, ds, idx, adapted ? EvalMode::Adapted : EvalMode::Baseline);
    std::map<std::string, double> ssim_sum;
    std::map<std::string, int64_t> n;
    for (const CaseScore& sc : rep.cases) {
        ssim_sum[sc.center_id] += sc.ssim;
        n[sc.center_id]++;
    }
    std::map<std::string, double> out;
    for (const auto& [id, s] : ssim_sum) out[id] = s / static_cast<double>(n.at(id));
    return out;
}

namespace {

// 0 when the two sides are the same value (covers inf == inf); otherwise the
// literal relative-change formula.
double delta_pct(double baseline, double adapted) {
    if (baseline == adapted) return 0.0;
    return 100.0 * (adapted - baseline) / baseline;
}

} // namespace

CenterReport compare(const ModeReport& baseline, const ModeReport& adapted) {
    ensure(baseline.cases.size() == adapted.cases.size(),
           "compare: reports cover different case sets");
    for (size_t i = 0; i < baseline.cases.size(); ++i)
        ensure(baseline.cases[i].case_id == adapted.cases[i].case_id,
               "compare: reports cover different case sets");
    ensure(baseline.rows.size() == adapted.rows.size(), "compare: group row mismatch");

    CenterReport out;
    out.total_cases = baseline.total_cases;
    for (size_t i = 0; i < baseline.rows.size(); ++i) {
        const GroupRow& b = baseline.rows[i];
        const GroupRow& a = adapted.rows[i];
        ensure(b.center_id == a.center_id && b.vendor == a.vendor &&
                   b.field_strength == a.field_strength && b.n_cases == a.n_cases,
               "compare: group row mismatch");
        CenterReportRow r;
        r.center_id = b.center_id;
        r.vendor = b.vendor;
        r.field_strength = b.field_strength;
        r.n_cases = b.n_cases;
        r.ssim_baseline = b.ssim;
        r.psnr_baseline = b.psnr;
        r.ssim_adapted = a.ssim;
        r.psnr_adapted = a.psnr;
        r.delta_pct_ssim = delta_pct(b.ssim, a.ssim);
        r.delta_pct_psnr = delta_pct(b.psnr, a.psnr);
        out.rows.push_back(r);
    }
    out.overall_ssim_baseline = baseline.overall_ssim;
    out.overall_psnr_baseline = baseline.overall_psnr;
    out.overall_ssim_adapted = adapted.overall_ssim;
    out.overall_psnr_adapted = adapted.overall_psnr;
    out.overall_delta_pct_ssim = delta_pct(baseline.overall_ssim, adapted.overall_ssim);
    out.overall_delta_pct_psnr = delta_pct(baseline.overall_psnr, adapted.overall_psnr);
    return out;
}

std::string mode_csv(const ModeReport& r) {
    std::string out = "center,vendor,field_T,n_cases,ssim,psnr,mode\n";
    for (const GroupRow& g : r.rows)
        out += g.center_id + "," + g.vendor + "," + fmt17(g.field_strength) + "," +
               std::to_string(g.n_cases) + "," + fmt17(g.ssim) + "," + fmt17(g.psnr) + "," +
               mode_name(r.mode) + "\n";
    return out;
}

std::string routing_audit_csv(const ModeReport& r) {
    std::string out = "case_id,protocol_key,center_key\n";
    for (const CaseScore& sc : r.cases)
        out += sc.case_id + "," + sc.protocol_key + "," + sc.center_key + "\n";
    return out;
}

std::string center_report_csv(const CenterReport& r) {
    std::string out =
        "center,vendor,field_T,n_cases,ssim_baseline,psnr_baseline,ssim_adapted,"
        "psnr_adapted,delta_pct_ssim,delta_pct_psnr\n";
    for (const CenterReportRow& row : r.rows)
        out += row.center_id + "," + row.vendor + "," + fmt17(row.field_strength) + "," +
               std::to_string(row.n_cases) + "," + fmt17(row.ssim_baseline) + "," +
               fmt17(row.psnr_baseline) + "," + fmt17(row.ssim_adapted) + "," +
               fmt17(row.psnr_adapted) + "," + fmt17(row.delta_pct_ssim) + "," +
               fmt17(row.delta_pct_psnr) + "\n";
    out += "ALL,-,-," + std::to_string(r.total_cases) + "," + fmt17(r.overall_ssim_baseline) +
           "," + fmt17(r.overall_psnr_baseline) + "," + fmt17(r.overall_ssim_adapted) + "," +
           fmt17(r.overall_psnr_adapted) + "," + fmt17(r.overall_delta_pct_ssim) + "," +
           fmt17(r.overall_delta_pct_psnr) + "\n";
    return out;
}

std::string center_report_text(const CenterReport& r) {
    std::ostringstream os;
    char line[200];
    std::snprintf(line, sizeof line, "%-8s %-6s %7s %7s | %9s %9s | %9s %9s | %8s %8s\n",
                  "center", "vendor", "field_T", "n_cases", "ssim_b", "psnr_b", "ssim_a",
                  "psnr_a", "dssim%", "dpsnr%");
    os << line;
    for (const CenterReportRow& row : r.rows) {
        std::snprintf(line, sizeof line,
                      "%-8s %-6s %7s %7lld | %9s %9s | %9s %9s | %8s %8s\n",
                      row.center_id.c_str(), row.vendor.c_str(), fmt2(row.field_strength).c_str(),
                      static_cast<long long>(row.n_cases), fmt4(row.ssim_baseline).c_str(),
                      fmt2(row.psnr_baseline).c_str(), fmt4(row.ssim_adapted).c_str(),
                      fmt2(row.psnr_adapted).c_str(), fmt2(row.delta_pct_ssim).c_str(),
                      fmt2(row.delta_pct_psnr).c_str());
        os << line;
    }
    std::snprintf(line, sizeof line,
                  "overall (%lld cases): SSIM %s -> %s (%s%%), PSNR %s -> %s (%s%%)\n",
                  static_cast<long long>(r.total_cases), fmt4(r.overall_ssim_baseline).c_str(),
                  fmt4(r.overall_ssim_adapted).c_str(), fmt2(r.overall_delta_pct_ssim).c_str(),
                  fmt2(r.overall_psnr_baseline).c_str(), fmt2(r.overall_psnr_adapted).c_str(),
                  fmt2(r.overall_delta_pct_psnr).c_str());
    os << line;
    return os.str();
}

EfficiencyReport report_param_efficiency(const train::Checkpoint& ck, double ceiling) {
    ensure(ceiling >= 0.0, "report: ceiling must be >= 0");
    EfficiencyReport rep;
    rep.ceiling = ceiling;
    std::map<std::string, int64_t> sizes;
    if (ck.has_adapters) sizes = adapters::param_counts(ck.registry);
    rep.counts = backbone::count_params(ck.model, sizes);
    rep.ok = rep.counts.adapter_fraction <= ceiling;

    std::ostringstream text;
    size_t kw = 13;  // "adapter total"
    for (const auto& [key, n] : rep.counts.per_adapter) kw = std::max(kw, key.size());
    auto line = [&](const std::string& key, int64_t n) {
        text << "  " << key << std::string(kw - key.size() + 2, ' ') << n << "\n";
    };
    text << "parameter efficiency\n";
    line("backbone", rep.counts.backbone);
    for (const auto& [key, n] : rep.counts.per_adapter) line(key, n);
    line("adapter total", rep.counts.adapter_total);
    line("grand total", rep.counts.total);
    text << "  adapter fraction " << fmt2(100.0 * rep.counts.adapter_fraction) << "% (ceiling "
         << fmt2(100.0 * ceiling) << "%): " << (rep.ok ? "PASS" : "FAIL") << "\n";
    text << "reference point: a full-scale adapter stack adds 2.1M parameters "
            "(3.2% of baseline).\n";
    rep.text = text.str();

    std::string csv = "component,params\n";
    csv += "backbone," + std::to_string(rep.counts.backbone) + "\n";
    for (const auto& [key, n] : rep.counts.per_adapter) csv += key + "," + std::to_string(n) + "\n";
    csv += "adapter_total," + std::to_string(rep.counts.adapter_total) + "\n";
    csv += "total," + std::to_string(rep.counts.total) + "\n";
    csv += "adapter_fraction," + fmt17(rep.counts.adapter_fraction) + "\n";
    rep.csv = csv;
    return rep;
}

namespace {

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    ensure(j.is_object(), "config: " + where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) known = true;
        ensure(known, "config: unknown key \"" + it.key() + "\" in " + where);
    }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

synth::CenterProfile center_from_json(const json& j, size_t pos) {
    const std::string where = "fleet.centers[" + std::to_string(pos) + "]";
    check_keys(j, where,
               {"center_id", "vendor", "field_strength", "noise_sigma", "bias_field_strength",
                "coil_count"});
    synth::CenterProfile c;
    c.center_id = j.at("center_id").get<std::string>();
    if (j.contains("vendor")) c.vendor_tag = synth::vendor_from_string(j.at("vendor"));
    read_if(j, "field_strength", c.field_strength);
    read_if(j, "noise_sigma", c.noise_sigma);
    read_if(j, "bias_field_strength", c.bias_field_strength);
    read_if(j, "coil_count", c.coil_count);
    c.validate();
    return c;
}

synth::ProtocolProfile protocol_from_json(const json& j, size_t pos) {
    const std::string where = "fleet.protocols[" + std::to_string(pos) + "]";
    check_keys(j, where,
               {"protocol_id", "frames", "wall_motion_amp", "enhance_rate", "decay_t1",
                "decay_t2"});
    synth::ProtocolProfile p;
    p.protocol_id = j.at("protocol_id").get<std::string>();
    read_if(j, "frames", p.frames);
    read_if(j, "wall_motion_amp", p.wall_motion_amp);
    read_if(j, "enhance_rate", p.enhance_rate);
    read_if(j, "decay_t1", p.decay_t1);
    read_if(j, "decay_t2", p.decay_t2);
    p.validate();
    return p;
}

} // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j = json::parse(text);
    check_keys(j, "top level",
               {"schema_version", "seed", "fleet", "model", "adapter", "train", "finetune",
                "loss", "split"});
    RunConfig cfg;
    read_if(j, "schema_version", cfg.schema_version);
    read_if(j, "seed", cfg.seed);

    if (j.contains("fleet")) {
        const json& f = j.at("fleet");
        check_keys(f, "fleet", {"patients_per_center", "accel", "centers", "protocols"});
        read_if(f, "patients_per_center", cfg.fleet.patients_per_center);
        read_if(f, "accel", cfg.fleet.accel);
        if (f.contains("centers")) {
            ensure(f.at("centers").is_array(), "config: fleet.centers must be an array");
            cfg.fleet.centers.clear();
            for (size_t i = 0; i < f.at("centers").size(); ++i)
                cfg.fleet.centers.push_back(center_from_json(f.at("centers")[i], i));
        }
        if (f.contains("protocols")) {
            ensure(f.at("protocols").is_array(), "config: fleet.protocols must be an array");
            cfg.fleet.protocols.clear();
            for (size_t i = 0; i < f.at("protocols").size(); ++i)
                cfg.fleet.protocols.push_back(protocol_from_json(f.at("protocols")[i], i));
        }
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m, "model", {"cascades", "width", "temporal_radius", "lambda_raw_init"});
        read_if(m, "cascades", cfg.train.model.cascades);
        read_if(m, "width", cfg.train.model.width);
        read_if(m, "temporal_radius", cfg.train.model.temporal_radius);
        read_if(m, "lambda_raw_init", cfg.train.model.lambda_raw_init);
    }
    if (j.contains("adapter")) {
        const json& a = j.at("adapter");
        check_keys(a, "adapter", {"channels", "alpha_init", "norm_eps"});
        read_if(a, "channels", cfg.train.adapter.channels);
        read_if(a, "alpha_init", cfg.train.adapter.alpha_init);
        read_if(a, "norm_eps", cfg.train.adapter.norm_eps);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t, "train",
                   {"use_adapters", "lr_backbone", "lr_adapter", "weight_decay", "eta_min",
                    "accumulation_steps", "patience", "prob_universal", "epochs",
                    "clip_max_norm"});
        read_if(t, "use_adapters", cfg.train.use_adapters);
        read_if(t, "lr_backbone", cfg.train.lr_backbone);
        read_if(t, "lr_adapter", cfg.train.lr_adapter);
        read_if(t, "weight_decay", cfg.train.weight_decay);
        read_if(t, "eta_min", cfg.train.eta_min);
        read_if(t, "accumulation_steps", cfg.train.accumulation_steps);
        read_if(t, "patience", cfg.train.patience);
        read_if(t, "prob_universal", cfg.train.prob_universal);
        read_if(t, "epochs", cfg.train.epochs);
        read_if(t, "clip_max_norm", cfg.train.clip_max_norm);
    }
    if (j.contains("finetune")) {
        const json& f = j.at("finetune");
        check_keys(f, "finetune",
                   {"wc_min", "wc_max", "warm_restart_epochs", "eta_min", "adapter_mult_min",
                    "adapter_mult_max"});
        read_if(f, "wc_min", cfg.train.finetune.wc_min);
        read_if(f, "wc_max", cfg.train.finetune.wc_max);
        read_if(f, "warm_restart_epochs", cfg.train.finetune.warm_restart_epochs);
        read_if(f, "eta_min", cfg.train.finetune.eta_min);
        read_if(f, "adapter_mult_min", cfg.train.finetune.adapter_mult_min);
        read_if(f, "adapter_mult_max", cfg.train.finetune.adapter_mult_max);
    }
    if (j.contains("loss"))
        cfg.train.weights = losses::LossWeights::from_json_text(j.at("loss").dump());
    if (j.contains("split")) {
        const json& s = j.at("split");
        check_keys(s, "split", {"holdout_center", "val_frac"});
        read_if(s, "holdout_center", cfg.holdout_center);
        read_if(s, "val_frac", cfg.val_frac);
    }
    cfg.train.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

std::string RunConfig::to_json_text() const {
    json j;
    j["schema_version"] = schema_version;
    j["seed"] = seed;
    json centers = json::array();
    for (const synth::CenterProfile& c : fleet.centers)
        centers.push_back({{"center_id", c.center_id},
                           {"vendor", synth::vendor_name(c.vendor_tag)},
                           {"field_strength", c.field_strength},
                           {"noise_sigma", c.noise_sigma},
                           {"bias_field_strength", c.bias_field_strength},
                           {"coil_count", c.coil_count}});
    json protocols = json::array();
    for (const synth::ProtocolProfile& p : fleet.protocols)
        protocols.push_back({{"protocol_id", p.protocol_id},
                             {"frames", p.frames},
                             {"wall_motion_amp", p.wall_motion_amp},
                             {"enhance_rate", p.enhance_rate},
                             {"decay_t1", p.decay_t1},
                             {"decay_t2", p.decay_t2}});
    j["fleet"] = {{"patients_per_center", fleet.patients_per_center},
                  {"accel", fleet.accel},
                  {"centers", centers},
                  {"protocols", protocols}};
    j["model"] = {{"cascades", train.model.cascades},
                  {"width", train.model.width},
                  {"temporal_radius", train.model.temporal_radius},
                  {"lambda_raw_init", train.model.lambda_raw_init}};
    j["adapter"] = {{"channels", train.adapter.channels},
                    {"alpha_init", train.adapter.alpha_init},
                    {"norm_eps", train.adapter.norm_eps}};
    j["train"] = {{"use_adapters", train.use_adapters},
                  {"lr_backbone", train.lr_backbone},
                  {"lr_adapter", train.lr_adapter},
                  {"weight_decay", train.weight_decay},
                  {"eta_min", train.eta_min},
                  {"accumulation_steps", train.accumulation_steps},
                  {"patience", train.patience},
                  {"prob_universal", train.prob_universal},
                  {"epochs", train.epochs},
                  {"clip_max_norm", train.clip_max_norm}};
    j["finetune"] = {{"wc_min", train.finetune.wc_min},
                     {"wc_max", train.finetune.wc_max},
                     {"warm_restart_epochs", train.finetune.warm_restart_epochs},
                     {"eta_min", train.finetune.eta_min},
                     {"adapter_mult_min", train.finetune.adapter_mult_min},
                     {"adapter_mult_max", train.finetune.adapter_mult_max}};
    j["loss"] = json::parse(train.weights.to_json_text());
    j["split"] = {{"holdout_center", holdout_center}, {"val_frac", val_frac}};
    return j.dump(2) + "\n";
}

void RunConfig::validate() const {
    ensure(schema_version == 1, "config: unsupported schema_version " +
                                    std::to_string(schema_version));
    ensure(val_frac > 0.0 && val_frac < 1.0, "config: val_frac must be in (0, 1)");
    ensure(!fleet.centers.empty(), "config: fleet needs at least one center");
    ensure(!fleet.protocols.empty(), "config: fleet needs at least one protocol");
    ensure(fleet.patients_per_center >= 1, "config: patients_per_center must be >= 1");
    ensure(fleet.accel >= 1.0, "config: accel must be >= 1");
    std::set<std::string> center_ids;
    for (const synth::CenterProfile& c : fleet.centers) {
        c.validate();
        ensure(center_ids.insert(c.center_id).second,
               "config: duplicate center " + c.center_id);
    }
    std::set<std::string> protocol_ids;
    for (const synth::ProtocolProfile& p : fleet.protocols) {
        p.validate();
        ensure(protocol_ids.insert(p.protocol_id).second,
               "config: duplicate protocol " + p.protocol_id);
    }
    if (!holdout_center.empty())
        ensure(center_ids.count(holdout_center) > 0,
               "config: holdout_center " + holdout_center + " not in the fleet");
    train.validate();
}

std::pair<std::vector<size_t>, std::vector<size_t>>
plan_split(const RunConfig& cfg, const synth::Dataset& ds) {
    if (cfg.holdout_center.empty()) return synth::split_by_center(ds, cfg.val_frac);
    auto [rest, held] = synth::hold_out_center(ds, cfg.holdout_center);
    return synth::split_by_center(ds, rest, cfg.val_frac);
}

}  // namespace hamr::evalcli
