#include "hamr/synthgen.hpp"

#include "hamr/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

namespace hamr::synth {

Vendor vendor_from_string(const std::string& s) {
    if (s == "A") return Vendor::A;
    if (s == "B") return Vendor::B;
    if (s == "C") return Vendor::C;
    if (s == "D") return Vendor::D;
    ensure(false, "unknown vendor tag: " + s);
    return Vendor::A;
}

std::string vendor_name(Vendor v) {
    switch (v) {
        case Vendor::A: return "A";
        case Vendor::B: return "B";
        case Vendor::C: return "C";
        default: return "D";
    }
}

void CenterProfile::validate() const {
    ensure(!center_id.empty(), "center profile: empty center_id");
    ensure(field_strength == 1.5 || field_strength == 3.0 || field_strength == 5.0,
           "center profile: field_strength must be 1.5, 3.0 or 5.0 (" + center_id + ")");
    ensure(noise_sigma >= 0.0, "center profile: negative noise_sigma (" + center_id + ")");
    ensure(bias_field_strength >= 0.0 && bias_field_strength <= 0.5,
           "center profile: bias_field_strength outside [0, 0.5] (" + center_id + ")");
    ensure(coil_count == 1 || coil_count == 4 || coil_count == 8,
           "center profile: coil_count must be 1, 4 or 8 (" + center_id + ")");
}

double sigma_for_field(double sigma0, double field_strength) {
    ensure(field_strength > 0.0, "sigma_for_field: field_strength must be positive");
    return sigma0 * (3.0 / field_strength);
}

void ProtocolProfile::validate() const {
    ensure(protocol_id == "cine" || protocol_id == "lge" || protocol_id == "mapping" ||
               protocol_id == "perfusion",
           "protocol profile: unknown protocol_id: " + protocol_id);
    ensure(frames >= 1, "protocol profile: frames must be >= 1");
    if (protocol_id == "cine")
        ensure(frames == 5, "protocol profile: cine uses 5 frames");
}

const CenterProfile& Dataset::center(const std::string& id) const {
    for (const auto& c : centers)
        if (c.center_id == id) return c;
    ensure(false, "dataset: unknown center " + id);
    return centers.front();
}

const ProtocolProfile& Dataset::protocol(const std::string& id) const {
    for (const auto& p : protocols)
        if (p.protocol_id == id) return p;
    ensure(false, "dataset: unknown protocol " + id);
    return protocols.front();
}

std::vector<CenterProfile> default_centers() {
    auto mk = [](const char* id, Vendor v, double field, double sigma0, double bias,
                 int64_t coils) {
        CenterProfile c;
        c.center_id = id;
        c.vendor_tag = v;
        c.field_strength = field;
        c.noise_sigma = sigma_for_field(sigma0, field);
        c.bias_field_strength = bias;
        c.coil_count = coils;
        return c;
    };
    return {
        mk("C001", Vendor::A, 3.0, 0.004, 0.15, 8),
        mk("C002", Vendor::B, 1.5, 0.005, 0.25, 4),
        mk("C003", Vendor::C, 3.0, 0.003, 0.10, 8),
        mk("C004", Vendor::D, 5.0, 0.006, 0.35, 4),
        mk("C005", Vendor::A, 1.5, 0.004, 0.20, 1),
    };
}

std::vector<ProtocolProfile> default_protocols() {
    ProtocolProfile cine{"cine", 5, 0.15, 0.0, 0.0, 0.0};
    ProtocolProfile lge{"lge", 1, 0.0, 2.0, 0.0, 0.0};
    ProtocolProfile mapping{"mapping", 3, 0.0, 0.0, 0.35, 0.6};
    ProtocolProfile perfusion{"perfusion", 5, 0.0, 0.8, 0.0, 0.0};
    return {cine, lge, mapping, perfusion};
}

namespace {

constexpr double kPi = std::numbers::pi;

// 1 inside (d << 0), 0 outside, smooth over [-delta, delta].
double coverage(double d, double delta) {
    double t = std::clamp((delta - d) / (2.0 * delta), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

struct Anatomy {
    double body_cx, body_cy, body_a, body_b, body_rot;
    double heart_cx, heart_cy, r_in, r_out;
    double scar_center, scar_halfwidth;
};

Anatomy draw_anatomy(std::mt19937_64& rng) {
    Anatomy a;
    a.body_cx = 0.50 + uniform(rng, -0.02, 0.02);
    a.body_cy = 0.52 + uniform(rng, -0.02, 0.02);
    a.body_a = 0.40 * (1.0 + uniform(rng, -0.05, 0.05));
    a.body_b = 0.33 * (1.0 + uniform(rng, -0.05, 0.05));
    a.body_rot = 0.15 + uniform(rng, -0.10, 0.10);
    a.heart_cx = 0.56 + uniform(rng, -0.02, 0.02);
    a.heart_cy = 0.44 + uniform(rng, -0.02, 0.02);
    a.r_out = 0.165 * (1.0 + uniform(rng, -0.08, 0.08));
    a.r_in = 0.105 * (1.0 + uniform(rng, -0.08, 0.08));
    a.scar_center = 0.85 + uniform(rng, -0.3, 0.3);
    a.scar_halfwidth = 0.55 * (1.0 + uniform(rng, -0.15, 0.15));
    return a;
}

struct FrameLook {
    double r_in, r_out;
    double blood, myo, scar; // scar < 0 means no scar wedge
};

FrameLook frame_look(const ProtocolProfile& p, const Anatomy& a, int64_t t) {
    FrameLook f{a.r_in, a.r_out, 0.0, 0.0, -1.0};
    double ft = static_cast<double>(t);
    if (p.protocol_id == "cine") {
        double swing = std::sin(2.0 * kPi * ft / static_cast<double>(p.frames));
        f.r_in = a.r_in * (1.0 + p.wall_motion_amp * swing);
        f.r_out = a.r_out * (1.0 + 0.4 * p.wall_motion_amp * swing);
        f.blood = 1.0;
        f.myo = 0.55;
    } else if (p.protocol_id == "lge") {
        f.blood = 0.85;
        f.myo = 0.40;
        f.scar = f.myo + 0.55 * (1.0 - std::exp(-p.enhance_rate));
    } else if (p.protocol_id == "mapping") {
        f.blood = 0.95 * std::exp(-p.decay_t2 * ft);
        f.myo = 0.75 * std::exp(-p.decay_t1 * ft);
    } else { // perfusion
        f.blood = 0.25 + 0.75 * (1.0 - std::exp(-p.enhance_rate * ft));
        f.myo = 0.30 + 0.45 * (1.0 - std::exp(-p.enhance_rate * std::max(0.0, ft - 1.0)));
    }
    return f;
}

} // namespace

Tensor phantom_image(const ProtocolProfile& protocol, uint64_t seed, int64_t H, int64_t W) {
    protocol.validate();
    auto rng = make_rng(seed, "anatomy");
    Anatomy a = draw_anatomy(rng);

    int64_t T = protocol.frames;
    Tensor img({T, H, W}, Dtype::Real64);
    double delta = 1.5 / static_cast<double>(std::min(H, W));
    double cb = std::cos(a.body_rot), sb = std::sin(a.body_rot);

    for (int64_t t = 0; t < T; ++t) {
        FrameLook f = frame_look(protocol, a, t);
        double* out = img.data() + t * H * W;
        for (int64_t r = 0; r < H; ++r) {
            double v = (static_cast<double>(r) + 0.5) / static_cast<double>(H);
            for (int64_t c = 0; c < W; ++c) {
                double u = (static_cast<double>(c) + 0.5) / static_cast<double>(W);

                double dx = u - a.body_cx, dy = v - a.body_cy;
                double xr = cb * dx + sb * dy, yr = -sb * dx + cb * dy;
                double rho = std::hypot(xr / a.body_a, yr / a.body_b);
                double w_body = coverage((rho - 1.0) * std::min(a.body_a, a.body_b), delta);

                double rr = std::hypot(u - a.heart_cx, v - a.heart_cy);
                double w_out = coverage(rr - f.r_out, delta);
                double w_in = coverage(rr - f.r_in, delta);

                double myo = f.myo;
                if (f.scar >= 0.0) {
                    double ang = std::atan2(v - a.heart_cy, u - a.heart_cx) - a.scar_center;
                    ang = std::remainder(ang, 2.0 * kPi);
                    double w_ang = coverage(std::abs(ang) - a.scar_halfwidth, 0.2);
                    myo += (f.scar - f.myo) * w_ang;
                }

                double val = 0.35 * w_body;
                val = val * (1.0 - w_out) + myo * (w_out - w_in) + f.blood * w_in;
                out[r * W + c] = val;
            }
        }
    }
    return img;
}

Tensor bias_field(const CenterProfile& center, uint64_t case_seed, int64_t H, int64_t W) {
    center.validate();
    // Signature coefficients depend only on the center; the case seed adds a
    // small jitter on top.
    auto sig_rng = make_rng(fnv1a("bias-" + center.center_id), "signature");
    auto jit_rng = make_rng(case_seed, "bias-jitter");
    double coef[5];
    for (double& c : coef) c = uniform(sig_rng, -1.0, 1.0);
    for (double& c : coef) c *= 1.0 + uniform(jit_rng, -0.1, 0.1);

    Tensor p({H, W}, Dtype::Real64);
    for (int64_t r = 0; r < H; ++r) {
        double v = 2.0 * (static_cast<double>(r) + 0.5) / static_cast<double>(H) - 1.0;
        for (int64_t c = 0; c < W; ++c) {
            double u = 2.0 * (static_cast<double>(c) + 0.5) / static_cast<double>(W) - 1.0;
            p.data()[r * W + c] = coef[0] * u + coef[1] * v + coef[2] * u * v +
                                  coef[3] * (u * u - 1.0 / 3.0) + coef[4] * (v * v - 1.0 / 3.0);
        }
    }
    double m = p.max_abs();
    double b = center.bias_field_strength;
    Tensor bias({H, W}, Dtype::Real64);
    for (int64_t i = 0; i < bias.numel(); ++i)
        bias.data()[i] = 1.0 + (m > 1e-12 ? b * p.data()[i] / m : 0.0);
    return bias;
}

Tensor sens_maps(int64_t coils, int64_t H, int64_t W, uint64_t seed) {
    ensure(coils >= 1, "sens_maps: coils must be >= 1");
    auto rng = make_rng(seed, "sens");
    struct CoilParams {
        double px, py, width, kappa, beta, tx, ty;
    };
    std::vector<CoilParams> params(coils);
    for (int64_t c = 0; c < coils; ++c) {
        double phi = 2.0 * kPi * static_cast<double>(c) / static_cast<double>(coils) +
                     uniform(rng, -0.1, 0.1);
        double radius = 0.75 * (1.0 + uniform(rng, -0.1, 0.1));
        params[c].px = 0.5 + radius * std::cos(phi);
        params[c].py = 0.5 + radius * std::sin(phi);
        params[c].width = 0.9 * (1.0 + uniform(rng, -0.1, 0.1));
        params[c].kappa = 1.2 * (1.0 + uniform(rng, -0.2, 0.2));
        params[c].beta = uniform(rng, -kPi, kPi);
        params[c].tx = -std::sin(phi);
        params[c].ty = std::cos(phi);
    }

    Tensor s({coils, H, W}, Dtype::Complex128);
    for (int64_t c = 0; c < coils; ++c) {
        const CoilParams& cp = params[c];
        for (int64_t r = 0; r < H; ++r) {
            double v = (static_cast<double>(r) + 0.5) / static_cast<double>(H);
            for (int64_t col = 0; col < W; ++col) {
                double u = (static_cast<double>(col) + 0.5) / static_cast<double>(W);
                double du = u - cp.px, dv = v - cp.py;
                double mag = std::exp(-(du * du + dv * dv) / (2.0 * cp.width * cp.width)) + 0.08;
                double phase = cp.beta + cp.kappa * (cp.tx * du + cp.ty * dv);
                s.cdata()[(c * H + r) * W + col] = std::polar(mag, phase);
            }
        }
    }
    for (int64_t i = 0; i < H * W; ++i) {
        double ss = 0.0;
        for (int64_t c = 0; c < coils; ++c) ss += std::norm(s.cdata()[c * H * W + i]);
        double inv = 1.0 / std::sqrt(ss);
        for (int64_t c = 0; c < coils; ++c) s.cdata()[c * H * W + i] *= inv;
    }
    return s;
}

kspace::MaskKind mask_kind_for(const std::string& protocol_id) {
    if (protocol_id == "cine" || protocol_id == "perfusion") return kspace::MaskKind::KtGaussian;
    if (protocol_id == "mapping") return kspace::MaskKind::Uniform;
    ensure(protocol_id == "lge", "mask_kind_for: unknown protocol " + protocol_id);
    return kspace::MaskKind::Radial;
}

uint64_t case_seed_for(const std::string& center_id, const std::string& protocol_id,
                       const std::string& patient_id, uint64_t seed) {
    return derive_seed(derive_seed(derive_seed(seed, center_id), protocol_id), patient_id);
}

Case generate_case(const CenterProfile& center, const ProtocolProfile& protocol,
                   const std::string& patient_id, double accel, kspace::MaskKind mask_kind,
                   uint64_t seed, int64_t acs_lines) {
    center.validate();
    protocol.validate();
    ensure(!patient_id.empty(), "generate_case: empty patient_id");

    const int64_t H = 64, W = 64;
    const int64_t T = protocol.frames;
    uint64_t cs = case_seed_for(center.center_id, protocol.protocol_id, patient_id, seed);

    Case out;
    out.center_id = center.center_id;
    out.protocol_id = protocol.protocol_id;
    out.patient_id = patient_id;
    {
        std::ostringstream cid;
        cid << patient_id << "-" << protocol.protocol_id << "-" << kspace::mask_kind_name(mask_kind)
            << "-x";
        if (accel == std::floor(accel))
            cid << static_cast<int64_t>(accel);
        else
            cid << accel;
        out.case_id = cid.str();
    }

    out.gt_image = phantom_image(protocol, derive_seed(cs, "anatomy"), H, W);
    out.sens = sens_maps(center.coil_count, H, W, derive_seed(cs, "sens"));
    Tensor bias = bias_field(center, cs, H, W);

    if (acs_lines == 0) {
        acs_lines = std::min<int64_t>(8, static_cast<int64_t>(static_cast<double>(W) / accel));
        acs_lines -= acs_lines % 2;
    }
    out.mask = kspace::make_mask(mask_kind, T, H, W, accel, acs_lines, derive_seed(cs, "mask"));

    Tensor biased({T, H, W}, Dtype::Complex128);
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < H * W; ++i)
            biased.cdata()[t * H * W + i] = out.gt_image.data()[t * H * W + i] * bias.data()[i];

    out.y = kspace::forward_encode(biased, out.sens, out.mask.pattern);
    if (center.noise_sigma > 0.0) {
        auto nrng = make_rng(cs, "noise");
        std::normal_distribution<double> normal(0.0, center.noise_sigma);
        for (size_t i = 0; i < out.y.store_size(); ++i) out.y.data()[i] += normal(nrng);
        out.y = kspace::apply_mask(out.y, out.mask.pattern);
    }
    return out;
}

Dataset generate_dataset(const FleetSpec& fleet, uint64_t seed) {
    ensure(!fleet.centers.empty(), "generate_dataset: no centers");
    ensure(!fleet.protocols.empty(), "generate_dataset: no protocols");
    ensure(fleet.patients_per_center >= 1, "generate_dataset: patients_per_center must be >= 1");
    {
        std::set<std::string> ids;
        for (const auto& c : fleet.centers)
            ensure(ids.insert(c.center_id).second, "generate_dataset: duplicate center id");
    }

    Dataset ds;
    ds.centers = fleet.centers;
    ds.protocols = fleet.protocols;
    for (const auto& center : fleet.centers) {
        for (int64_t p = 0; p < fleet.patients_per_center; ++p) {
            std::ostringstream pid;
            pid << center.center_id << "-P" << std::setw(3) << std::setfill('0') << p;
            for (const auto& protocol : fleet.protocols)
                ds.cases.push_back(generate_case(center, protocol, pid.str(), fleet.accel,
                                                 mask_kind_for(protocol.protocol_id), seed));
        }
    }
    return ds;
}

namespace {

void check_patients_center_scoped(const Dataset& ds) {
    std::map<std::string, std::string> owner;
    for (const auto& c : ds.cases) {
        auto [it, fresh] = owner.emplace(c.patient_id, c.center_id);
        ensure(fresh || it->second == c.center_id,
               "split: patient " + c.patient_id + " appears in multiple centers");
    }
}

} // namespace

std::pair<std::vector<size_t>, std::vector<size_t>>
split_by_center(const Dataset& ds, double target_frac) {
    std::vector<size_t> all(ds.cases.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    return split_by_center(ds, all, target_frac);
}

std::pair<std::vector<size_t>, std::vector<size_t>>
split_by_center(const Dataset& ds, const std::vector<size_t>& subset, double target_frac) {
    std::map<std::string, size_t> counts;
    for (size_t i : subset) counts[ds.cases.at(i).center_id]++;
    ensure(counts.size() >= 2, "split_by_center: need at least 2 centers");
    check_patients_center_scoped(ds);

    double total = static_cast<double>(subset.size());
    std::string best;
    double best_err = 0.0;
    for (const auto& [id, n] : counts) {
        double err = std::abs(static_cast<double>(n) / total - target_frac);
        if (best.empty() || err < best_err) {
            best = id;
            best_err = err;
        }
    }
    std::vector<size_t> rest, held;
    for (size_t i : subset) (ds.cases[i].center_id == best ? held : rest).push_back(i);
    return {rest, held};
}

std::pair<std::vector<size_t>, std::vector<size_t>>
hold_out_center(const Dataset& ds, const std::string& center_id) {
    std::vector<size_t> rest, held;
    for (size_t i = 0; i < ds.cases.size(); ++i)
        (ds.cases[i].center_id == center_id ? held : rest).push_back(i);
    ensure(!held.empty(), "hold_out_center: no cases for center " + center_id);
    return {rest, held};
}

std::vector<size_t> stratified_sample(const Dataset& ds, double frac, uint64_t seed) {
    ensure(frac > 0.0 && frac <= 1.0, "stratified_sample: frac must be in (0, 1]");
    std::map<std::string, std::vector<size_t>> strata;
    for (size_t i = 0; i < ds.cases.size(); ++i) {
        const Case& c = ds.cases[i];
        std::string key = c.center_id + "/" + vendor_name(ds.center(c.center_id).vendor_tag) +
                          "/" + c.protocol_id;
        strata[key].push_back(i);
    }
    std::vector<size_t> picked;
    for (const auto& [key, idx] : strata) {
        size_t k = std::max<size_t>(
            1, static_cast<size_t>(std::llround(frac * static_cast<double>(idx.size()))));
        k = std::min(k, idx.size());
        std::vector<size_t> pool = idx;
        auto rng = make_rng(derive_seed(seed, key), "stratified");
        std::shuffle(pool.begin(), pool.end(), rng);
        picked.insert(picked.end(), pool.begin(), pool.begin() + static_cast<int64_t>(k));
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

} // namespace hamr::synth
