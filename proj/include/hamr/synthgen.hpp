#pragma once

#include "hamr/kspace.hpp"
#include "hamr/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace hamr::synth {

enum class Vendor { A, B, C, D };

Vendor vendor_from_string(const std::string& s);
std::string vendor_name(Vendor v);

struct CenterProfile {
    std::string center_id;
    Vendor vendor_tag = Vendor::A;
    double field_strength = 3.0;      // tesla, one of {1.5, 3.0, 5.0}
    double noise_sigma = 0.0;         // k-space complex Gaussian std, per component
    double bias_field_strength = 0.0; // in [0, 0.5]
    int64_t coil_count = 4;           // one of {1, 4, 8}

    void validate() const;
};

// SNR rule used by the default fleet: sigma falls with field strength.
double sigma_for_field(double sigma0, double field_strength);

struct ProtocolProfile {
    std::string protocol_id; // cine | lge | mapping | perfusion
    int64_t frames = 1;
    double wall_motion_amp = 0.0; // cine
    double enhance_rate = 0.0;    // lge / perfusion
    double decay_t1 = 0.0;        // mapping (myocardium)
    double decay_t2 = 0.0;        // mapping (blood)

    void validate() const;
};

struct Case {
    std::string case_id;
    std::string center_id;
    std::string protocol_id;
    std::string patient_id;
    Tensor gt_image; // real [T,H,W], phantom without the bias field
    Tensor sens;     // complex [C,H,W], unit RSS
    Tensor y;        // complex [T,C,H,W], unsampled entries exactly 0
    kspace::SamplingMask mask;
};

struct Dataset {
    std::vector<CenterProfile> centers;
    std::vector<ProtocolProfile> protocols;
    std::vector<Case> cases;

    const CenterProfile& center(const std::string& id) const;      // hard error if unknown
    const ProtocolProfile& protocol(const std::string& id) const;  // hard error if unknown
};

std::vector<CenterProfile> default_centers();
std::vector<ProtocolProfile> default_protocols();

// Generator building blocks, each deterministic in its seed.
Tensor phantom_image(const ProtocolProfile& protocol, uint64_t seed, int64_t H = 64, int64_t W = 64);
Tensor bias_field(const CenterProfile& center, uint64_t case_seed, int64_t H = 64, int64_t W = 64);
Tensor sens_maps(int64_t coils, int64_t H, int64_t W, uint64_t seed);

// The per-case seed generate_case derives from its arguments; exposed so the
// generator internals (bias field, sens maps) can be reproduced externally.
uint64_t case_seed_for(const std::string& center_id, const std::string& protocol_id,
                       const std::string& patient_id, uint64_t seed);

// acs_lines = 0 picks the widest even ACS block that fits the budget (cap 8).
Case generate_case(const CenterProfile& center, const ProtocolProfile& protocol,
                   const std::string& patient_id, double accel, kspace::MaskKind mask_kind,
                   uint64_t seed, int64_t acs_lines = 0);

// Protocol-matched sampling: temporal protocols get kt-Gaussian masks, lge
// radial, mapping uniform.
kspace::MaskKind mask_kind_for(const std::string& protocol_id);

struct FleetSpec {
    std::vector<CenterProfile> centers = default_centers();
    std::vector<ProtocolProfile> protocols = default_protocols();
    int64_t patients_per_center = 2;
    double accel = 8.0;
};

Dataset generate_dataset(const FleetSpec& fleet, uint64_t seed);

// Index-based splits into Dataset::cases (cases are large; nothing is copied).
// Validation = all cases of the single center whose case fraction is closest
// to target_frac.
std::pair<std::vector<size_t>, std::vector<size_t>>
split_by_center(const Dataset& ds, double target_frac);

// Same pick restricted to an index subset (e.g. what remains after holding a
// center out); both halves are drawn from `subset` in its order.
std::pair<std::vector<size_t>, std::vector<size_t>>
split_by_center(const Dataset& ds, const std::vector<size_t>& subset, double target_frac);

// (rest, held-out) for an explicit center id.
std::pair<std::vector<size_t>, std::vector<size_t>>
hold_out_center(const Dataset& ds, const std::string& center_id);

// Per (center, vendor, protocol) stratum keeps max(1, round(frac * size))
// cases; never empties a nonempty stratum.
std::vector<size_t> stratified_sample(const Dataset& ds, double frac, uint64_t seed);

// On-disk container: manifest.json plus one "HAMR" binary file per tensor.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);

// Exposed for container tests.
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path, const std::vector<int64_t>& expect_shape,
                        Dtype expect_dtype);
std::string sha256_hex_file(const std::string& path);

} // namespace hamr::synth
