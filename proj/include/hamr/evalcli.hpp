#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hamr/trainer.hpp"

// Cross-center evaluation: per-case SSIM/PSNR averaged over frames, grouped
// into per-(center, vendor, field) rows, plus baseline-vs-adapted comparison
// tables, a parameter-efficiency report, and the command-line front end.
namespace hamr::evalcli {

enum class EvalMode { ZeroFilled, Baseline, Adapted };

EvalMode mode_from_string(const std::string& s);  // zero_filled | baseline | adapted
std::string mode_name(EvalMode m);

struct CaseScore {
    std::string case_id;
    std::string center_id;
    std::string protocol_id;
    std::string vendor;
    double field_strength = 0.0;
    int64_t frames = 0;
    double ssim = 0.0;  // mean over frames
    double psnr = 0.0;
    // registry routing used for this case; "-" outside adapted mode
    std::string protocol_key = "-";
    std::string center_key = "-";
};

struct GroupRow {
    std::string center_id;
    std::string vendor;
    double field_strength = 0.0;
    int64_t n_cases = 0;
    double ssim = 0.0;  // plain means over the group's cases
    double psnr = 0.0;
};

struct ModeReport {
    EvalMode mode = EvalMode::ZeroFilled;
    std::vector<CaseScore> cases;  // case-id order
    std::vector<GroupRow> rows;    // ordered by (center, vendor, field)
    int64_t total_cases = 0;
    double overall_ssim = 0.0;  // case-count-weighted mean of rows
    double overall_psnr = 0.0;
};

// Per case: zero_filled skips the network, baseline runs it without
// adapters, adapted routes adapters deterministically (unknown centers fall
// back to the universal adapter; an unknown protocol is a hard error).
// Cases are scored per frame against gt and reduced in case-id order.
ModeReport evaluate(const train::Checkpoint& ck, const synth::Dataset& ds, EvalMode mode);

// Subset variant; `idx` indexes ds.cases.
ModeReport evaluate(const train::Checkpoint& ck, const synth::Dataset& ds,
                    const std::vector<size_t>& idx, EvalMode mode);

// Mean case SSIM per center over a subset, adapted routing optional; feeds
// progressive fine-tuning's center weights.
std::map<std::string, double> per_center_ssim(const train::Checkpoint& ck,
                                              const synth::Dataset& ds,
                                              const std::vector<size_t>& idx, bool adapted);

struct CenterReportRow {
    std::string center_id;
    std::string vendor;
    double field_strength = 0.0;
    int64_t n_cases = 0;
    double ssim_baseline = 0.0, psnr_baseline = 0.0;
    double ssim_adapted = 0.0, psnr_adapted = 0.0;
    double delta_pct_ssim = 0.0, delta_pct_psnr = 0.0;  // 100*(adapted-baseline)/baseline
};

struct CenterReport {
    std::vector<CenterReportRow> rows;
    int64_t total_cases = 0;
    double overall_ssim_baseline = 0.0, overall_psnr_baseline = 0.0;
    double overall_ssim_adapted = 0.0, overall_psnr_adapted = 0.0;
    double overall_delta_pct_ssim = 0.0, overall_delta_pct_psnr = 0.0;
};

// Join two mode reports over identical case sets (mismatch is a hard error).
CenterReport compare(const ModeReport& baseline, const ModeReport& adapted);

// center,vendor,field_T,n_cases,ssim,psnr,mode -- one line per group row,
// %.17g numbers, so identical runs give identical bytes.
std::string mode_csv(const ModeReport& r);

// case_id,protocol_key,center_key -- one line per case, case-id order.
std::string routing_audit_csv(const ModeReport& r);

std::string center_report_csv(const CenterReport& r);
std::string center_report_text(const CenterReport& r);  // aligned table + overall line

struct EfficiencyReport {
    backbone::ParamCounts counts;
    double ceiling = 0.05;
    bool ok = true;  // adapter_fraction <= ceiling
    std::string text;
    std::string csv;  // component,params rows plus the fraction
};

EfficiencyReport report_param_efficiency(const train::Checkpoint& ck, double ceiling = 0.05);

// Whole-run configuration file. Every key has a default; unknown keys are
// rejected at every level.
struct RunConfig {
    int64_t schema_version = 1;
    uint64_t seed = 0;
    synth::FleetSpec fleet;
    train::TrainConfig train;
    std::string holdout_center;  // empty: no held-out center
    double val_frac = 0.2;

    static RunConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
    void validate() const;
};

// (train, val) indices: drop the held-out center if one is configured, then
// peel the validation center off the remainder.
std::pair<std::vector<size_t>, std::vector<size_t>>
plan_split(const RunConfig& cfg, const synth::Dataset& ds);

// gen-data | train | finetune | eval | recon | grad-check | report.
// Returns 0 on success, 1 when work ran but failed validation, 2 on usage
// errors.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

}  // namespace hamr::evalcli
