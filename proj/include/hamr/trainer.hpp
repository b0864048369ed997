#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hamr/adapters.hpp"
#include "hamr/backbone.hpp"
#include "hamr/losses.hpp"
#include "hamr/synthgen.hpp"

// Training loop: AdamW with cosine decay, gradient accumulation over
// single-case micro-batches, early stopping on validation SSIM, and a
// progressive fine-tuning phase that reweights centers by how far they lag
// the fleet mean.
namespace hamr::train {

using diff::Tape;
using diff::Var;

struct FinetuneConfig {
    double wc_min = 0.3;  // clamp range for the per-center weight
    double wc_max = 5.0;
    int64_t warm_restart_epochs = 5;  // first cosine cycle length (doubles per cycle)
    double eta_min = 1e-7;
    double adapter_mult_min = 0.02;  // center-adapter lr = mult(w_c) * backbone lr
    double adapter_mult_max = 0.3;
};

struct TrainConfig {
    backbone::BackboneConfig model;
    adapters::AdapterConfig adapter;
    bool use_adapters = true;  // false trains the plain unrolled backbone
    losses::LossWeights weights = losses::LossWeights::defaults();

    double lr_backbone = 2e-4;
    double lr_adapter = 4e-4;
    double weight_decay = 1e-4;
    double eta_min = 1e-6;
    int64_t accumulation_steps = 8;
    int64_t patience = 2;
    double prob_universal = 0.15;
    int64_t epochs = 1;
    uint64_t seed = 0;
    double clip_max_norm = 1.0;  // used by the fine-tune phase
    FinetuneConfig finetune;

    void validate() const;  // hard error on nonsensical values
};

// Cosine decay from base_lr to eta_min over total_steps. With
// warm_restart_T0 > 0 the horizon is ignored and the schedule restarts from
// base_lr with cycle lengths T0, 2*T0, 4*T0, ... total_steps == 0 is a hard
// error.
double lr_schedule(int64_t step, int64_t total_steps, double base_lr, double eta_min,
                   int64_t warm_restart_T0 = 0);

struct AdamState {
    Tensor m, v;
    int64_t step = 0;
};

struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::map<std::string, AdamState> state;  // lazily created per parameter
};

using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;
using GradMap = std::map<std::string, Tensor>;

// Global L2 clip across every entry; returns the pre-clip norm.
double clip_gradients(GradMap& grads, double max_norm);

// One decoupled-weight-decay Adam step for every parameter that has a
// gradient entry; parameters without one are left untouched (frozen). A
// non-finite gradient is a hard error naming the parameter.
void adamw_step(AdamW& opt, const ParamRefs& params, const GradMap& grads,
                const std::map<std::string, double>& lr, double weight_decay);

// Raw sum into `into` (created on first use); scaling by 1/k happens once at
// step time so accumulated micro-batches match a summed batch bit for bit.
void accumulate_grads(GradMap& into, const std::vector<std::string>& names,
                      const std::vector<Var>& vars, Tape& tape);

struct EarlyStop {
    int64_t patience = 2;
    double best = -std::numeric_limits<double>::infinity();
    int64_t since_best = 0;

    bool update(double val);  // true when val strictly improves best
    bool should_stop() const { return since_best >= patience; }
};

struct TrainState {
    int64_t epoch = 0;  // completed epochs
    int64_t step = 0;   // optimizer steps taken
    double best_val_ssim = -std::numeric_limits<double>::infinity();
    int64_t best_epoch = 0;
    int64_t epochs_since_best = 0;
    std::string rng_state;  // serialized mt19937_64, text
    std::vector<double> loss_history;  // mean micro-batch loss per optimizer step
};

struct Checkpoint {
    backbone::Model model;
    bool has_adapters = false;
    adapters::AdapterRegistry registry;  // meaningful only when has_adapters
    AdamW opt;
    TrainState state;
};

// Canonical name -> tensor view over model (+ registry when present);
// matches the bound-var traversal order used during training.
ParamRefs checkpoint_params(Checkpoint& ck);

// Directory with model.json (architecture, optimizer counters, RNG state,
// tensor manifest with sha256) plus one binary file per tensor. Round trips
// bit exactly.
void save_checkpoint(const Checkpoint& ck, const std::string& dir);
Checkpoint load_checkpoint(const std::string& dir);

struct MetricsRow {
    int64_t epoch = 0;
    int64_t step = 0;
    double train_loss = 0.0;
    double val_ssim = 0.0;
    double val_psnr = 0.0;
    double lr_backbone = 0.0;
    double lr_adapter = 0.0;
};

// Header + one line per row, %.17g doubles so reruns are byte-stable.
std::string metrics_csv(const std::vector<MetricsRow>& rows);

struct TrainResult {
    Checkpoint checkpoint;  // best-validation state
    std::vector<MetricsRow> log;
    bool aborted_nan = false;
};

// Eval-mode reconstruction of one case from a checkpoint (deterministic
// adapter routing); adapted == false skips adapters even when present.
Tensor reconstruct_case(const Checkpoint& ck, const synth::Case& cs, bool adapted);

// Mean eval-mode SSIM/PSNR over a case subset.
std::pair<double, double> validate(const Checkpoint& ck, const synth::Dataset& ds,
                                   const std::vector<size_t>& idx, bool adapted);

// Full training run. Fresh model/registry from cfg unless `resume` is given,
// in which case optimizer moments, RNG stream, and counters continue exactly
// where they stopped. stop_at_epoch < cfg.epochs pauses a run mid-horizon
// (the lr schedule always spans cfg.epochs). Empty splits are hard errors; a
// non-finite loss aborts and returns the last good checkpoint.
TrainResult train(const TrainConfig& cfg, const synth::Dataset& ds,
                  const std::vector<size_t>& train_idx, const std::vector<size_t>& val_idx,
                  const Checkpoint* resume = nullptr, int64_t stop_at_epoch = -1);

// w_c = clamp(mean_ssim / center_ssim, wc_min, wc_max).
double center_weight(double mean_ssim, double center_ssim, double wc_min, double wc_max);

// Linear map of w_c from [wc_min, wc_max] to [mult_min, mult_max].
double adapter_lr_mult(double w_c, const FinetuneConfig& fc);

// Progressive fine-tune from a trained checkpoint: only the final cascade,
// every regularizer head, the step sizes, and all adapters stay trainable;
// cases are sampled proportionally to their center weight; warm-restart
// cosine schedule with gradient clipping. baseline_ssim must cover every
// training-split center (unknown center -> hard error).
TrainResult progressive_finetune(const TrainConfig& cfg, const Checkpoint& start,
                                 const synth::Dataset& ds,
                                 const std::vector<size_t>& train_idx,
                                 const std::vector<size_t>& val_idx,
                                 const std::map<std::string, double>& baseline_ssim);

}  // namespace hamr::train
