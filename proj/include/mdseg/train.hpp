#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mdseg/augment.hpp"
#include "mdseg/eval.hpp"
#include "mdseg/model.hpp"
#include "mdseg/rng.hpp"
#include "mdseg/scan.hpp"

namespace mdseg {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct OptimState {
    AdamWConfig cfg;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    std::size_t step = 0;
};

// Decoupled-decay Adam update on every unfrozen parameter with a gradient.
// A non-finite gradient aborts the step (ValueError naming the parameter).
void adamw_step(std::vector<std::pair<std::string, Tensor>>& params, OptimState& state,
                double lr);

struct Schedule {
    double max_lr = 0.002;
    std::size_t total_steps = 100000;
    double pct_start = 0.3;
    double div_factor = 25.0;
    double final_div_factor = 1e4;
};

// Cosine warmup from max_lr/div_factor to max_lr over pct_start*total, then
// cosine anneal to max_lr/final_div_factor. Out-of-range steps clamp.
double one_cycle_lr(std::size_t step, const Schedule& sched);

enum class StageKind { kPretrain, kFinetune };

struct StageConfig {
    StageKind kind = StageKind::kPretrain;
    std::size_t steps = 100000;
    double max_lr = 0.002;
    std::size_t batch = 2;
    std::vector<std::string> datasets;      // registry names included
    std::vector<double> weights;            // optional per-dataset sampling weights
    std::vector<std::string> freeze;        // name patterns, '*' wildcard
    std::string eval_dataset;               // val split used for early stopping
    std::size_t eval_every = 200;
    std::size_t patience = 10;
    bool freeze_extractor_stats = false;    // eval-mode extractor norms

    void validate(const DatasetRegistry& registry) const;
};

inline const std::vector<std::string> kDefaultFinetuneFreeze = {"extractor.*", "*.scale_gen.*",
                                                                "*.shift_gen.*"};

bool pattern_match(const std::string& pattern, const std::string& name);

// Sets freeze flags; every pattern must match at least one parameter.
void apply_freeze(Model& model, const std::vector<std::string>& patterns);

// Uniform draw over the concatenated union of the included datasets'
// training scans (or weighted per dataset when weights are given).
std::pair<int, std::string> pick_scan(const DatasetRegistry& registry,
                                      const std::vector<std::string>& datasets,
                                      const std::vector<double>& weights, Rng& rng);

std::vector<PointScan> sample_batch(const DatasetRegistry& registry, const StageConfig& stage,
                                    const AugmentConfig& augment, Rng& rng);

Metrics evaluate_model(Model& model, const DatasetRegistry& registry,
                       const std::string& dataset_name, const AugmentConfig& augment);

struct HistoryRow {
    std::size_t step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    std::optional<double> val_miou;
    std::optional<double> val_acc;
};

struct StageResult {
    std::vector<HistoryRow> history;
    double best_miou = 0.0;
    std::size_t steps_run = 0;
    bool early_stopped = false;
    bool diverged = false;
};

struct TrainContext {
    const DatasetRegistry* registry = nullptr;
    AugmentConfig augment;
    AdamWConfig optim;
    std::uint64_t seed = 0;
    std::string checkpoint_path;  // best checkpoint written here; empty skips saving
};

// The stage loop: sample -> forward (mixup in training mode only) ->
// soft-label cross-entropy over non-IGNORE points -> backward -> AdamW with
// the one-cycle rate. Keeps the best-mIoU checkpoint and stops early after
// `patience` evaluations without improvement. On divergence the last good
// checkpoint is restored.
StageResult run_stage(const StageConfig& stage, Model& model, const TrainContext& ctx);

std::string history_csv(const std::vector<HistoryRow>& history);

}  // namespace mdseg
