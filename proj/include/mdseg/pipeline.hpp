#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdseg/augment.hpp"
#include "mdseg/model.hpp"
#include "mdseg/scan.hpp"
#include "mdseg/train.hpp"

namespace mdseg {

// Everything one run needs, read from a JSON config file. Dotted-key
// overrides ("pretrain.steps=500") are applied to the raw document before
// parsing so ablation grids can toggle anything programmatically.
struct RunConfig {
    std::string registry_path;
    std::string out_dir = "runs";
    std::uint64_t seed = 1;

    bool ppt = true;
    bool mixup = false;
    bool ambient = true;

    ModelConfig model;
    AugmentConfig augment;
    AdamWConfig optim;
    StageConfig pretrain;
    StageConfig finetune;

    static RunConfig load(const std::string& path, const std::vector<std::string>& overrides);

    // Model config with the ablation toggles folded in.
    ModelConfig effective_model() const;
};

Model build_model(const RunConfig& cfg, const DatasetRegistry& registry);

struct StageOutcome {
    StageResult result;
    Metrics metrics;  // on the stage's eval dataset, best checkpoint
    std::string checkpoint_path;
};

StageOutcome run_pretrain(const RunConfig& cfg, const DatasetRegistry& registry, Model& model,
                          const std::string& tag = "pretrain");
StageOutcome run_finetune(const RunConfig& cfg, const DatasetRegistry& registry, Model& model,
                          const std::string& tag = "finetune");

// Runs the dataset grid (7 rows) and the three toggle grids, writing
// dataset_grid.csv / ppt_grid.csv / mixup_grid.csv / ambient_grid.csv and
// ablate_summary.txt under cfg.out_dir. Returns the summary text.
std::string run_ablation(const RunConfig& cfg);

}  // namespace mdseg
