#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mdseg/projection.hpp"
#include "mdseg/rng.hpp"
#include "mdseg/scan.hpp"
#include "mdseg/tensor.hpp"

namespace mdseg {

enum class MixupSite { kHeadInput, kAfterHidden };

struct ModelConfig {
    std::size_t input_dim = 5;  // x, y, z, range, intensity
    std::size_t embed_dim = 64;
    std::size_t expansion = 4;
    std::size_t ambient_dim = 8;
    std::size_t ctx_dim = 64;
    std::size_t num_classes = kNumClasses;
    std::size_t window = 3;
    bool ppt_enabled = true;
    bool mixup_enabled = false;
    double mixup_alpha = 2.0;
    MixupSite mixup_site = MixupSite::kHeadInput;

    void validate() const;
};

struct Linear {
    Tensor w;  // {in, out}
    Tensor b;  // {1, out}

    static Linear create(std::size_t in, std::size_t out, Rng& rng);
    static Linear zeros(std::size_t in, std::size_t out);
    Tensor forward(const Tensor& x) const;
};

// Normalization layer extended with dataset-conditioned scale and shift.
// Generators are zero-initialized so a fresh layer is exactly the base norm.
struct PromptNorm {
    NormState base;
    Linear scale_gen;  // ctx_dim -> feat_dim
    Linear shift_gen;
    bool enabled = true;

    static PromptNorm create(std::size_t feat_dim, std::size_t ctx_dim, bool enabled);
};

// y = base_norm(x); s = 1 + scale_gen(ctx[dataset_id]); t = shift_gen(...);
// returns y * s + t broadcast over rows. Disabled layers are the base norm.
Tensor prompt_norm_forward(const Tensor& x, int dataset_id, PromptNorm& layer,
                           const Tensor& ctx_table, NormMode mode);

struct MixupResult {
    Tensor features;
    std::vector<double> targets;  // N x num_classes, row-major
    double lambda = 1.0;
    bool applied = false;
};

// One Beta(alpha, alpha) lambda per batch; partners drawn by permuting the
// non-ignored rows among themselves, ignored rows pass through unmixed.
// Fewer than two mixable rows skips mixing (identity).
MixupResult manifold_mixup(const Tensor& features, const std::vector<double>& targets,
                           const std::vector<bool>& ignore_mask, double alpha, Rng& rng);

struct Prediction {
    std::vector<std::uint8_t> labels;  // argmax per point
    std::vector<double> probs;         // N x num_classes
};

class Model {
public:
    Model(const ModelConfig& cfg, std::size_t num_datasets, Rng& rng);

    const ModelConfig& config() const { return cfg_; }
    std::size_t num_datasets() const { return ctx_table_.dim(0); }

    // Per-point embeddings, N x embed_dim. Expects intensity already
    // normalized; geometry comes straight from the scan.
    Tensor extractor_forward(const PointScan& scan, const RangeImage& image, NormMode mode);

    // Appends a learned lift of the (normalized) ambient channel. Zero-length
    // ambient_dim is the identity.
    Tensor ambient_inject(const Tensor& embed, const std::vector<double>& ambient);

    Tensor head_proj(const Tensor& feat);
    Tensor head_block(const Tensor& hidden, NormMode mode, int dataset_id);
    Tensor head_forward(const Tensor& feat, NormMode mode, int dataset_id);

    Prediction predict(const PointScan& scan, const SensorSpec& spec);

    // Flat parameter registry. Iteration order is fixed by name.
    std::vector<std::pair<std::string, Tensor>> named_parameters();
    std::vector<std::pair<std::string, std::vector<double>*>> named_buffers();

    void set_frozen(const std::string& name, bool frozen);
    bool is_frozen(const std::string& name) const;
    std::vector<std::string> frozen_names() const;

    // Freezes/unfreezes batch statistics updates on extractor norm layers.
    void set_extractor_stats_frozen(bool frozen);

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);

    Tensor& ctx_table() { return ctx_table_; }

private:
    struct PnRef {
        std::string name;
        PromptNorm* layer;
    };
    std::vector<PnRef> prompt_norms();
    std::vector<std::pair<std::string, Linear*>> linears();

    ModelConfig cfg_;
    Tensor ctx_table_;  // {num_datasets, ctx_dim}

    Linear point1_, point2_;
    PromptNorm pn_point1_, pn_point2_;
    Linear cell1_, cell2_;
    PromptNorm pn_cell1_, pn_cell2_;
    Linear fuse_;
    PromptNorm pn_fuse_;

    Linear ambient_lift_;  // 1 -> ambient_dim
    Linear head_in_;       // embed+ambient -> embed
    Linear head_expand_;   // embed -> expansion*embed
    PromptNorm pn_head_;
    Linear head_contract_;  // expansion*embed -> embed
    Linear head_out_;       // embed -> num_classes

    std::map<std::string, bool> frozen_;
};

void one_hot_targets(const std::vector<std::uint8_t>& labels, std::size_t num_classes,
                     std::vector<double>* targets, std::vector<bool>* ignore_mask);

}  // namespace mdseg
