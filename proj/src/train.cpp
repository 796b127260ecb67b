#include "mdseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "mdseg/error.hpp"
#include "mdseg/projection.hpp"

namespace mdseg {

void adamw_step(std::vector<std::pair<std::string, Tensor>>& params, OptimState& state,
                double lr) {
    if (lr <= 0.0) throw ValueError("adamw_step: learning rate must be > 0");
    for (auto& [name, t] : params) {
        if (!t.requires_grad() || !t.has_grad()) continue;
        for (double g : t.grad())
            if (!std::isfinite(g))
                throw ValueError("adamw_step: non-finite gradient on " + name +
                                 ", step aborted");
    }
    state.step += 1;
    const auto& c = state.cfg;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (auto& [name, t] : params) {
        if (!t.requires_grad() || !t.has_grad()) continue;
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.size() != t.size()) m.assign(t.size(), 0.0);
        if (v.size() != t.size()) v.assign(t.size(), 0.0);
        auto& p = t.data();
        const auto& g = t.grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + c.eps) + lr * c.weight_decay * p[i];
        }
    }
}

double one_cycle_lr(std::size_t step, const Schedule& sched) {
    if (sched.total_steps == 0) throw ConfigError("schedule needs total_steps > 0");
    if (!(sched.pct_start > 0.0 && sched.pct_start < 1.0))
        throw ConfigError("schedule needs 0 < pct_start < 1");
    if (sched.div_factor <= 1.0 || sched.final_div_factor <= 1.0)
        throw ConfigError("schedule divisors must be > 1");
    const double total = static_cast<double>(sched.total_steps);
    double s = static_cast<double>(std::min(step, sched.total_steps));
    const double warm = sched.pct_start * total;
    const double initial = sched.max_lr / sched.div_factor;
    const double final_lr = sched.max_lr / sched.final_div_factor;
    if (s <= warm) {
        const double frac = warm == 0.0 ? 1.0 : s / warm;
        return initial + (sched.max_lr - initial) * 0.5 * (1.0 - std::cos(std::numbers::pi * frac));
    }
    const double frac = (s - warm) / (total - warm);
    return final_lr + (sched.max_lr - final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void StageConfig::validate(const DatasetRegistry& registry) const {
    if (datasets.empty()) throw ConfigError("stage includes no datasets");
    for (const auto& name : datasets)
        if (!registry.find(name)) throw ConfigError("stage references unknown dataset " + name);
    if (!weights.empty() && weights.size() != datasets.size())
        throw ConfigError("stage weights must match the dataset list");
    if (kind == StageKind::kFinetune && datasets.size() != 1)
        throw ConfigError("finetune stage must include exactly one dataset");
    if (steps == 0 || batch == 0) throw ConfigError("stage needs steps > 0 and batch > 0");
}

bool pattern_match(const std::string& pattern, const std::string& name) {
    // '*' matches any (possibly empty) substring
    std::size_t p = 0, n = 0, star = std::string::npos, mark = 0;
    while (n < name.size()) {
        if (p < pattern.size() && (pattern[p] == name[n])) {
            ++p;
            ++n;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = n;
        } else if (star != std::string::npos) {
            p = star + 1;
            n = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

void apply_freeze(Model& model, const std::vector<std::string>& patterns) {
    auto params = model.named_parameters();
    for (const auto& pattern : patterns) {
        bool matched = false;
        for (auto& [name, t] : params) {
            if (pattern_match(pattern, name)) {
                model.set_frozen(name, true);
                matched = true;
            }
        }
        if (!matched)
            throw ConfigError("freeze pattern '" + pattern + "' matches no parameter");
    }
}

std::pair<int, std::string> pick_scan(const DatasetRegistry& registry,
                                      const std::vector<std::string>& datasets,
                                      const std::vector<double>& weights, Rng& rng) {
    if (datasets.empty()) throw ConfigError("pick_scan: empty dataset list");
    std::vector<const DatasetEntry*> entries;
    for (const auto& name : datasets) {
        const auto* e = registry.find(name);
        if (!e) throw ConfigError("pick_scan: unknown dataset " + name);
        entries.push_back(e);
    }
    if (weights.empty()) {
        // uniform over the concatenated union of training scans
        std::size_t total = 0;
        for (const auto* e : entries) total += e->train_scans.size();
        if (total == 0) throw ConfigError("pick_scan: no training scans available");
        std::size_t idx = rng.uniform_index(total);
        for (const auto* e : entries) {
            if (idx < e->train_scans.size()) return {e->dataset_id, e->train_scans[idx]};
            idx -= e->train_scans.size();
        }
        throw ValueError("pick_scan: unreachable");
    }
    if (weights.size() != datasets.size())
        throw ConfigError("pick_scan: " + std::to_string(weights.size()) + " weights for " +
                          std::to_string(datasets.size()) + " datasets");
    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw ConfigError("pick_scan: negative weight");
        wsum += w;
    }
    if (wsum <= 0.0) throw ConfigError("pick_scan: weights sum to zero");
    double u = rng.uniform() * wsum;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        u -= weights[i];
        if (u <= 0.0 || i + 1 == entries.size()) {
            if (entries[i]->train_scans.empty())
                throw ConfigError("pick_scan: dataset " + datasets[i] + " has no scans");
            return {entries[i]->dataset_id,
                    entries[i]->train_scans[rng.uniform_index(entries[i]->train_scans.size())]};
        }
    }
    throw ValueError("pick_scan: unreachable");
}

std::vector<PointScan> sample_batch(const DatasetRegistry& registry, const StageConfig& stage,
                                    const AugmentConfig& augment, Rng& rng) {
    stage.validate(registry);
    std::vector<PointScan> batch;
    batch.reserve(stage.batch);
    for (std::size_t i = 0; i < stage.batch; ++i) {
        auto [dataset_id, path] = pick_scan(registry, stage.datasets, stage.weights, rng);
        const auto& entry = registry.entry(dataset_id);
        PointScan scan = load_scan(path, label_path_for(path), entry);
        batch.push_back(augment_scan(std::move(scan), augment, rng));
    }
    return batch;
}

Metrics evaluate_model(Model& model, const DatasetRegistry& registry,
                       const std::string& dataset_name, const AugmentConfig& augment) {
    const auto* entry = registry.find(dataset_name);
    if (!entry) throw ConfigError("evaluate_model: unknown dataset " + dataset_name);
    if (entry->val_scans.empty())
        throw ConfigError("evaluate_model: dataset " + dataset_name + " has no val scans");
    ConfusionMatrix cm;
    for (const auto& path : entry->val_scans) {
        PointScan scan = load_scan(path, label_path_for(path), *entry);
        scan = eval_normalize(std::move(scan), augment);
        const Prediction pred = model.predict(scan, entry->sensor);
        accumulate(cm, scan.labels, pred.labels);
    }
    return metrics(cm);
}

namespace {

// Per-scan training loss: augment output -> projection -> extractor -> head,
// with mixup at the configured site.
Tensor scan_loss(Model& model, const PointScan& scan, const SensorSpec& spec,
                 NormMode extractor_mode, Rng& rng) {
    const RangeImage image = project(scan, spec);
    Tensor embed = model.extractor_forward(scan, image, extractor_mode);
    std::vector<double> amb =
        scan.has_ambient() ? scan.ambient : std::vector<double>(scan.size(), 0.0);
    Tensor feats = model.ambient_inject(embed, amb);

    std::vector<double> targets;
    std::vector<bool> ignore;
    one_hot_targets(scan.labels, model.config().num_classes, &targets, &ignore);

    const auto& cfg = model.config();
    Tensor logits;
    if (cfg.mixup_enabled && cfg.mixup_site == MixupSite::kHeadInput) {
        MixupResult mix = manifold_mixup(feats, targets, ignore, cfg.mixup_alpha, rng);
        targets = std::move(mix.targets);
        logits = model.head_forward(mix.features, NormMode::kTrain, scan.dataset_id);
    } else if (cfg.mixup_enabled && cfg.mixup_site == MixupSite::kAfterHidden) {
        Tensor hidden = model.head_proj(feats);
        MixupResult mix = manifold_mixup(hidden, targets, ignore, cfg.mixup_alpha, rng);
        targets = std::move(mix.targets);
        logits = model.head_block(mix.features, NormMode::kTrain, scan.dataset_id);
    } else {
        logits = model.head_forward(feats, NormMode::kTrain, scan.dataset_id);
    }
    return softmax_cross_entropy(logits, targets, ignore);
}

}  // namespace

StageResult run_stage(const StageConfig& stage, Model& model, const TrainContext& ctx) {
    const DatasetRegistry& registry = *ctx.registry;
    stage.validate(registry);
    if (!stage.freeze.empty()) apply_freeze(model, stage.freeze);
    model.set_extractor_stats_frozen(stage.freeze_extractor_stats);
    const NormMode extractor_mode =
        stage.freeze_extractor_stats ? NormMode::kEval : NormMode::kTrain;

    std::string eval_dataset = stage.eval_dataset;
    if (eval_dataset.empty()) {
        for (auto it = stage.datasets.rbegin(); it != stage.datasets.rend(); ++it)
            if (!registry.find(*it)->val_scans.empty()) {
                eval_dataset = *it;
                break;
            }
    }

    auto params = model.named_parameters();
    OptimState optim;
    optim.cfg = ctx.optim;
    Schedule sched;
    sched.max_lr = stage.max_lr;
    sched.total_steps = stage.steps;

    Rng rng(ctx.seed);
    StageResult res;
    res.best_miou = -1.0;
    std::size_t stale_evals = 0;
    bool have_checkpoint = false;

    for (std::size_t step = 0; step < stage.steps; ++step) {
        const double lr = one_cycle_lr(step, sched);
        auto batch = sample_batch(registry, stage, ctx.augment, rng);

        Tensor loss;
        for (const auto& scan : batch) {
            const SensorSpec& spec = registry.entry(scan.dataset_id).sensor;
            Tensor l = scan_loss(model, scan, spec, extractor_mode, rng);
            loss = loss.valid() ? add(loss, l) : l;
        }
        loss = scalar_mul(loss, 1.0 / static_cast<double>(batch.size()));
        const double loss_value = loss.item();

        if (!std::isfinite(loss_value)) {
            res.diverged = true;
            if (have_checkpoint) model.load_checkpoint(ctx.checkpoint_path);
            break;
        }

        for (auto& [name, t] : params) t.zero_grad();
        backward(loss);
        adamw_step(params, optim, lr);

        HistoryRow row;
        row.step = step + 1;
        row.lr = lr;
        row.train_loss = loss_value;

        const bool do_eval =
            !eval_dataset.empty() &&
            ((step + 1) % stage.eval_every == 0 || step + 1 == stage.steps);
        if (do_eval) {
            const Metrics m = evaluate_model(model, registry, eval_dataset, ctx.augment);
            row.val_miou = m.miou;
            row.val_acc = m.acc;
            if (m.miou > res.best_miou) {
                res.best_miou = m.miou;
                stale_evals = 0;
                if (!ctx.checkpoint_path.empty()) {
                    model.save_checkpoint(ctx.checkpoint_path);
                    have_checkpoint = true;
                }
            } else {
                ++stale_evals;
            }
        }
        res.history.push_back(row);
        res.steps_run = step + 1;

        if (stale_evals >= stage.patience) {
            res.early_stopped = true;
            break;
        }
    }

    // restore the best checkpoint so the returned model matches best_miou
    if (have_checkpoint && !res.diverged) model.load_checkpoint(ctx.checkpoint_path);
    if (!ctx.checkpoint_path.empty() && !have_checkpoint) {
        model.save_checkpoint(ctx.checkpoint_path);
    }
    return res;
}

std::string history_csv(const std::vector<HistoryRow>& history) {
    std::ostringstream os;
    os << "step,lr,train_loss,val_miou,val_acc\n";
    os.precision(10);
    for (const auto& r : history) {
        os << r.step << "," << r.lr << "," << r.train_loss << ",";
        if (r.val_miou) os << *r.val_miou;
        os << ",";
        if (r.val_acc) os << *r.val_acc;
        os << "\n";
    }
    return os.str();
}

}  // namespace mdseg
