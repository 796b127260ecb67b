#include "mdseg/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "mdseg/error.hpp"

namespace mdseg {

namespace {

using nlohmann::json;

void apply_override(json& doc, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + kv + "' is not KEY=VALUE");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;  // bare strings need no quoting
    }
    json* cur = &doc;
    std::size_t pos = 0;
    while (true) {
        const auto dot = key.find('.', pos);
        const std::string part = key.substr(pos, dot - pos);
        if (part.empty()) throw ConfigError("bad override key '" + key + "'");
        if (dot == std::string::npos) {
            (*cur)[part] = value;
            return;
        }
        cur = &(*cur)[part];
        pos = dot + 1;
    }
}

void parse_stage(const json& j, StageConfig& s) {
    s.steps = j.value("steps", s.steps);
    s.max_lr = j.value("max_lr", s.max_lr);
    s.batch = j.value("batch", s.batch);
    if (j.contains("datasets")) s.datasets = j["datasets"].get<std::vector<std::string>>();
    if (j.contains("weights")) s.weights = j["weights"].get<std::vector<double>>();
    if (j.contains("freeze")) s.freeze = j["freeze"].get<std::vector<std::string>>();
    s.eval_dataset = j.value("eval_dataset", s.eval_dataset);
    s.eval_every = j.value("eval_every", s.eval_every);
    s.patience = j.value("patience", s.patience);
    s.freeze_extractor_stats = j.value("freeze_extractor_stats", s.freeze_extractor_stats);
}

void parse_augment(const json& j, AugmentConfig& a) {
    a.dropout_prob = j.value("dropout_prob", a.dropout_prob);
    if (j.contains("eq_low_range")) {
        a.eq_low_min = j["eq_low_range"][0].get<double>();
        a.eq_low_max = j["eq_low_range"][1].get<double>();
    }
    if (j.contains("eq_high_range")) {
        a.eq_high_min = j["eq_high_range"][0].get<double>();
        a.eq_high_max = j["eq_high_range"][1].get<double>();
    }
    a.eval_low = j.value("eval_low", a.eval_low);
    a.eval_high = j.value("eval_high", a.eval_high);
    a.yaw_limit_deg = j.value("yaw_limit_deg", a.yaw_limit_deg);
    a.rotation = j.value("rotation", a.rotation);
    a.flip = j.value("flip", a.flip);
    a.scale = j.value("scale", a.scale);
    a.jitter = j.value("jitter", a.jitter);
}

}  // namespace

RunConfig RunConfig::load(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    for (const auto& kv : overrides) apply_override(j, kv);

    RunConfig cfg;
    // finetune stage defaults differ from pretrain
    cfg.finetune.kind = StageKind::kFinetune;
    cfg.finetune.steps = 7600;
    cfg.finetune.max_lr = 0.001;
    cfg.finetune.freeze = kDefaultFinetuneFreeze;
    cfg.finetune.freeze_extractor_stats = true;

    if (!j.contains("registry")) throw ConfigError("config is missing 'registry'");
    cfg.registry_path = j["registry"].get<std::string>();
    {
        // relative to the config file
        std::filesystem::path rp(cfg.registry_path);
        if (rp.is_relative())
            cfg.registry_path = (std::filesystem::path(path).parent_path() / rp).string();
    }
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("toggles")) {
        const auto& t = j["toggles"];
        cfg.ppt = t.value("ppt", cfg.ppt);
        cfg.mixup = t.value("mixup", cfg.mixup);
        cfg.ambient = t.value("ambient", cfg.ambient);
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        cfg.model.embed_dim = m.value("embed_dim", cfg.model.embed_dim);
        cfg.model.expansion = m.value("expansion", cfg.model.expansion);
        cfg.model.ambient_dim = m.value("ambient_dim", cfg.model.ambient_dim);
        cfg.model.ctx_dim = m.value("ctx_dim", cfg.model.ctx_dim);
        cfg.model.window = m.value("window", cfg.model.window);
        cfg.model.mixup_alpha = m.value("mixup_alpha", cfg.model.mixup_alpha);
        if (m.contains("mixup_site")) {
            const std::string site = m["mixup_site"].get<std::string>();
            if (site == "head_input")
                cfg.model.mixup_site = MixupSite::kHeadInput;
            else if (site == "after_hidden")
                cfg.model.mixup_site = MixupSite::kAfterHidden;
            else
                throw ConfigError("unknown mixup_site '" + site + "'");
        }
    }
    if (j.contains("augment")) parse_augment(j["augment"], cfg.augment);
    if (j.contains("optim")) {
        const auto& o = j["optim"];
        cfg.optim.beta1 = o.value("beta1", cfg.optim.beta1);
        cfg.optim.beta2 = o.value("beta2", cfg.optim.beta2);
        cfg.optim.eps = o.value("eps", cfg.optim.eps);
        cfg.optim.weight_decay = o.value("weight_decay", cfg.optim.weight_decay);
    }
    if (j.contains("pretrain")) parse_stage(j["pretrain"], cfg.pretrain);
    if (j.contains("finetune")) parse_stage(j["finetune"], cfg.finetune);
    cfg.pretrain.kind = StageKind::kPretrain;
    cfg.finetune.kind = StageKind::kFinetune;
    cfg.augment.validate();
    return cfg;
}

ModelConfig RunConfig::effective_model() const {
    ModelConfig m = model;
    m.ppt_enabled = ppt;
    m.mixup_enabled = mixup;
    if (!ambient) m.ambient_dim = 0;
    m.validate();
    return m;
}

Model build_model(const RunConfig& cfg, const DatasetRegistry& registry) {
    Rng rng(cfg.seed ^ 0x5EEDULL);
    return Model(cfg.effective_model(), registry.entries.size(), rng);
}

namespace {

StageOutcome run_stage_outcome(const RunConfig& cfg, const StageConfig& stage,
                               const DatasetRegistry& registry, Model& model,
                               const std::string& tag) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    TrainContext ctx;
    ctx.registry = &registry;
    ctx.augment = cfg.augment;
    ctx.optim = cfg.optim;
    ctx.seed = cfg.seed ^ (tag == "finetune" ? 0xF17EULL : 0x9127ULL);
    ctx.checkpoint_path = (fs::path(cfg.out_dir) / (tag + ".ckpt")).string();

    StageOutcome out;
    out.result = run_stage(stage, model, ctx);
    out.checkpoint_path = ctx.checkpoint_path;

    std::ofstream hist(fs::path(cfg.out_dir) / (tag + "_history.csv"));
    hist << history_csv(out.result.history);

    std::string eval_dataset = stage.eval_dataset;
    if (eval_dataset.empty()) eval_dataset = stage.datasets.back();
    out.metrics = evaluate_model(model, registry, eval_dataset, cfg.augment);
    return out;
}

}  // namespace

StageOutcome run_pretrain(const RunConfig& cfg, const DatasetRegistry& registry, Model& model,
                          const std::string& tag) {
    return run_stage_outcome(cfg, cfg.pretrain, registry, model, tag);
}

StageOutcome run_finetune(const RunConfig& cfg, const DatasetRegistry& registry, Model& model,
                          const std::string& tag) {
    return run_stage_outcome(cfg, cfg.finetune, registry, model, tag);
}

// --- ablation grids ---

namespace {

struct GridRow {
    std::string label;
    bool finetuned = false;
    Metrics metrics;
};

std::string format_grid(const std::string& title, const std::vector<GridRow>& rows) {
    // relative changes from the first row, in the tables' parenthesized style
    std::ostringstream os;
    os << title << "\n";
    const double base_miou = 100.0 * rows.front().metrics.miou;
    const double base_acc = 100.0 * rows.front().metrics.acc;
    char buf[160];
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double miou = 100.0 * rows[i].metrics.miou;
        const double acc = 100.0 * rows[i].metrics.acc;
        if (i == 0) {
            std::snprintf(buf, sizeof(buf), "  %-14s %s  mIoU %6.2f          Acc %6.2f\n",
                          rows[i].label.c_str(), rows[i].finetuned ? "ft" : "--", miou, acc);
        } else {
            std::snprintf(buf, sizeof(buf),
                          "  %-14s %s  mIoU %6.2f (%+.2f)  Acc %6.2f (%+.2f)\n",
                          rows[i].label.c_str(), rows[i].finetuned ? "ft" : "--", miou, acc,
                          miou - base_miou, acc - base_acc);
        }
        os << buf;
    }
    return os.str();
}

void write_grid_csv(const std::string& path, const std::vector<GridRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "row,finetuned,miou,miou_delta,acc,acc_delta," << metrics_csv_header() << "\n";
    const double base_miou = 100.0 * rows.front().metrics.miou;
    const double base_acc = 100.0 * rows.front().metrics.acc;
    char buf[96];
    for (const auto& r : rows) {
        const double miou = 100.0 * r.metrics.miou;
        const double acc = 100.0 * r.metrics.acc;
        std::snprintf(buf, sizeof(buf), "%.4f,%+.4f,%.4f,%+.4f", miou, miou - base_miou, acc,
                      acc - base_acc);
        out << r.label << "," << (r.finetuned ? 1 : 0) << "," << buf << ","
            << metrics_csv_row(r.metrics) << "\n";
    }
}

// Pretrained models cached per toggle triple and dataset list.
struct AblationRunner {
    const RunConfig& base;
    DatasetRegistry registry;
    std::map<std::string, std::string> pretrained;  // cache key -> checkpoint path
    int run_counter = 0;

    explicit AblationRunner(const RunConfig& cfg)
        : base(cfg), registry(DatasetRegistry::load(cfg.registry_path)) {}

    RunConfig variant(bool ppt, bool mixup, bool ambient,
                      const std::vector<std::string>& datasets, const std::string& tag) {
        RunConfig cfg = base;
        cfg.ppt = ppt;
        cfg.mixup = mixup;
        cfg.ambient = ambient;
        cfg.pretrain.datasets = datasets;
        // keep the configured weight for each dataset that survives the subset
        cfg.pretrain.weights.clear();
        for (const auto& d : datasets) {
            double w = 1.0;
            for (std::size_t i = 0; i < base.pretrain.datasets.size(); ++i)
                if (base.pretrain.datasets[i] == d && i < base.pretrain.weights.size())
                    w = base.pretrain.weights[i];
            cfg.pretrain.weights.push_back(w);
        }
        cfg.out_dir = (std::filesystem::path(base.out_dir) / tag).string();
        return cfg;
    }

    static std::string cache_key(bool ppt, bool mixup, bool ambient,
                                 const std::vector<std::string>& datasets) {
        std::string key;
        key += ppt ? "P" : "p";
        key += mixup ? "M" : "m";
        key += ambient ? "A" : "a";
        for (const auto& d : datasets) key += ":" + d;
        return key;
    }

    // Pretrains (cached) and returns validation metrics plus checkpoint path.
    std::pair<Metrics, std::string> pretrain(bool ppt, bool mixup, bool ambient,
                                             const std::vector<std::string>& datasets) {
        const std::string key = cache_key(ppt, mixup, ambient, datasets);
        const std::string tag = "run" + std::to_string(run_counter++);
        RunConfig cfg = variant(ppt, mixup, ambient, datasets, tag);
        if (auto it = pretrained.find(key); it != pretrained.end()) {
            Model model = build_model(cfg, registry);
            model.load_checkpoint(it->second);
            --run_counter;  // tag unused
            return {evaluate_model(model, registry, cfg.pretrain.eval_dataset.empty()
                                                        ? cfg.pretrain.datasets.back()
                                                        : cfg.pretrain.eval_dataset,
                                   cfg.augment),
                    it->second};
        }
        Model model = build_model(cfg, registry);
        StageOutcome out = run_pretrain(cfg, registry, model);
        pretrained[key] = out.checkpoint_path;
        return {out.metrics, out.checkpoint_path};
    }

    Metrics finetune_from(bool ppt, bool mixup, bool ambient, const std::string& checkpoint) {
        const std::string tag = "run" + std::to_string(run_counter++);
        RunConfig cfg = variant(ppt, mixup, ambient, base.pretrain.datasets, tag);
        Model model = build_model(cfg, registry);
        model.load_checkpoint(checkpoint);
        StageOutcome out = run_finetune(cfg, registry, model);
        return out.metrics;
    }
};

}  // namespace

std::string run_ablation(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    AblationRunner runner(cfg);

    const std::string target = cfg.finetune.datasets.at(0);
    std::vector<std::string> sources;  // pretrain corpus minus the target
    for (const auto& d : cfg.pretrain.datasets)
        if (d != target) sources.push_back(d);
    if (sources.size() < 2)
        throw ConfigError("ablation needs at least two non-target pretrain datasets");
    const std::vector<std::string> combined = cfg.pretrain.datasets;

    std::ostringstream summary;

    // dataset axis, 7 rows; mixup off, ppt on
    {
        std::vector<GridRow> rows;
        auto [m_target, ck_target] = runner.pretrain(true, false, true, {target});
        rows.push_back({"target_only", false, m_target});
        std::vector<std::string> source_ckpts;
        for (const auto& src : sources) {
            auto [m, ck] = runner.pretrain(true, false, true, {src});
            rows.push_back({src + "_only", false, m});
            source_ckpts.push_back(ck);
        }
        auto [m_comb, ck_comb] = runner.pretrain(true, false, true, combined);
        rows.push_back({"combined", false, m_comb});
        for (std::size_t i = 0; i < sources.size(); ++i)
            rows.push_back({sources[i] + "_only", true,
                            runner.finetune_from(true, false, true, source_ckpts[i])});
        rows.push_back({"combined", true, runner.finetune_from(true, false, true, ck_comb)});
        write_grid_csv((fs::path(cfg.out_dir) / "dataset_grid.csv").string(), rows);
        summary << format_grid("pretraining corpus (mixup off, ppt on)", rows) << "\n";
    }

    // 2x2 toggle grids: {toggle off/on} x {pretrain only, finetuned}
    auto toggle_grid = [&](const std::string& name, auto make_toggles) {
        std::vector<GridRow> rows;
        for (const bool enabled : {false, true}) {
            auto [ppt, mixup, ambient] = make_toggles(enabled);
            auto [m_pre, ck] = runner.pretrain(ppt, mixup, ambient, combined);
            rows.push_back({name + (enabled ? "_on" : "_off"), false, m_pre});
            rows.push_back({name + (enabled ? "_on" : "_off"), true,
                            runner.finetune_from(ppt, mixup, ambient, ck)});
        }
        // order rows as off/--, on/--, off/ft, on/ft to mirror the 2x2 layout
        std::vector<GridRow> ordered = {rows[0], rows[2], rows[1], rows[3]};
        write_grid_csv((fs::path(cfg.out_dir) / (name + "_grid.csv")).string(), ordered);
        summary << format_grid(name + " toggle (combined pretraining)", ordered) << "\n";
    };

    toggle_grid("ppt", [](bool on) { return std::tuple(on, true, true); });
    toggle_grid("mixup", [](bool on) { return std::tuple(true, on, true); });
    toggle_grid("ambient", [](bool on) { return std::tuple(true, false, on); });

    const std::string text = summary.str();
    std::ofstream out(fs::path(cfg.out_dir) / "ablate_summary.txt");
    out << text;
    return text;
}

}  // namespace mdseg
