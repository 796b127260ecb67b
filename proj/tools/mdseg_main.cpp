#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mdseg/error.hpp"
#include "mdseg/pipeline.hpp"
#include "mdseg/synthbench.hpp"

namespace {

namespace fs = std::filesystem;
using namespace mdseg;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* opt = cmd->add_option("--config", args.config_path, "run config file (JSON)");
    if (config_required) opt->required();
    cmd->add_option("--set", args.overrides, "config override KEY=VALUE (repeatable)");
    cmd->add_option("--seed", args.seed, "master seed override")
        ->each([&args](const std::string&) { args.seed_set = true; });
    cmd->add_option("--out", args.out_dir, "output directory override");
}

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = RunConfig::load(args.config_path, args.overrides);
    if (args.seed_set) cfg.seed = args.seed;
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    return cfg;
}

int cmd_convert(const CommonArgs& args, const std::string& dataset,
                const std::vector<std::string>& inputs, const std::string& split) {
    RunConfig cfg = load_config(args);
    DatasetRegistry registry = DatasetRegistry::load(cfg.registry_path);
    const DatasetEntry* src = registry.find(dataset);
    if (!src) throw ConfigError("unknown dataset '" + dataset + "'");

    const fs::path dir = fs::path(cfg.out_dir) / dataset;
    fs::create_directories(dir);

    // converted output is already in target label space
    DatasetEntry out_entry = *src;
    out_entry.label_map = LabelMap::identity();

    for (const auto& in_path : inputs) {
        const std::string in_label = label_path_for(in_path);
        std::optional<std::string> label_opt;
        if (fs::exists(in_label)) label_opt = in_label;
        std::size_t dropped = 0;
        PointScan scan = load_scan(in_path, label_opt, *src, &dropped);
        if (dropped > 0)
            std::cerr << "warning: dropped " << dropped << " non-finite points from " << in_path
                      << "\n";
        const std::string out_bin = (dir / fs::path(in_path).filename()).string();
        save_scan(scan, out_bin, label_path_for(out_bin), out_entry);
        std::cout << in_path << " -> " << out_bin << " (" << scan.size() << " points, split "
                  << split << ")\n";
    }
    return 0;
}

int cmd_bench(const CommonArgs& args) {
    const std::string out = args.out_dir.empty() ? "bench" : args.out_dir;
    const std::uint64_t seed = args.seed_set ? args.seed : 1;
    BenchmarkLayout layout;
    for (const auto& kv : args.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not KEY=VALUE");
        const std::string key = kv.substr(0, eq);
        const auto value = static_cast<std::size_t>(std::stoull(kv.substr(eq + 1)));
        if (key == "scans_a")
            layout.scans_a = value;
        else if (key == "scans_b")
            layout.scans_b = value;
        else if (key == "target_train")
            layout.target_train = value;
        else if (key == "target_val")
            layout.target_val = value;
        else
            throw ConfigError("unknown bench key '" + key + "'");
    }
    const std::string registry = make_benchmark(out, seed, layout);
    std::cout << "benchmark written, registry at " << registry << "\n";
    return 0;
}

int cmd_pretrain(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    DatasetRegistry registry = DatasetRegistry::load(cfg.registry_path);
    Model model = build_model(cfg, registry);
    StageOutcome out = run_pretrain(cfg, registry, model);
    std::cout << "pretrain finished after " << out.result.steps_run << " steps"
              << (out.result.early_stopped ? " (early stop)" : "") << "\n"
              << "checkpoint: " << out.checkpoint_path << "\n"
              << metrics_summary(out.metrics);
    return out.result.diverged ? 1 : 0;
}

int cmd_finetune(const CommonArgs& args, const std::string& checkpoint, bool from_scratch) {
    RunConfig cfg = load_config(args);
    DatasetRegistry registry = DatasetRegistry::load(cfg.registry_path);
    Model model = build_model(cfg, registry);
    if (!from_scratch) {
        if (checkpoint.empty())
            throw ConfigError("finetune needs --checkpoint (or --from-scratch)");
        model.load_checkpoint(checkpoint);
    }
    StageOutcome out = run_finetune(cfg, registry, model);
    std::cout << "finetune finished after " << out.result.steps_run << " steps"
              << (out.result.early_stopped ? " (early stop)" : "") << "\n"
              << "checkpoint: " << out.checkpoint_path << "\n"
              << metrics_summary(out.metrics);
    return out.result.diverged ? 1 : 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint, std::string dataset) {
    RunConfig cfg = load_config(args);
    DatasetRegistry registry = DatasetRegistry::load(cfg.registry_path);
    Model model = build_model(cfg, registry);
    model.load_checkpoint(checkpoint);
    if (dataset.empty()) dataset = cfg.finetune.datasets.at(0);
    const Metrics m = evaluate_model(model, registry, dataset, cfg.augment);
    std::cout << metrics_summary(m);
    fs::create_directories(cfg.out_dir);
    std::ofstream csv(fs::path(cfg.out_dir) / "eval.csv");
    csv << metrics_csv_header() << "\n" << metrics_csv_row(m) << "\n";
    std::cout << "report: " << (fs::path(cfg.out_dir) / "eval.csv").string() << "\n";
    return 0;
}

int cmd_ablate(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    std::cout << run_ablation(cfg);
    std::cout << "reports under " << cfg.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-dataset point cloud segmentation toolkit"};
    app.require_subcommand(1);

    CommonArgs convert_args, bench_args, pretrain_args, finetune_args, eval_args, ablate_args;

    auto* convert = app.add_subcommand("convert", "ingest scans into the registry layout");
    std::string convert_dataset, convert_split = "train";
    std::vector<std::string> convert_inputs;
    add_common(convert, convert_args);
    convert->add_option("--dataset", convert_dataset, "registry entry to convert as")->required();
    convert->add_option("--split", convert_split, "train or val")
        ->check(CLI::IsMember({"train", "val"}));
    convert->add_option("inputs", convert_inputs, "input .bin files")->required();

    auto* bench = app.add_subcommand("bench", "generate the synthetic benchmark");
    add_common(bench, bench_args, /*config_required=*/false);

    auto* pretrain = app.add_subcommand("pretrain", "mixed-dataset pretraining stage");
    add_common(pretrain, pretrain_args);

    auto* finetune = app.add_subcommand("finetune", "frozen-extractor fine-tuning stage");
    std::string finetune_ckpt;
    bool from_scratch = false;
    add_common(finetune, finetune_args);
    finetune->add_option("--checkpoint", finetune_ckpt, "pretrained checkpoint");
    finetune->add_flag("--from-scratch", from_scratch, "fine-tune from random init");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_dataset;
    add_common(eval_cmd, eval_args);
    eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    eval_cmd->add_option("--dataset", eval_dataset, "dataset to evaluate on");

    auto* ablate = app.add_subcommand("ablate", "run the ablation grids");
    add_common(ablate, ablate_args);

    try {
        app.parse(argc, argv);
        if (convert->parsed())
            return cmd_convert(convert_args, convert_dataset, convert_inputs, convert_split);
        if (bench->parsed()) return cmd_bench(bench_args);
        if (pretrain->parsed()) return cmd_pretrain(pretrain_args);
        if (finetune->parsed()) return cmd_finetune(finetune_args, finetune_ckpt, from_scratch);
        if (eval_cmd->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_dataset);
        if (ablate->parsed()) return cmd_ablate(ablate_args);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const mdseg::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
