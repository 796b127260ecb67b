#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mdseg/error.hpp"
#include "mdseg/synthbench.hpp"
#include "mdseg/train.hpp"
#include "test_util.hpp"

using namespace mdseg;
namespace fs = std::filesystem;

namespace {

std::vector<std::pair<std::string, Tensor>> single_param(Tensor t) {
    return {{"p", std::move(t)}};
}

}  // namespace

TEST_CASE("adamw first step moves by -lr in each coordinate direction") {
    // with a fresh state, m-hat/(sqrt(v-hat)+eps) == sign(g) up to eps
    Tensor p = Tensor::from({2}, {1.0, -2.0}, true);
    p.node()->ensure_grad();
    p.grad() = {0.5, -3.0};
    auto params = single_param(p);
    OptimState state;
    state.cfg.weight_decay = 0.0;
    adamw_step(params, state, 0.01);
    CHECK(p.data()[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(p.data()[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
    CHECK(state.step == 1);
}

TEST_CASE("weight decay is decoupled from the gradient") {
    // zero gradient: the only movement is the decay term -lr*wd*p
    Tensor p = Tensor::from({1}, {4.0}, true);
    p.node()->ensure_grad();
    p.grad() = {0.0};
    auto params = single_param(p);
    OptimState state;
    state.cfg.weight_decay = 0.1;
    adamw_step(params, state, 0.01);
    CHECK(p.data()[0] == doctest::Approx(4.0 * (1.0 - 0.01 * 0.1)).epsilon(1e-12));

    // with wd = 0 AdamW reduces to Adam: same trajectory on a quadratic
    Tensor a = Tensor::from({1}, {3.0}, true);
    Tensor b = Tensor::from({1}, {3.0}, true);
    OptimState sa, sb;
    sa.cfg.weight_decay = 0.0;
    sb.cfg.weight_decay = 0.0;
    auto pa = single_param(a);
    auto pb = single_param(b);
    for (int i = 0; i < 50; ++i) {
        a.zero_grad();
        backward(sum(mul(a, a)));
        adamw_step(pa, sa, 0.05);
        b.zero_grad();
        backward(sum(mul(b, b)));
        adamw_step(pb, sb, 0.05);
    }
    CHECK(a.data()[0] == b.data()[0]);
}

TEST_CASE("adamw skips frozen and gradient-less params, rejects NaN grads") {
    Tensor frozen = Tensor::from({1}, {2.0}, false);
    Tensor fresh = Tensor::from({1}, {2.0}, true);  // requires grad, none yet
    std::vector<std::pair<std::string, Tensor>> params = {{"frozen", frozen},
                                                          {"fresh", fresh}};
    OptimState state;
    for (int i = 0; i < 100; ++i) adamw_step(params, state, 0.1);
    CHECK(frozen.data()[0] == 2.0);  // bitwise: no decay either
    CHECK(fresh.data()[0] == 2.0);

    Tensor bad = Tensor::from({1}, {1.0}, true);
    bad.node()->ensure_grad();
    bad.grad() = {std::nan("")};
    auto bp = single_param(bad);
    OptimState s2;
    CHECK_THROWS_AS(adamw_step(bp, s2, 0.1), ValueError);
    CHECK(bad.data()[0] == 1.0);  // aborted before any write
}

TEST_CASE("adamw converges on a convex quadratic") {
    Rng rng(167);
    Tensor p = testutil::random_tensor({4}, rng);
    auto params = single_param(p);
    OptimState state;
    state.cfg.weight_decay = 0.0;
    for (int i = 0; i < 800; ++i) {
        p.zero_grad();
        Tensor shifted = sub(p, Tensor::from({4}, {1, 2, 3, 4}));
        backward(sum(mul(shifted, shifted)));
        adamw_step(params, state, 0.05);
    }
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(p.data()[i] == doctest::Approx(static_cast<double>(i + 1)).epsilon(1e-3));
}

TEST_CASE("one-cycle schedule endpoints, peak and continuity") {
    Schedule sched;
    sched.max_lr = 0.002;
    sched.total_steps = 1000;
    CHECK(one_cycle_lr(0, sched) == doctest::Approx(0.002 / 25.0).epsilon(1e-12));
    CHECK(one_cycle_lr(300, sched) == doctest::Approx(0.002).epsilon(1e-12));  // pct_start
    CHECK(one_cycle_lr(1000, sched) == doctest::Approx(0.002 / 1e4).epsilon(1e-9));
    CHECK(one_cycle_lr(5000, sched) == one_cycle_lr(1000, sched));  // clamps

    double prev = one_cycle_lr(0, sched);
    double peak = 0.0;
    for (std::size_t s = 1; s <= 1000; ++s) {
        const double lr = one_cycle_lr(s, sched);
        CHECK(lr > 0.0);
        CHECK(std::abs(lr - prev) < 0.002 * 0.02);  // no jumps
        peak = std::max(peak, lr);
        prev = lr;
    }
    CHECK(peak == doctest::Approx(0.002));
}

TEST_CASE("pattern matching and freeze application") {
    CHECK(pattern_match("extractor.*", "extractor.point1.w"));
    CHECK_FALSE(pattern_match("extractor.*", "head.out.w"));
    CHECK(pattern_match("*.scale_gen.*", "head.pn.scale_gen.w"));
    CHECK(pattern_match("*", "anything"));
    CHECK(pattern_match("ctx_table", "ctx_table"));
    CHECK_FALSE(pattern_match("ctx_table", "ctx_table2"));

    Rng rng(173);
    ModelConfig cfg;
    cfg.embed_dim = 8;
    cfg.expansion = 2;
    cfg.ambient_dim = 4;
    cfg.ctx_dim = 4;
    Model model(cfg, 2, rng);
    apply_freeze(model, kDefaultFinetuneFreeze);
    bool ctx_frozen = false;
    std::size_t frozen_count = 0;
    for (auto& [name, p] : model.named_parameters()) {
        const bool frozen = model.is_frozen(name);
        if (frozen) ++frozen_count;
        if (name == "ctx_table") ctx_frozen = frozen;
        if (name.rfind("extractor.", 0) == 0) CHECK(frozen);
        if (name.find("scale_gen") != std::string::npos) CHECK(frozen);
        if (name.find("shift_gen") != std::string::npos) CHECK(frozen);
        if (name.rfind("head.", 0) == 0 && name.find("_gen") == std::string::npos)
            CHECK_FALSE(frozen);
    }
    CHECK_FALSE(ctx_frozen);  // the context table keeps adapting
    CHECK(frozen_count > 0);

    CHECK_THROWS_AS(apply_freeze(model, {"no.match.*"}), ConfigError);
}

TEST_CASE("pick_scan respects dataset frequencies") {
    fs::path dir = fs::temp_directory_path() / "mdseg_pick_scan";
    fs::create_directories(dir);
    DatasetRegistry reg;
    DatasetEntry big;
    big.name = "big";
    big.dataset_id = 0;
    big.label_map = LabelMap::identity();
    for (int i = 0; i < 9900; ++i) big.train_scans.push_back("big_" + std::to_string(i));
    DatasetEntry small;
    small.name = "small";
    small.dataset_id = 1;
    small.label_map = LabelMap::identity();
    for (int i = 0; i < 100; ++i) small.train_scans.push_back("small_" + std::to_string(i));
    reg.entries = {big, small};

    // uniform over the union: the small dataset shows up ~1% of the time
    Rng rng(179);
    int small_hits = 0;
    const int trials = 100000;
    for (int i = 0; i < trials; ++i) {
        auto [id, path] = pick_scan(reg, {"big", "small"}, {}, rng);
        if (id == 1) ++small_hits;
    }
    CHECK(std::abs(small_hits / double(trials) - 0.01) < 0.003);

    // explicit weights override scan counts entirely
    Rng rng2(181);
    for (int i = 0; i < 2000; ++i) {
        auto [id, path] = pick_scan(reg, {"big", "small"}, {0.0, 1.0}, rng2);
        CHECK(id == 1);
    }

    CHECK_THROWS_AS(pick_scan(reg, {"nonexistent"}, {}, rng), ConfigError);
    CHECK_THROWS_AS(pick_scan(reg, {"big"}, {0.5, 0.5}, rng), ConfigError);
}

TEST_CASE("stage config validation") {
    DatasetRegistry reg;
    DatasetEntry e;
    e.name = "only";
    e.dataset_id = 0;
    e.label_map = LabelMap::identity();
    e.train_scans = {"a"};
    e.val_scans = {"b"};
    reg.entries = {e};

    StageConfig stage;
    stage.kind = StageKind::kFinetune;
    stage.datasets = {"only"};
    stage.eval_dataset = "only";
    CHECK_NOTHROW(stage.validate(reg));

    stage.datasets = {"only", "only"};  // finetune targets exactly one dataset
    CHECK_THROWS_AS(stage.validate(reg), ConfigError);

    stage.kind = StageKind::kPretrain;
    stage.datasets = {};
    CHECK_THROWS_AS(stage.validate(reg), ConfigError);

    stage.datasets = {"missing"};
    CHECK_THROWS_AS(stage.validate(reg), ConfigError);
}

TEST_CASE("history csv layout") {
    std::vector<HistoryRow> rows;
    rows.push_back({10, 0.001, 1.5, std::nullopt, std::nullopt});
    rows.push_back({20, 0.002, 1.25, 0.5, 0.75});
    const std::string csv = history_csv(rows);
    CHECK(csv.rfind("step,lr,train_loss,val_miou,val_acc\n", 0) == 0);
    CHECK(csv.find("\n10,") != std::string::npos);
    CHECK(csv.find("0.5") != std::string::npos);
    // missing eval columns stay empty rather than zero
    const auto line_start = csv.find("\n10,") + 1;
    const auto line = csv.substr(line_start, csv.find('\n', line_start) - line_start);
    CHECK(line.substr(line.size() - 2) == ",,");
}

// the whole loop on a miniature benchmark: loss goes down, the model overfits
// a handful of scans, runs are reproducible, and freezing holds
TEST_CASE("run_stage end to end on a tiny synthetic benchmark") {
    fs::path dir = fs::temp_directory_path() / "mdseg_train_e2e";
    fs::remove_all(dir);
    fs::create_directories(dir);

    BenchmarkLayout layout;
    layout.scans_a = 1;
    layout.scans_b = 1;
    layout.target_train = 4;
    layout.target_val = 2;
    DatasetRegistry reg = DatasetRegistry::load(make_benchmark(dir.string(), 4242, layout));
    REQUIRE(reg.find("pseudo_target") != nullptr);

    ModelConfig mcfg;
    mcfg.embed_dim = 16;
    mcfg.expansion = 2;
    mcfg.ambient_dim = 4;
    mcfg.ctx_dim = 8;
    Rng mrng(191);
    Model model(mcfg, reg.entries.size(), mrng);

    TrainContext ctx;
    ctx.registry = &reg;
    ctx.augment = AugmentConfig{};
    ctx.seed = 77;
    ctx.checkpoint_path = (dir / "best.ckpt").string();

    StageConfig stage;
    stage.kind = StageKind::kPretrain;
    stage.steps = 120;
    stage.max_lr = 0.004;
    stage.batch = 2;
    stage.datasets = {"pseudo_target"};
    stage.eval_dataset = "pseudo_target";
    stage.eval_every = 40;
    stage.patience = 100;

    StageResult res = run_stage(stage, model, ctx);
    CHECK(res.steps_run == 120);
    CHECK_FALSE(res.diverged);
    REQUIRE(!res.history.empty());

    // loss trend: mean over the last quarter well below the first quarter
    double head = 0.0, tail = 0.0;
    const std::size_t q = res.history.size() / 4;
    REQUIRE(q > 0);
    for (std::size_t i = 0; i < q; ++i) {
        head += res.history[i].train_loss;
        tail += res.history[res.history.size() - 1 - i].train_loss;
    }
    CHECK(tail < head * 0.8);
    CHECK(res.best_miou > 0.0);
    CHECK(fs::exists(ctx.checkpoint_path));

    // deterministic: a fresh model and the same seeds give the same history
    Rng mrng2(191);
    Model model2(mcfg, reg.entries.size(), mrng2);
    TrainContext ctx2 = ctx;
    ctx2.checkpoint_path.clear();
    StageResult res2 = run_stage(stage, model2, ctx2);
    REQUIRE(res2.history.size() == res.history.size());
    for (std::size_t i = 0; i < res.history.size(); ++i)
        CHECK(res2.history[i].train_loss == res.history[i].train_loss);

    // finetune stage: frozen extractor params are bit-identical afterwards
    Model tuned(mcfg, reg.entries.size(), mrng);
    tuned.load_checkpoint(ctx.checkpoint_path);
    std::vector<std::pair<std::string, std::vector<double>>> before;
    for (auto& [name, p] : tuned.named_parameters()) before.emplace_back(name, p.data());

    StageConfig ft;
    ft.kind = StageKind::kFinetune;
    ft.steps = 30;
    ft.max_lr = 0.002;
    ft.batch = 2;
    ft.datasets = {"pseudo_target"};
    ft.eval_dataset = "pseudo_target";
    ft.eval_every = 15;
    ft.patience = 100;
    ft.freeze = kDefaultFinetuneFreeze;
    ft.freeze_extractor_stats = true;

    TrainContext ftx = ctx;
    ftx.checkpoint_path.clear();
    StageResult fres = run_stage(ft, tuned, ftx);
    CHECK(fres.steps_run == 30);

    bool some_head_moved = false;
    for (auto& [name, p] : tuned.named_parameters()) {
        auto it = std::find_if(before.begin(), before.end(),
                               [&](const auto& kv) { return kv.first == name; });
        REQUIRE(it != before.end());
        if (tuned.is_frozen(name)) {
            CHECK(p.data() == it->second);
        } else if (name.rfind("head.", 0) == 0 && p.data() != it->second) {
            some_head_moved = true;
        }
    }
    CHECK(some_head_moved);

    fs::remove_all(dir);
}

TEST_CASE("early stopping halts after patience evaluations without progress") {
    fs::path dir = fs::temp_directory_path() / "mdseg_train_es";
    fs::remove_all(dir);
    fs::create_directories(dir);

    BenchmarkLayout layout;
    layout.scans_a = 1;
    layout.scans_b = 1;
    layout.target_train = 2;
    layout.target_val = 1;
    DatasetRegistry reg = DatasetRegistry::load(make_benchmark(dir.string(), 515, layout));

    ModelConfig mcfg;
    mcfg.embed_dim = 8;
    mcfg.expansion = 2;
    mcfg.ambient_dim = 0;
    mcfg.ctx_dim = 4;
    Rng mrng(193);
    Model model(mcfg, reg.entries.size(), mrng);

    TrainContext ctx;
    ctx.registry = &reg;
    ctx.seed = 5;

    StageConfig stage;
    stage.kind = StageKind::kPretrain;
    stage.steps = 4000;
    stage.max_lr = 1e-15;  // effectively no movement: mIoU can never improve
    stage.batch = 1;
    stage.datasets = {"pseudo_target"};
    stage.eval_dataset = "pseudo_target";
    stage.eval_every = 10;
    stage.patience = 3;

    StageResult res = run_stage(stage, model, ctx);
    CHECK(res.early_stopped);
    CHECK(res.steps_run < stage.steps);
    CHECK(res.steps_run % stage.eval_every == 0);

    // reconstruct the stopping point from the history: the run must end
    // exactly `patience` evaluations after the last improvement (the weights
    // barely move at this lr, but norm running stats still shift the metric)
    double best = -1.0;
    std::size_t best_step = 0;
    for (const auto& row : res.history)
        if (row.val_miou && *row.val_miou > best) {
            best = *row.val_miou;
            best_step = row.step;
        }
    CHECK(res.steps_run == best_step + stage.eval_every * stage.patience);

    fs::remove_all(dir);
}
