#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mdseg/augment.hpp"
#include "mdseg/error.hpp"

using namespace mdseg;

namespace {

// Reference implementation straight from the definition: rank(v) = number of
// elements <= v, cutoffs by nearest rank, output clamped to [0,1].
std::vector<double> equalize_reference(const std::vector<double>& values, double low_pct,
                                       double high_pct) {
    std::vector<double> sorted(values);
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    auto nearest_rank = [&](double pct) {
        std::size_t k = static_cast<std::size_t>(
            std::ceil(pct / 100.0 * static_cast<double>(n)));
        if (k < 1) k = 1;
        if (k > n) k = n;
        return sorted[k - 1];
    };
    auto rank = [&](double v) {
        return static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), v) -
                                   sorted.begin());
    };
    const double lo = nearest_rank(low_pct), hi = nearest_rank(high_pct);
    std::vector<double> out(values.size());
    if (rank(hi) == rank(lo)) return std::vector<double>(values.size(), 0.0);
    for (std::size_t i = 0; i < values.size(); ++i)
        out[i] = std::clamp((rank(values[i]) - rank(lo)) / (rank(hi) - rank(lo)), 0.0, 1.0);
    return out;
}

PointScan make_scan(std::size_t n, Rng& rng, bool ambient = false) {
    PointScan scan;
    for (std::size_t i = 0; i < n; ++i) {
        scan.x.push_back(rng.uniform(-30, 30));
        scan.y.push_back(rng.uniform(-30, 30));
        scan.z.push_back(rng.uniform(-2, 2));
        scan.intensity.push_back(rng.uniform(0, 255));
        if (ambient) scan.ambient.push_back(rng.uniform(0, 1000));
        scan.labels.push_back(static_cast<std::uint8_t>(rng.uniform_index(kNumClasses)));
    }
    return scan;
}

}  // namespace

TEST_CASE("histogram_equalize matches the rank definition") {
    // 1..100: with cutoffs (2, 95), rank(lo)=2, rank(hi)=95; value 50 lands at
    // (50-2)/(95-2)
    std::vector<double> v(100);
    std::iota(v.begin(), v.end(), 1.0);
    std::vector<double> eq = histogram_equalize(v, 2.0, 95.0);
    CHECK(eq[49] == doctest::Approx((50.0 - 2.0) / (95.0 - 2.0)).epsilon(1e-12));
    CHECK(eq[0] == 0.0);
    CHECK(eq[99] == 1.0);

    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> vals(137);
        for (auto& x : vals) x = std::floor(rng.uniform(0, 40));  // plenty of ties
        std::vector<double> got = histogram_equalize(vals, 3.0, 94.0);
        std::vector<double> want = equalize_reference(vals, 3.0, 94.0);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i)
            CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("histogram_equalize degenerate and ordering properties") {
    CHECK(histogram_equalize({7, 7, 7, 7}, 2, 95) == std::vector<double>{0, 0, 0, 0});
    CHECK_THROWS_AS(histogram_equalize({}, 2, 95), ValueError);

    // monotone: order of distinct values is preserved
    Rng rng(37);
    std::vector<double> vals(200);
    for (auto& x : vals) x = rng.uniform(0, 10);
    std::vector<double> eq = histogram_equalize(vals, 2, 95);
    for (std::size_t i = 0; i < vals.size(); ++i)
        for (std::size_t j = 0; j < vals.size(); ++j)
            if (vals[i] < vals[j]) CHECK(eq[i] <= eq[j]);

    // equalization is invariant under any strictly monotone transform
    std::vector<double> cubed(vals);
    for (auto& x : cubed) x = x * x * x;
    std::vector<double> eq2 = histogram_equalize(cubed, 2, 95);
    for (std::size_t i = 0; i < vals.size(); ++i)
        CHECK(eq[i] == doctest::Approx(eq2[i]).epsilon(1e-12));
}

TEST_CASE("sample_eq_cutoffs covers the configured ranges") {
    AugmentConfig cfg;
    Rng rng(41);
    double lo_sum = 0, hi_sum = 0;
    const int trials = 100000;
    for (int i = 0; i < trials; ++i) {
        auto [lo, hi] = sample_eq_cutoffs(cfg, rng);
        CHECK(lo >= cfg.eq_low_min);
        CHECK(lo <= cfg.eq_low_max);
        CHECK(hi >= cfg.eq_high_min);
        CHECK(hi <= cfg.eq_high_max);
        lo_sum += lo;
        hi_sum += hi;
    }
    CHECK(lo_sum / trials == doctest::Approx(2.5).epsilon(0.02));
    CHECK(hi_sum / trials == doctest::Approx(94.5).epsilon(0.001));
}

TEST_CASE("channel_dropout fires at the configured rate and zeroes everything") {
    AugmentConfig cfg;
    Rng data_rng(43);
    PointScan base = make_scan(16, data_rng, true);

    Rng rng(47);
    int fired = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        PointScan out = channel_dropout(base, ScanChannel::kIntensity, cfg, rng);
        const bool zeroed = std::all_of(out.intensity.begin(), out.intensity.end(),
                                        [](double v) { return v == 0.0; });
        if (zeroed) ++fired;
        if (!zeroed) CHECK(out.intensity == base.intensity);  // all or nothing
        CHECK(out.ambient == base.ambient);  // other channel untouched
    }
    CHECK(std::abs(fired / double(trials) - cfg.dropout_prob) < 0.01);

    Rng rng2(47);
    PointScan amb = channel_dropout(base, ScanChannel::kAmbient, cfg, rng2);
    CHECK(amb.intensity == base.intensity);
}

TEST_CASE("road_ground_yaw rotates labeled points rigidly, leaves the rest alone") {
    AugmentConfig cfg;
    Rng data_rng(53);
    PointScan scan = make_scan(400, data_rng);

    Rng rng(59);
    PointScan out = road_ground_yaw(scan, cfg, rng);
    const double limit = cfg.yaw_limit_deg * M_PI / 180.0;
    bool any_moved = false;
    double theta_seen = 0.0;
    bool theta_set = false;
    for (std::size_t i = 0; i < scan.size(); ++i) {
        if (scan.labels[i] == kClassRoad || scan.labels[i] == kClassGround) {
            const double r0 = std::hypot(scan.x[i], scan.y[i]);
            const double r1 = std::hypot(out.x[i], out.y[i]);
            CHECK(std::abs(r1 - r0) < 1e-12);
            CHECK(out.z[i] == scan.z[i]);
            const double theta = std::atan2(out.y[i], out.x[i]) -
                                 std::atan2(scan.y[i], scan.x[i]);
            const double wrapped = std::remainder(theta, 2.0 * M_PI);
            CHECK(std::abs(wrapped) <= limit + 1e-9);
            if (!theta_set) {
                theta_seen = wrapped;
                theta_set = true;
            } else {
                // one angle per scan
                CHECK(wrapped == doctest::Approx(theta_seen).epsilon(1e-9));
            }
            if (std::abs(wrapped) > 1e-6) any_moved = true;
        } else {
            CHECK(out.x[i] == scan.x[i]);
            CHECK(out.y[i] == scan.y[i]);
            CHECK(out.z[i] == scan.z[i]);
        }
    }
    CHECK(any_moved);
    CHECK(out.labels == scan.labels);  // labels never change
}

TEST_CASE("global_augment geometry invariants") {
    AugmentConfig cfg;
    cfg.jitter = false;  // isolate the rigid + scale part
    Rng data_rng(61);
    PointScan scan = make_scan(100, data_rng);

    Rng rng(67);
    PointScan out = global_augment(scan, cfg, rng);
    // rotation/flip/scale preserve pairwise distance ratios: all scaled by one s
    const double d0_ref = std::hypot(scan.x[1] - scan.x[0], scan.y[1] - scan.y[0],
                                     scan.z[1] - scan.z[0]);
    const double d1_ref = std::hypot(out.x[1] - out.x[0], out.y[1] - out.y[0],
                                     out.z[1] - out.z[0]);
    const double s = d1_ref / d0_ref;
    CHECK(s >= cfg.scale_min - 1e-9);
    CHECK(s <= cfg.scale_max + 1e-9);
    for (std::size_t i = 2; i < 30; ++i) {
        const double d0 = std::hypot(scan.x[i] - scan.x[0], scan.y[i] - scan.y[0],
                                     scan.z[i] - scan.z[0]);
        const double d1 = std::hypot(out.x[i] - out.x[0], out.y[i] - out.y[0],
                                     out.z[i] - out.z[0]);
        CHECK(d1 == doctest::Approx(s * d0).epsilon(1e-9));
    }
    CHECK(out.intensity == scan.intensity);
    CHECK(out.labels == scan.labels);

    // jitter displacement is bounded by the clip radius (per axis)
    cfg.jitter = true;
    cfg.rotation = cfg.flip = cfg.scale = false;
    Rng rng2(71);
    PointScan jit = global_augment(scan, cfg, rng2);
    for (std::size_t i = 0; i < scan.size(); ++i) {
        CHECK(std::abs(jit.x[i] - scan.x[i]) <= cfg.jitter_clip + 1e-12);
        CHECK(std::abs(jit.y[i] - scan.y[i]) <= cfg.jitter_clip + 1e-12);
        CHECK(std::abs(jit.z[i] - scan.z[i]) <= cfg.jitter_clip + 1e-12);
    }
}

TEST_CASE("eval_normalize is deterministic and uses the fixed cutoffs") {
    AugmentConfig cfg;
    Rng data_rng(73);
    PointScan scan = make_scan(300, data_rng, true);

    PointScan a = eval_normalize(scan, cfg);
    PointScan b = eval_normalize(scan, cfg);
    CHECK(a.intensity == b.intensity);
    CHECK(a.ambient == b.ambient);
    CHECK(a.x == scan.x);  // geometry untouched
    CHECK(a.labels == scan.labels);

    std::vector<double> want = histogram_equalize(scan.intensity, cfg.eval_low, cfg.eval_high);
    CHECK(a.intensity == want);
    CHECK(a.ambient == histogram_equalize(scan.ambient, cfg.eval_low, cfg.eval_high));
}

TEST_CASE("augment_scan is reproducible under a fixed seed and keeps labels") {
    AugmentConfig cfg;
    Rng data_rng(79);
    PointScan scan = make_scan(250, data_rng, true);

    Rng r1(83), r2(83), r3(84);
    PointScan a = augment_scan(scan, cfg, r1);
    PointScan b = augment_scan(scan, cfg, r2);
    PointScan c = augment_scan(scan, cfg, r3);
    CHECK(a.x == b.x);
    CHECK(a.intensity == b.intensity);
    CHECK(a.ambient == b.ambient);
    CHECK(a.labels == scan.labels);
    CHECK(a.x != c.x);  // different seed, different draw

    // intensities leave equalized in [0,1]
    for (double v : a.intensity) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("augment config validation") {
    AugmentConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.dropout_prob = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = AugmentConfig{};
    cfg.eq_low_max = 98.0;  // low range must stay below the high range
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = AugmentConfig{};
    cfg.scale_min = 1.2;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
