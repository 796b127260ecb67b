#include "mdseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mdseg/error.hpp"

namespace mdseg {

void AugmentConfig::validate() const {
    if (dropout_prob < 0.0 || dropout_prob > 1.0)
        throw ConfigError("dropout_prob must lie in [0,1]");
    if (!(0.0 <= eq_low_min && eq_low_min <= eq_low_max && eq_high_min <= eq_high_max &&
          eq_high_max <= 100.0 && eq_low_max < eq_high_min))
        throw ConfigError("equalization cutoff ranges must satisfy 0 <= low < high <= 100");
    if (!(0.0 <= eval_low && eval_low < eval_high && eval_high <= 100.0))
        throw ConfigError("eval cutoffs must satisfy 0 <= low < high <= 100");
    if (yaw_limit_deg < 0.0) throw ConfigError("yaw_limit_deg must be >= 0");
    if (!(scale_min > 0.0 && scale_min <= scale_max)) throw ConfigError("bad scale range");
}

namespace {

// Nearest-rank percentile on a sorted array (1-based rank ceil(p/100 * N)).
double percentile(const std::vector<double>& sorted, double pct) {
    const auto n = sorted.size();
    auto idx = static_cast<std::size_t>(
        std::ceil(pct / 100.0 * static_cast<double>(n)));
    idx = std::clamp<std::size_t>(idx, 1, n);
    return sorted[idx - 1];
}

// Rank = number of elements <= v, so ties share a rank.
std::size_t rank_of(const std::vector<double>& sorted, double v) {
    return static_cast<std::size_t>(
        std::upper_bound(sorted.begin(), sorted.end(), v) - sorted.begin());
}

void rotate_z(PointScan& scan, double theta, const std::vector<std::size_t>& idx) {
    const double c = std::cos(theta), s = std::sin(theta);
    for (std::size_t i : idx) {
        const double px = scan.x[i], py = scan.y[i];
        scan.x[i] = c * px - s * py;
        scan.y[i] = s * px + c * py;
    }
}

}  // namespace

std::vector<double> histogram_equalize(const std::vector<double>& values, double low_pct,
                                       double high_pct) {
    if (values.empty()) throw ValueError("histogram_equalize on empty array");
    if (!(0.0 <= low_pct && low_pct < high_pct && high_pct <= 100.0))
        throw ValueError("histogram_equalize cutoffs must satisfy 0 <= low < high <= 100");
    std::vector<double> sorted(values);
    std::sort(sorted.begin(), sorted.end());
    const double lo = percentile(sorted, low_pct);
    const double hi = percentile(sorted, high_pct);
    const auto rlo = static_cast<double>(rank_of(sorted, lo));
    const auto rhi = static_cast<double>(rank_of(sorted, hi));

    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        if (v <= lo || rhi <= rlo)
            out[i] = 0.0;
        else if (v >= hi)
            out[i] = 1.0;
        else
            out[i] = std::clamp((static_cast<double>(rank_of(sorted, v)) - rlo) / (rhi - rlo),
                                0.0, 1.0);
    }
    return out;
}

std::pair<double, double> sample_eq_cutoffs(const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    const double low = rng.uniform(cfg.eq_low_min, cfg.eq_low_max);
    const double high = rng.uniform(cfg.eq_high_min, cfg.eq_high_max);
    return {low, high};
}

PointScan channel_dropout(PointScan scan, ScanChannel channel, const AugmentConfig& cfg,
                          Rng& rng) {
    if (channel == ScanChannel::kAmbient && !scan.has_ambient())
        throw ValueError("channel_dropout: scan has no ambient channel");
    const bool drop = rng.bernoulli(cfg.dropout_prob);
    if (drop) {
        auto& v = channel == ScanChannel::kIntensity ? scan.intensity : scan.ambient;
        std::fill(v.begin(), v.end(), 0.0);
    }
    return scan;
}

PointScan road_ground_yaw(PointScan scan, const AugmentConfig& cfg, Rng& rng) {
    if (!scan.has_labels())
        throw ValueError("road_ground_yaw requires a labeled scan");
    const double limit = cfg.yaw_limit_deg * std::numbers::pi / 180.0;
    const double theta = rng.uniform(-limit, limit);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < scan.size(); ++i)
        if (scan.labels[i] == kClassRoad || scan.labels[i] == kClassGround) idx.push_back(i);
    rotate_z(scan, theta, idx);
    return scan;
}

PointScan global_augment(PointScan scan, const AugmentConfig& cfg, Rng& rng) {
    const std::size_t n = scan.size();
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;

    if (cfg.rotation) rotate_z(scan, rng.uniform(-std::numbers::pi, std::numbers::pi), all);
    if (cfg.flip) {
        if (rng.bernoulli(0.5))
            for (double& v : scan.x) v = -v;
        if (rng.bernoulli(0.5))
            for (double& v : scan.y) v = -v;
    }
    if (cfg.scale) {
        const double s = rng.uniform(cfg.scale_min, cfg.scale_max);
        for (std::size_t i = 0; i < n; ++i) {
            scan.x[i] *= s;
            scan.y[i] *= s;
            scan.z[i] *= s;
        }
    }
    if (cfg.jitter) {
        auto clipped = [&](double v) {
            return std::clamp(v, -cfg.jitter_clip, cfg.jitter_clip);
        };
        for (std::size_t i = 0; i < n; ++i) {
            scan.x[i] += clipped(rng.normal(0.0, cfg.jitter_sigma));
            scan.y[i] += clipped(rng.normal(0.0, cfg.jitter_sigma));
            scan.z[i] += clipped(rng.normal(0.0, cfg.jitter_sigma));
        }
    }
    return scan;
}

PointScan eval_normalize(PointScan scan, const AugmentConfig& cfg) {
    scan.intensity = histogram_equalize(scan.intensity, cfg.eval_low, cfg.eval_high);
    if (scan.has_ambient())
        scan.ambient = histogram_equalize(scan.ambient, cfg.eval_low, cfg.eval_high);
    return scan;
}

PointScan augment_scan(PointScan scan, const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    scan = global_augment(std::move(scan), cfg, rng);
    if (scan.has_labels()) scan = road_ground_yaw(std::move(scan), cfg, rng);
    scan = channel_dropout(std::move(scan), ScanChannel::kIntensity, cfg, rng);
    if (scan.has_ambient()) scan = channel_dropout(std::move(scan), ScanChannel::kAmbient, cfg, rng);
    auto [lo, hi] = sample_eq_cutoffs(cfg, rng);
    scan.intensity = histogram_equalize(scan.intensity, lo, hi);
    if (scan.has_ambient()) {
        auto [alo, ahi] = sample_eq_cutoffs(cfg, rng);
        scan.ambient = histogram_equalize(scan.ambient, alo, ahi);
    }
    return scan;
}

}  // namespace mdseg
