#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mdseg/rng.hpp"
#include "mdseg/scan.hpp"

namespace mdseg {

struct AugmentConfig {
    double dropout_prob = 0.2;
    double eq_low_min = 0.0, eq_low_max = 5.0;
    double eq_high_min = 92.0, eq_high_max = 97.0;
    double eval_low = 2.0, eval_high = 95.0;
    double yaw_limit_deg = 1.5;
    bool rotation = true;
    bool flip = true;
    bool scale = true;
    bool jitter = true;
    double scale_min = 0.95, scale_max = 1.05;
    double jitter_sigma = 0.01, jitter_clip = 0.05;

    void validate() const;
};

enum class ScanChannel { kIntensity, kAmbient };

// Percentile-clipped empirical-CDF remap into [0,1]. Values at or below the
// low_pct percentile map to 0, at or above high_pct to 1; interior values map
// to their rescaled CDF rank. Percentiles by nearest rank; ties share a rank.
// A constant input (degenerate percentiles) maps to all zeros.
std::vector<double> histogram_equalize(const std::vector<double>& values, double low_pct,
                                       double high_pct);

std::pair<double, double> sample_eq_cutoffs(const AugmentConfig& cfg, Rng& rng);

// With probability cfg.dropout_prob zeroes the whole channel for this scan.
PointScan channel_dropout(PointScan scan, ScanChannel channel, const AugmentConfig& cfg,
                          Rng& rng);

// One yaw angle per scan, applied only to road/ground-labeled points.
PointScan road_ground_yaw(PointScan scan, const AugmentConfig& cfg, Rng& rng);

// FRNet-style global recipe: z-rotation, axis flips, isotropic scale, jitter.
PointScan global_augment(PointScan scan, const AugmentConfig& cfg, Rng& rng);

// Deterministic evaluation-time normalization at fixed cutoffs.
PointScan eval_normalize(PointScan scan, const AugmentConfig& cfg = {});

// Full training-time pipeline for one scan, in a fixed order.
PointScan augment_scan(PointScan scan, const AugmentConfig& cfg, Rng& rng);

}  // namespace mdseg
