#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "mdseg/rng.hpp"
#include "mdseg/scan.hpp"

namespace mdseg {

struct ClassChannelModel {
    std::array<double, kNumClasses> mean{};
    std::array<double, kNumClasses> sigma{};
};

// Procedural scene recipe for one pseudo-dataset. Scans are a curved road
// strip on a noisy ground plane with vegetation clusters, boxes for
// vehicles/structures/objects, sparse people columns and uniform outliers,
// ray-binned through the sensor grid (nearest surface per cell).
struct SceneSpec {
    std::uint64_t seed = 0;
    SensorSpec sensor;
    ClassChannelModel intensity_model;
    std::optional<ClassChannelModel> ambient_model;

    double sensor_height = 1.8;       // meters above the road
    double ground_extent = 40.0;      // half-size of the scene
    double road_width_min = 3.0, road_width_max = 6.0;
    double road_curvature_max = 0.012;  // quadratic lateral drift per meter^2
    double vegetation_density = 1.0;    // cluster count multiplier
    double vehicle_rate = 1.2;          // expected boxes per scan
    double structure_rate = 0.9;
    double object_rate = 2.0;
    double people_rate = 0.25;
    double outlier_rate = 0.004;        // fraction of candidate points
    // candidate points sampled before ray binning; the emitted scan keeps at
    // most one point per sensor cell, so it is smaller than this
    std::size_t points_min = 5000, points_max = 7000;

    void validate() const;
};

// Deterministic per (spec.seed, scan_index); all 8 classes appear over any
// small sample of scans though rare ones may miss single scans.
PointScan generate_scan(const SceneSpec& spec, std::uint64_t scan_index);

// Built-in pseudo-dataset recipes with deliberate sensor and intensity shift.
SceneSpec pseudo_a_spec(std::uint64_t master_seed);
SceneSpec pseudo_b_spec(std::uint64_t master_seed);
SceneSpec pseudo_target_spec(std::uint64_t master_seed);

struct BenchmarkLayout {
    std::size_t scans_a = 800;  // training scans; a val split of max(1, n/20) is added
    std::size_t scans_b = 800;
    std::size_t target_train = 37;
    std::size_t target_val = 13;
};

// Writes pseudo-A, pseudo-B and pseudo-Target corpora in scan-io format under
// out_dir plus a ready registry.json; returns the registry path.
std::string make_benchmark(const std::string& out_dir, std::uint64_t master_seed,
                           const BenchmarkLayout& layout = {});

}  // namespace mdseg
