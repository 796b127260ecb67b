#include "mdseg/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "mdseg/error.hpp"
#include "mdseg/projection.hpp"

namespace mdseg {

void SceneSpec::validate() const {
    sensor.validate();
    if (ground_extent <= 5.0) throw ConfigError("scene ground_extent too small");
    if (!(road_width_min > 0.0 && road_width_min <= road_width_max))
        throw ConfigError("bad road width range");
    if (vegetation_density < 0.0 || vehicle_rate < 0.0 || structure_rate < 0.0 ||
        object_rate < 0.0 || people_rate < 0.0 || outlier_rate < 0.0)
        throw ConfigError("scene class rates must be >= 0");
    if (points_min < 100 || points_min > points_max)
        throw ConfigError("bad points_per_scan range");
}

namespace {

struct Candidate {
    double x, y, z;
    std::uint8_t label;
};

// Lateral offset of the road centerline at longitudinal position t.
double road_offset(double t, double drift, double curvature) {
    return drift * t + curvature * t * t;
}

double ground_height(double x, double y, double phase_a, double phase_b) {
    return 0.12 * std::sin(0.11 * x + phase_a) + 0.10 * std::cos(0.13 * y + phase_b) +
           0.04 * std::sin(0.31 * (x + y));
}

std::size_t poisson_count(double rate, Rng& rng) {
    // small rates only; inversion by sequential search
    if (rate <= 0.0) return 0;
    const double L = std::exp(-rate);
    double p = 1.0;
    std::size_t k = 0;
    do {
        ++k;
        p *= rng.uniform();
    } while (p > L && k < 64);
    return k - 1;
}

void sample_box(std::vector<Candidate>& out, Rng& rng, double cx, double cy, double base_z,
                double sx, double sy, double sz, std::uint8_t label, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        // point on one of the four side faces or the top
        const int face = static_cast<int>(rng.uniform_index(5));
        double lx = rng.uniform(-0.5, 0.5) * sx;
        double ly = rng.uniform(-0.5, 0.5) * sy;
        double pz = base_z + rng.uniform() * sz;
        switch (face) {
            case 0: lx = -0.5 * sx; break;
            case 1: lx = 0.5 * sx; break;
            case 2: ly = -0.5 * sy; break;
            case 3: ly = 0.5 * sy; break;
            default: pz = base_z + sz; break;
        }
        out.push_back({cx + lx, cy + ly, pz, label});
    }
}

}  // namespace

PointScan generate_scan(const SceneSpec& spec, std::uint64_t scan_index) {
    spec.validate();
    Rng rng = Rng::derive(spec.seed, scan_index);

    const double R = spec.ground_extent;
    const double gz = -spec.sensor_height;  // nominal ground height, sensor frame
    const double phase_a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double phase_b = rng.uniform(0.0, 2.0 * std::numbers::pi);

    // road runs roughly along a random heading through the origin
    const double heading = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double ch = std::cos(heading), sh = std::sin(heading);
    // Scene archetype: a coarse scene-level mixture factor (open road, forest,
    // village, parking lot, construction site, plain field).  Each scan draws
    // one archetype, which rescales the class composition.  A small corpus
    // under-samples the archetypes; a large one covers them all, so corpus
    // size genuinely changes what the model gets to see.
    const std::size_t scene_type = rng.uniform_index(6);
    double veg_mult = 1.0, vehicle_mult = 1.0, structure_mult = 1.0;
    double object_mult = 1.0, people_mult = 1.0, outlier_mult = 1.0;
    double width_mult = 1.0;
    switch (scene_type) {
        case 0:  // open road
            veg_mult = 0.25; structure_mult = 0.3; vehicle_mult = 2.5;
            width_mult = 1.6;
            break;
        case 1:  // forest
            veg_mult = 3.0; structure_mult = 0.2; vehicle_mult = 0.3;
            object_mult = 0.5;
            break;
        case 2:  // village
            structure_mult = 3.0; people_mult = 3.0; object_mult = 2.0;
            width_mult = 0.7;
            break;
        case 3:  // parking lot
            vehicle_mult = 5.0; structure_mult = 0.5; width_mult = 1.4;
            break;
        case 4:  // construction site
            object_mult = 4.0; outlier_mult = 3.0; structure_mult = 1.5;
            people_mult = 2.0;
            break;
        case 5:  // plain field
            veg_mult = 0.5; vehicle_mult = 0.5; object_mult = 0.5;
            structure_mult = 0.5;
            break;
    }

    const double width =
        width_mult * rng.uniform(spec.road_width_min, spec.road_width_max);
    const double drift = rng.uniform(-0.05, 0.05);
    const double curvature = rng.uniform(-spec.road_curvature_max, spec.road_curvature_max);

    const std::size_t n_cand =
        spec.points_min + static_cast<std::size_t>(rng.uniform_index(
                              spec.points_max - spec.points_min + 1));

    std::vector<Candidate> cand;
    cand.reserve(n_cand + 512);

    const std::size_t n_road = static_cast<std::size_t>(0.18 * static_cast<double>(n_cand));
    const std::size_t n_ground = static_cast<std::size_t>(0.42 * static_cast<double>(n_cand));
    const std::size_t n_veg = static_cast<std::size_t>(
        0.30 * veg_mult * spec.vegetation_density * static_cast<double>(n_cand));

    for (std::size_t i = 0; i < n_road; ++i) {
        const double t = rng.uniform(-R, R);
        const double lat = road_offset(t, drift, curvature) + rng.uniform(-0.5, 0.5) * width;
        const double px = ch * t - sh * lat;
        const double py = sh * t + ch * lat;
        const double pz = gz + 0.3 * ground_height(px, py, phase_a, phase_b) +
                          rng.normal(0.0, 0.015);
        cand.push_back({px, py, pz, kClassRoad});
    }
    for (std::size_t i = 0; i < n_ground; ++i) {
        const double px = rng.uniform(-R, R);
        const double py = rng.uniform(-R, R);
        // skip the road strip
        const double t = ch * px + sh * py;
        const double lat = -sh * px + ch * py - road_offset(t, drift, curvature);
        if (std::abs(lat) < 0.5 * width + 0.3) continue;
        const double pz = gz + ground_height(px, py, phase_a, phase_b) + rng.normal(0.0, 0.03);
        cand.push_back({px, py, pz, kClassGround});
    }

    const std::size_t n_clusters =
        2 + poisson_count(5.0 * veg_mult * spec.vegetation_density, rng);
    for (std::size_t c = 0; c < n_clusters && n_veg > 0; ++c) {
        const double cx = rng.uniform(-R, R), cy = rng.uniform(-R, R);
        const double radius = rng.uniform(1.5, 6.0);
        const double height = rng.uniform(2.0, 9.0);
        const std::size_t per = n_veg / n_clusters + 1;
        for (std::size_t i = 0; i < per; ++i) {
            const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double r = radius * std::sqrt(rng.uniform());
            const double px = cx + r * std::cos(a);
            const double py = cy + r * std::sin(a);
            const double pz = gz + rng.uniform() * height;
            cand.push_back({px, py, pz, kClassVegetation});
        }
    }

    const std::size_t n_vehicles = poisson_count(vehicle_mult * spec.vehicle_rate, rng);
    for (std::size_t i = 0; i < n_vehicles; ++i) {
        const double t = rng.uniform(-0.6 * R, 0.6 * R);
        const double lat = road_offset(t, drift, curvature) + rng.uniform(-1.5, 1.5);
        sample_box(cand, rng, ch * t - sh * lat, sh * t + ch * lat, gz,
                   rng.uniform(3.0, 6.0), rng.uniform(1.5, 2.6), rng.uniform(1.2, 2.2),
                   kClassVehicle, 120);
    }
    const std::size_t n_structures = poisson_count(structure_mult * spec.structure_rate, rng);
    for (std::size_t i = 0; i < n_structures; ++i) {
        const double px = rng.uniform(-0.8 * R, 0.8 * R);
        const double py = rng.uniform(-0.8 * R, 0.8 * R);
        sample_box(cand, rng, px, py, gz, rng.uniform(3.0, 12.0), rng.uniform(2.0, 10.0),
                   rng.uniform(2.0, 7.0), kClassStructure, 200);
    }
    const std::size_t n_objects = poisson_count(object_mult * spec.object_rate, rng);
    for (std::size_t i = 0; i < n_objects; ++i) {
        const double px = rng.uniform(-0.7 * R, 0.7 * R);
        const double py = rng.uniform(-0.7 * R, 0.7 * R);
        sample_box(cand, rng, px, py, gz, rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5),
                   rng.uniform(0.4, 2.5), kClassObject, 40);
    }
    const std::size_t n_people = poisson_count(people_mult * spec.people_rate, rng);
    for (std::size_t i = 0; i < n_people; ++i) {
        const double px = rng.uniform(-0.5 * R, 0.5 * R);
        const double py = rng.uniform(-0.5 * R, 0.5 * R);
        for (int j = 0; j < 25; ++j) {
            const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
            cand.push_back({px + 0.18 * std::cos(a), py + 0.18 * std::sin(a),
                            gz + rng.uniform() * 1.7, kClassPeople});
        }
    }
    const std::size_t n_outliers =
        static_cast<std::size_t>(outlier_mult * spec.outlier_rate * static_cast<double>(n_cand));
    for (std::size_t i = 0; i < n_outliers; ++i) {
        cand.push_back({rng.uniform(-R, R), rng.uniform(-R, R), rng.uniform(-2.0, 12.0),
                        kClassOutlier});
    }

    // sensor simulation: nearest candidate per grid cell survives
    PointScan all;
    all.dataset_id = 0;
    for (const auto& c : cand) {
        all.x.push_back(c.x);
        all.y.push_back(c.y);
        all.z.push_back(c.z);
        all.intensity.push_back(0.0);
        all.labels.push_back(c.label);
    }
    const RangeImage img = project(all, spec.sensor);
    std::vector<std::ptrdiff_t> winner(spec.sensor.height * spec.sensor.width, -1);
    for (std::size_t i = 0; i < all.size(); ++i) {
        auto& w = winner[img.cell_id[i]];
        if (w < 0 || img.range[i] < img.range[static_cast<std::size_t>(w)])
            w = static_cast<std::ptrdiff_t>(i);
    }

    PointScan scan;
    for (std::ptrdiff_t w : winner) {
        if (w < 0) continue;
        const auto i = static_cast<std::size_t>(w);
        const std::uint8_t label = all.labels[i];
        scan.x.push_back(all.x[i]);
        scan.y.push_back(all.y[i]);
        scan.z.push_back(all.z[i]);
        scan.labels.push_back(label);
        const double intensity = std::max(
            0.0, rng.normal(spec.intensity_model.mean[label], spec.intensity_model.sigma[label]));
        scan.intensity.push_back(intensity);
        if (spec.ambient_model)
            scan.ambient.push_back(std::max(
                0.0, rng.normal(spec.ambient_model->mean[label], spec.ambient_model->sigma[label])));
    }
    scan.validate();
    return scan;
}

namespace {

// Shared reflectance profile: distributions overlap heavily on purpose so
// intensity alone cannot separate the classes and geometry has to carry the
// rare ones. Per-dataset scale models calibration differences.
ClassChannelModel scaled_intensity(double scale) {
    ClassChannelModel m;
    // one shared reflectance profile for every dataset: class means are
    // spread but the distributions overlap heavily (d' well under 1), so the
    // fine class boundaries only emerge from large sample counts
    m.mean = {0.30, 0.38, 0.55, 0.25, 0.50, 0.62, 0.45, 0.35};
    m.sigma = {0.14, 0.14, 0.15, 0.13, 0.14, 0.14, 0.14, 0.18};
    for (auto& v : m.mean) v *= scale;
    for (auto& v : m.sigma) v *= scale;
    return m;
}

}  // namespace

SceneSpec pseudo_a_spec(std::uint64_t master_seed) {
    SceneSpec s;
    s.seed = Rng(master_seed ^ 0xA11CE5ULL).next_u64();
    s.sensor = {24, 192, -20.0, 14.0};
    s.intensity_model = scaled_intensity(100.0);
    s.vegetation_density = 1.0;
    s.structure_rate = 3.0;  // urban-like: busy scenes
    s.vehicle_rate = 3.0;
    s.object_rate = 3.5;
    s.people_rate = 4.0;
    return s;
}

SceneSpec pseudo_b_spec(std::uint64_t master_seed) {
    SceneSpec s;
    s.seed = Rng(master_seed ^ 0xB0B5ULL).next_u64();
    s.sensor = {16, 144, -16.0, 16.0};
    // same physical classes, different radiometric calibration
    s.intensity_model = scaled_intensity(1.0);
    s.vegetation_density = 1.0;
    s.structure_rate = 2.5;
    s.vehicle_rate = 2.5;
    s.object_rate = 3.0;
    s.people_rate = 3.0;
    s.road_width_min = 3.0;
    s.road_width_max = 6.0;
    return s;
}

SceneSpec pseudo_target_spec(std::uint64_t master_seed) {
    SceneSpec s;
    s.seed = Rng(master_seed ^ 0x7A96E7ULL).next_u64();
    s.sensor = {16, 256, -22.5, 22.5};
    s.intensity_model = scaled_intensity(300.0);
    ClassChannelModel amb;
    // ambient contrasts the road against everything else but overlaps within
    // the rest, mirroring its road-boundary role
    amb.mean = {60.0, 150.0, 170.0, 160.0, 165.0, 155.0, 160.0, 140.0};
    amb.sigma = {25.0, 45.0, 50.0, 45.0, 50.0, 45.0, 50.0, 60.0};
    s.ambient_model = amb;
    // rural: denser vegetation, fewer structures/vehicles, rare people
    s.vegetation_density = 1.2;
    s.structure_rate = 1.0;
    s.vehicle_rate = 1.0;
    s.object_rate = 2.0;
    s.people_rate = 0.15;
    s.road_width_min = 3.0;
    s.road_width_max = 6.0;
    return s;
}

std::string make_benchmark(const std::string& out_dir, std::uint64_t master_seed,
                           const BenchmarkLayout& layout) {
    namespace fs = std::filesystem;
    const fs::path root(out_dir);
    fs::create_directories(root);

    DatasetRegistry registry;

    auto emit = [&](const SceneSpec& spec, const std::string& name, int dataset_id,
                    std::size_t n_train, std::size_t n_val) {
        DatasetEntry entry;
        entry.name = name;
        entry.dataset_id = dataset_id;
        entry.has_ambient = spec.ambient_model.has_value();
        entry.label_map = LabelMap::identity();
        entry.sensor = spec.sensor;
        const fs::path dir = root / name;
        fs::create_directories(dir);
        for (std::size_t i = 0; i < n_train + n_val; ++i) {
            PointScan scan = generate_scan(spec, i);
            scan.dataset_id = dataset_id;
            char stem[32];
            std::snprintf(stem, sizeof(stem), "%06zu", i);
            const std::string bin = (dir / (std::string(stem) + ".bin")).string();
            save_scan(scan, bin, label_path_for(bin), entry);
            (i < n_train ? entry.train_scans : entry.val_scans).push_back(bin);
        }
        registry.entries.push_back(std::move(entry));
    };

    emit(pseudo_a_spec(master_seed), "pseudo_a", 0, layout.scans_a,
         std::max<std::size_t>(1, layout.scans_a / 20));
    emit(pseudo_b_spec(master_seed), "pseudo_b", 1, layout.scans_b,
         std::max<std::size_t>(1, layout.scans_b / 20));
    emit(pseudo_target_spec(master_seed), "pseudo_target", 2, layout.target_train,
         layout.target_val);

    const std::string reg_path = (root / "registry.json").string();
    registry.save(reg_path);
    return reg_path;
}

}  // namespace mdseg
