#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mdseg {

// Target class ids. The 8-way label set; IGNORE marks unlabeled points.
inline constexpr std::uint8_t kClassRoad = 0;
inline constexpr std::uint8_t kClassGround = 1;
inline constexpr std::uint8_t kClassVegetation = 2;
inline constexpr std::uint8_t kClassPeople = 3;
inline constexpr std::uint8_t kClassVehicle = 4;
inline constexpr std::uint8_t kClassStructure = 5;
inline constexpr std::uint8_t kClassObject = 6;
inline constexpr std::uint8_t kClassOutlier = 7;
inline constexpr std::uint8_t kIgnoreLabel = 255;
inline constexpr std::size_t kNumClasses = 8;

extern const char* const kClassNames[kNumClasses];

struct SensorSpec {
    std::size_t height = 16;
    std::size_t width = 256;
    double fov_min_deg = -22.5;
    double fov_max_deg = 22.5;

    void validate() const;
};

// One LiDAR sweep. All arrays share length N >= 1.
struct PointScan {
    std::vector<double> x, y, z;
    std::vector<double> intensity;
    std::vector<double> ambient;  // empty when the dataset has no ambient channel
    std::vector<std::uint8_t> labels;  // 0..7 or kIgnoreLabel
    int dataset_id = 0;

    std::size_t size() const { return x.size(); }
    bool has_ambient() const { return !ambient.empty(); }
    bool has_labels() const;  // any non-IGNORE label present
    void validate() const;
};

// Total map from source class ids to target ids (or IGNORE). Lookups of
// unseen source ids raise MappingError rather than silently ignoring.
struct LabelMap {
    std::map<std::uint16_t, std::uint8_t> source_to_target;

    std::uint8_t remap(std::uint16_t source) const;
    static LabelMap identity();
};

std::vector<std::uint8_t> remap_labels(const std::vector<std::uint16_t>& raw,
                                       const LabelMap& map);

struct DatasetEntry {
    std::string name;
    int dataset_id = 0;
    bool has_ambient = false;
    LabelMap label_map;
    SensorSpec sensor;
    std::vector<std::string> train_scans;  // .bin paths; labels at same stem
    std::vector<std::string> val_scans;
};

struct DatasetRegistry {
    std::vector<DatasetEntry> entries;

    const DatasetEntry& entry(int dataset_id) const;
    const DatasetEntry* find(const std::string& name) const;
    void validate() const;  // dense unique ids 0..D-1

    static DatasetRegistry load(const std::string& path);
    void save(const std::string& path) const;
};

// Parses 4- or 5-float little-endian point records per the registry entry,
// plus an optional packed uint32 label file (semantic class in the low 16
// bits). Points with non-finite coordinates are dropped; dropped_count, when
// given, receives how many.
PointScan load_scan(const std::string& bin_path, const std::optional<std::string>& label_path,
                    const DatasetEntry& entry, std::size_t* dropped_count = nullptr);

// Byte-exact inverse of load_scan for the same entry. IGNORE serializes as
// 0xFFFF in the low label halfword.
void save_scan(const PointScan& scan, const std::string& bin_path,
               const std::string& label_path, const DatasetEntry& entry);

// Installs the ambient channel; entries without ambients get zeros.
PointScan attach_ambient(PointScan scan, const std::vector<double>& ambient_values);

std::string label_path_for(const std::string& bin_path);

}  // namespace mdseg
