#include "mdseg/scan.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "mdseg/error.hpp"

namespace mdseg {

const char* const kClassNames[kNumClasses] = {"road",    "ground",    "vegetation", "people",
                                              "vehicle", "structure", "object",     "outlier"};

void SensorSpec::validate() const {
    if (height < 1 || width < 1)
        throw ConfigError("sensor spec needs height/width >= 1");
    if (!(fov_min_deg < fov_max_deg))
        throw ConfigError("sensor spec needs fov_min < fov_max");
}

bool PointScan::has_labels() const {
    return std::any_of(labels.begin(), labels.end(),
                       [](std::uint8_t l) { return l != kIgnoreLabel; });
}

void PointScan::validate() const {
    const std::size_t n = size();
    if (n < 1) throw ValueError("scan must contain at least one point");
    if (y.size() != n || z.size() != n || intensity.size() != n || labels.size() != n ||
        (!ambient.empty() && ambient.size() != n))
        throw DimensionError("scan arrays disagree on point count");
    for (std::uint8_t l : labels)
        if (l >= kNumClasses && l != kIgnoreLabel)
            throw ValueError("label " + std::to_string(l) + " outside {0..7, 255}");
}

std::uint8_t LabelMap::remap(std::uint16_t source) const {
    if (source == 0xFFFF) return kIgnoreLabel;  // unlabeled, regardless of the map
    auto it = source_to_target.find(source);
    if (it == source_to_target.end())
        throw MappingError("source class " + std::to_string(source) +
                           " has no entry in the label map");
    return it->second;
}

LabelMap LabelMap::identity() {
    LabelMap m;
    for (std::uint16_t i = 0; i < kNumClasses; ++i)
        m.source_to_target[i] = static_cast<std::uint8_t>(i);
    return m;
}

std::vector<std::uint8_t> remap_labels(const std::vector<std::uint16_t>& raw,
                                       const LabelMap& map) {
    std::vector<std::uint8_t> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        out[i] = raw[i] == 0xFFFF ? kIgnoreLabel : map.remap(raw[i]);
    return out;
}

const DatasetEntry& DatasetRegistry::entry(int dataset_id) const {
    for (const auto& e : entries)
        if (e.dataset_id == dataset_id) return e;
    throw ConfigError("no dataset with id " + std::to_string(dataset_id) + " in registry");
}

const DatasetEntry* DatasetRegistry::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

void DatasetRegistry::validate() const {
    std::set<int> ids;
    for (const auto& e : entries) {
        ids.insert(e.dataset_id);
        e.sensor.validate();
    }
    if (ids.size() != entries.size())
        throw ConfigError("registry dataset ids are not unique");
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (!ids.count(static_cast<int>(i)))
            throw ConfigError("registry dataset ids must be dense 0..D-1");
}

namespace {

std::vector<char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const auto len = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<char> buf(static_cast<std::size_t>(len));
    in.read(buf.data(), len);
    if (!in) throw IoError("short read on " + path);
    return buf;
}

float read_f32le(const char* p) {
    std::uint32_t u = 0;
    for (int i = 0; i < 4; ++i)
        u |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

std::uint32_t read_u32le(const char* p) {
    std::uint32_t u = 0;
    for (int i = 0; i < 4; ++i)
        u |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return u;
}

void write_f32le(std::ostream& out, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
    out.write(b, 4);
}

void write_u32le(std::ostream& out, std::uint32_t u) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
    out.write(b, 4);
}

}  // namespace

PointScan load_scan(const std::string& bin_path, const std::optional<std::string>& label_path,
                    const DatasetEntry& entry, std::size_t* dropped_count) {
    const std::size_t channels = entry.has_ambient ? 5 : 4;
    const std::size_t record = channels * 4;
    const auto bytes = read_file(bin_path);
    if (bytes.empty() || bytes.size() % record != 0)
        throw FormatError(bin_path + ": " + std::to_string(bytes.size()) +
                          " bytes is not a multiple of the " + std::to_string(record) +
                          "-byte point record");
    const std::size_t n = bytes.size() / record;

    std::vector<std::uint16_t> raw_labels;
    if (label_path) {
        const auto lbytes = read_file(*label_path);
        if (lbytes.size() != n * 4)
            throw FormatError(*label_path + ": " + std::to_string(lbytes.size()) +
                              " bytes, expected " + std::to_string(n * 4) + " for " +
                              std::to_string(n) + " points");
        raw_labels.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            raw_labels[i] = static_cast<std::uint16_t>(read_u32le(lbytes.data() + i * 4) & 0xFFFF);
    }

    PointScan scan;
    scan.dataset_id = entry.dataset_id;
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const char* p = bytes.data() + i * record;
        const float px = read_f32le(p), py = read_f32le(p + 4), pz = read_f32le(p + 8);
        if (!std::isfinite(px) || !std::isfinite(py) || !std::isfinite(pz)) {
            ++dropped;
            continue;
        }
        scan.x.push_back(px);
        scan.y.push_back(py);
        scan.z.push_back(pz);
        scan.intensity.push_back(read_f32le(p + 12));
        if (entry.has_ambient) scan.ambient.push_back(read_f32le(p + 16));
        if (label_path)
            scan.labels.push_back(raw_labels[i] == 0xFFFF ? kIgnoreLabel
                                                          : entry.label_map.remap(raw_labels[i]));
        else
            scan.labels.push_back(kIgnoreLabel);
    }
    if (dropped_count) *dropped_count = dropped;
    scan.validate();
    return scan;
}

void save_scan(const PointScan& scan, const std::string& bin_path,
               const std::string& label_path, const DatasetEntry& entry) {
    scan.validate();
    if (entry.has_ambient && !scan.has_ambient())
        throw FormatError("dataset " + entry.name +
                          " expects an ambient channel but the scan has none");
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw IoError("cannot write " + bin_path);
    for (std::size_t i = 0; i < scan.size(); ++i) {
        write_f32le(bin, static_cast<float>(scan.x[i]));
        write_f32le(bin, static_cast<float>(scan.y[i]));
        write_f32le(bin, static_cast<float>(scan.z[i]));
        write_f32le(bin, static_cast<float>(scan.intensity[i]));
        if (entry.has_ambient) write_f32le(bin, static_cast<float>(scan.ambient[i]));
    }
    if (!bin) throw IoError("write failed on " + bin_path);

    std::ofstream lbl(label_path, std::ios::binary);
    if (!lbl) throw IoError("cannot write " + label_path);
    for (std::uint8_t l : scan.labels)
        write_u32le(lbl, l == kIgnoreLabel ? 0x0000FFFFu : static_cast<std::uint32_t>(l));
    if (!lbl) throw IoError("write failed on " + label_path);
}

PointScan attach_ambient(PointScan scan, const std::vector<double>& ambient_values) {
    if (ambient_values.size() != scan.size())
        throw DimensionError("ambient length " + std::to_string(ambient_values.size()) +
                             " does not match scan size " + std::to_string(scan.size()));
    scan.ambient = ambient_values;
    return scan;
}

std::string label_path_for(const std::string& bin_path) {
    std::filesystem::path p(bin_path);
    p.replace_extension(".label");
    return p.string();
}

// --- registry (JSON on disk) ---

namespace {

using nlohmann::json;

LabelMap label_map_from_json(const json& j, const std::filesystem::path& base) {
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "identity") return LabelMap::identity();
        // otherwise a path to a map file, relative to the registry
        std::filesystem::path p(s);
        if (p.is_relative()) p = base / p;
        std::ifstream in(p);
        if (!in) throw ConfigError("cannot open label map file " + p.string());
        json file_j;
        in >> file_j;
        return label_map_from_json(file_j.contains("label_map") ? file_j["label_map"] : file_j,
                                   base);
    }
    LabelMap m;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const int src = std::stoi(it.key());
        const int tgt = it.value().get<int>();
        if (src < 0 || src > 0xFFFE) throw ConfigError("label map source id out of range");
        if (tgt != kIgnoreLabel && (tgt < 0 || tgt >= static_cast<int>(kNumClasses)))
            throw ConfigError("label map target " + std::to_string(tgt) +
                              " outside {0..7, 255}");
        m.source_to_target[static_cast<std::uint16_t>(src)] = static_cast<std::uint8_t>(tgt);
    }
    return m;
}

}  // namespace

DatasetRegistry DatasetRegistry::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open registry " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("registry " + path + ": " + e.what());
    }
    const auto base = std::filesystem::path(path).parent_path();
    DatasetRegistry reg;
    for (const auto& dj : j.at("datasets")) {
        DatasetEntry e;
        e.name = dj.at("name").get<std::string>();
        e.dataset_id = dj.at("dataset_id").get<int>();
        e.has_ambient = dj.value("has_ambient", false);
        e.label_map = dj.contains("label_map") ? label_map_from_json(dj["label_map"], base)
                                               : LabelMap::identity();
        if (dj.contains("sensor")) {
            const auto& sj = dj["sensor"];
            e.sensor.height = sj.value("height", e.sensor.height);
            e.sensor.width = sj.value("width", e.sensor.width);
            e.sensor.fov_min_deg = sj.value("fov_min_deg", e.sensor.fov_min_deg);
            e.sensor.fov_max_deg = sj.value("fov_max_deg", e.sensor.fov_max_deg);
        }
        auto resolve = [&base](const std::string& s) {
            std::filesystem::path p(s);
            return p.is_relative() ? (base / p).string() : s;
        };
        for (const auto& s : dj.value("train", json::array()))
            e.train_scans.push_back(resolve(s.get<std::string>()));
        for (const auto& s : dj.value("val", json::array()))
            e.val_scans.push_back(resolve(s.get<std::string>()));
        reg.entries.push_back(std::move(e));
    }
    reg.validate();
    return reg;
}

void DatasetRegistry::save(const std::string& path) const {
    validate();
    const auto base = std::filesystem::path(path).parent_path();
    json j;
    j["datasets"] = json::array();
    for (const auto& e : entries) {
        json dj;
        dj["name"] = e.name;
        dj["dataset_id"] = e.dataset_id;
        dj["has_ambient"] = e.has_ambient;
        json mj = json::object();
        for (const auto& [src, tgt] : e.label_map.source_to_target)
            mj[std::to_string(src)] = tgt;
        dj["label_map"] = mj;
        dj["sensor"] = {{"height", e.sensor.height},
                        {"width", e.sensor.width},
                        {"fov_min_deg", e.sensor.fov_min_deg},
                        {"fov_max_deg", e.sensor.fov_max_deg}};
        auto relativize = [&base](const std::string& s) {
            std::filesystem::path p(s);
            auto rel = std::filesystem::relative(p, base.empty() ? "." : base);
            return rel.empty() ? s : rel.string();
        };
        dj["train"] = json::array();
        for (const auto& s : e.train_scans) dj["train"].push_back(relativize(s));
        dj["val"] = json::array();
        for (const auto& s : e.val_scans) dj["val"].push_back(relativize(s));
        j["datasets"].push_back(std::move(dj));
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot write registry " + path);
    out << j.dump(2) << "\n";
}

}  // namespace mdseg
