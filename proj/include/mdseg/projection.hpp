#pragma once

#include <vector>

#include "mdseg/scan.hpp"
#include "mdseg/tensor.hpp"

namespace mdseg {

// Spherical grid assignment of a scan. Every point lands in exactly one cell;
// out-of-FOV elevations clamp to the edge rows so N is preserved.
struct RangeImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::size_t> cell_id;  // N entries in [0, H*W)
    std::vector<double> range;         // N entries, meters
    std::vector<std::size_t> occupancy;  // H*W counts, sums to N

    std::size_t num_cells() const { return height * width; }
};

// Azimuth convention: column = floor((0.5 * (1 - atan2(y,x)/pi)) * W) mod W.
// Elevation asin(z/r) is clamped into the vertical FOV; row 0 is the top.
// A point at the origin gets range 0 and azimuth 0.
RangeImage project(const PointScan& scan, const SensorSpec& spec);

// Per-point gather of each point's cell feature row.
Tensor unproject(const Tensor& cell_feats, const RangeImage& image);

}  // namespace mdseg
