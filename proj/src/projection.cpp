#include "mdseg/projection.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mdseg/error.hpp"

namespace mdseg {

RangeImage project(const PointScan& scan, const SensorSpec& spec) {
    spec.validate();
    const std::size_t H = spec.height, W = spec.width;
    const double fov_min = spec.fov_min_deg * std::numbers::pi / 180.0;
    const double fov_max = spec.fov_max_deg * std::numbers::pi / 180.0;
    const double fov_span = fov_max - fov_min;

    RangeImage img;
    img.height = H;
    img.width = W;
    const std::size_t n = scan.size();
    img.cell_id.resize(n);
    img.range.resize(n);
    img.occupancy.assign(H * W, 0);

    for (std::size_t i = 0; i < n; ++i) {
        const double px = scan.x[i], py = scan.y[i], pz = scan.z[i];
        const double r = std::sqrt(px * px + py * py + pz * pz);
        img.range[i] = r;
        const double azimuth = r == 0.0 ? 0.0 : std::atan2(py, px);
        auto col = static_cast<std::size_t>(
            std::floor(0.5 * (1.0 - azimuth / std::numbers::pi) * static_cast<double>(W)));
        col %= W;
        double elev = r == 0.0 ? 0.0 : std::asin(std::clamp(pz / r, -1.0, 1.0));
        elev = std::clamp(elev, fov_min, fov_max);
        // row 0 at fov_max, increasing downward
        auto row = static_cast<std::size_t>(
            std::floor((fov_max - elev) / fov_span * static_cast<double>(H)));
        row = std::min(row, H - 1);
        const std::size_t cell = row * W + col;
        img.cell_id[i] = cell;
        ++img.occupancy[cell];
    }
    return img;
}

Tensor unproject(const Tensor& cell_feats, const RangeImage& image) {
    if (cell_feats.rank() != 2 || cell_feats.dim(0) != image.num_cells())
        throw DimensionError("unproject expects [" + std::to_string(image.num_cells()) +
                             " x D] cell features, got " + shape_str(cell_feats.shape()));
    return gather_rows(cell_feats, image.cell_id);
}

}  // namespace mdseg
