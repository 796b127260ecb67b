#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mdseg/projection.hpp"
#include "mdseg/rng.hpp"

using namespace mdseg;

namespace {

PointScan single_point(double x, double y, double z) {
    PointScan scan;
    scan.x = {x};
    scan.y = {y};
    scan.z = {z};
    scan.intensity = {0.0};
    scan.labels = {0};
    return scan;
}

// The convention, written out longhand: used to cross-check project().
std::size_t reference_cell(double x, double y, double z, const SensorSpec& spec) {
    const double W = static_cast<double>(spec.width);
    const double H = static_cast<double>(spec.height);
    const double r = std::sqrt(x * x + y * y + z * z);
    const double az = r > 0.0 ? std::atan2(y, x) : 0.0;
    std::ptrdiff_t col = static_cast<std::ptrdiff_t>(std::floor(0.5 * (1.0 - az / M_PI) * W));
    col = ((col % static_cast<std::ptrdiff_t>(spec.width)) +
           static_cast<std::ptrdiff_t>(spec.width)) %
          static_cast<std::ptrdiff_t>(spec.width);
    const double fov_min = spec.fov_min_deg * M_PI / 180.0;
    const double fov_max = spec.fov_max_deg * M_PI / 180.0;
    double elev = r > 0.0 ? std::asin(z / r) : 0.0;
    elev = std::clamp(elev, fov_min, fov_max);
    std::ptrdiff_t row =
        static_cast<std::ptrdiff_t>(std::floor((fov_max - elev) / (fov_max - fov_min) * H));
    row = std::clamp<std::ptrdiff_t>(row, 0, static_cast<std::ptrdiff_t>(spec.height) - 1);
    return static_cast<std::size_t>(row) * spec.width + static_cast<std::size_t>(col);
}

}  // namespace

TEST_CASE("projection places axis-aligned points at the expected columns") {
    SensorSpec spec;  // 16 x 256, +/-22.5 deg

    // +x axis, zero elevation: azimuth 0 -> column W/2, middle of the FOV
    RangeImage img = project(single_point(10, 0, 0), spec);
    CHECK(img.height == spec.height);
    CHECK(img.width == spec.width);
    REQUIRE(img.cell_id.size() == 1);
    CHECK(img.cell_id[0] % spec.width == spec.width / 2);
    CHECK(img.cell_id[0] / spec.width == spec.height / 2);  // elev 0 -> first row below center
    CHECK(img.range[0] == doctest::Approx(10.0));

    // -x axis: azimuth pi -> column 0
    CHECK(project(single_point(-10, 0, 0), spec).cell_id[0] % spec.width == 0);

    // +y axis: azimuth pi/2 -> quarter width
    CHECK(project(single_point(0, 10, 0), spec).cell_id[0] % spec.width == spec.width / 4);

    // steep elevation above the FOV clamps to row 0
    CHECK(project(single_point(1, 0, 100), spec).cell_id[0] / spec.width == 0);
    // far below clamps to the bottom row
    CHECK(project(single_point(1, 0, -100), spec).cell_id[0] / spec.width == spec.height - 1);

    // origin point: range 0, azimuth 0
    RangeImage org = project(single_point(0, 0, 0), spec);
    CHECK(org.range[0] == 0.0);
    CHECK(org.cell_id[0] % spec.width == spec.width / 2);
}

TEST_CASE("identical points share a cell; occupancy sums to N") {
    SensorSpec spec;
    PointScan scan;
    for (int i = 0; i < 6; ++i) {
        scan.x.push_back(3.0);
        scan.y.push_back(-4.0);
        scan.z.push_back(0.5);
        scan.intensity.push_back(0.1);
        scan.labels.push_back(1);
    }
    RangeImage img = project(scan, spec);
    for (std::size_t i = 1; i < 6; ++i) CHECK(img.cell_id[i] == img.cell_id[0]);
    CHECK(img.occupancy[img.cell_id[0]] == 6);
    CHECK(std::accumulate(img.occupancy.begin(), img.occupancy.end(), std::size_t{0}) == 6);
    for (double r : img.range) CHECK(r == doctest::Approx(std::sqrt(9 + 16 + 0.25)));
}

TEST_CASE("projection matches the longhand reference on random clouds") {
    Rng rng(89);
    for (const SensorSpec spec : {SensorSpec{}, SensorSpec{8, 31, -14.0, 12.0}}) {
        PointScan scan;
        std::size_t n = 500;
        for (std::size_t i = 0; i < n; ++i) {
            scan.x.push_back(rng.uniform(-40, 40));
            scan.y.push_back(rng.uniform(-40, 40));
            scan.z.push_back(rng.uniform(-8, 8));
            scan.intensity.push_back(0);
            scan.labels.push_back(0);
        }
        RangeImage img = project(scan, spec);
        std::size_t occ_sum = std::accumulate(img.occupancy.begin(), img.occupancy.end(),
                                              std::size_t{0});
        CHECK(occ_sum == n);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(img.cell_id[i] == reference_cell(scan.x[i], scan.y[i], scan.z[i], spec));
            CHECK(img.cell_id[i] < spec.height * spec.width);
            CHECK(img.range[i] ==
                  doctest::Approx(std::hypot(scan.x[i], scan.y[i], scan.z[i])));
        }
    }
}

TEST_CASE("azimuth is continuous across the wrap seam") {
    SensorSpec spec;
    // just either side of -x: columns W-1 and 0
    RangeImage left = project(single_point(-10, -1e-6, 0), spec);
    RangeImage right = project(single_point(-10, 1e-6, 0), spec);
    const std::size_t cl = left.cell_id[0] % spec.width;
    const std::size_t cr = right.cell_id[0] % spec.width;
    CHECK(cl == spec.width - 1);
    CHECK(cr == 0);
}

TEST_CASE("unproject gathers each point's cell row") {
    SensorSpec spec{2, 4, -10, 10};
    PointScan scan;
    scan.x = {10, 10, -10};
    scan.y = {0, 0, 0};
    scan.z = {0, 0, 0};
    scan.intensity = {0, 0, 0};
    scan.labels = {0, 0, 0};
    RangeImage img = project(scan, spec);
    CHECK(img.cell_id[0] == img.cell_id[1]);
    CHECK(img.cell_id[0] != img.cell_id[2]);

    Tensor cells = Tensor::zeros({8, 2});
    for (std::size_t c = 0; c < 8; ++c) {
        cells.data()[c * 2] = static_cast<double>(c);
        cells.data()[c * 2 + 1] = 100.0 + static_cast<double>(c);
    }
    Tensor out = unproject(cells, img);
    REQUIRE(out.shape() == std::vector<std::size_t>{3, 2});
    CHECK(out.data()[0] == static_cast<double>(img.cell_id[0]));
    CHECK(out.data()[2] == static_cast<double>(img.cell_id[1]));
    CHECK(out.data()[4] == static_cast<double>(img.cell_id[2]));
    CHECK(out.data()[5] == doctest::Approx(100.0 + static_cast<double>(img.cell_id[2])));
}
