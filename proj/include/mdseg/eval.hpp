#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mdseg/scan.hpp"

namespace mdseg {

// K x K tally; rows are ground truth, columns predictions. IGNORE points are
// counted separately and never enter the metrics.
struct ConfusionMatrix {
    std::array<std::uint64_t, kNumClasses * kNumClasses> counts{};
    std::uint64_t ignored = 0;

    std::uint64_t& at(std::size_t truth, std::size_t pred) {
        return counts[truth * kNumClasses + pred];
    }
    std::uint64_t at(std::size_t truth, std::size_t pred) const {
        return counts[truth * kNumClasses + pred];
    }
    std::uint64_t total() const;
    void merge(const ConfusionMatrix& other);
};

void accumulate(ConfusionMatrix& cm, const std::vector<std::uint8_t>& truth,
                const std::vector<std::uint8_t>& pred);

struct Metrics {
    std::array<double, kNumClasses> per_class_iou{};
    double miou = 0.0;
    double acc = 0.0;
    double macc = 0.0;  // mean recall over classes with ground-truth points
};

// IoU_k = TP / (TP + FP + FN) with 0/0 counted as 0 and still averaged into
// mIoU; mAcc skips classes with no ground-truth points.
Metrics metrics(const ConfusionMatrix& cm);

// Human-readable block and a CSV row matching the report column order
// (mIoU, Acc, mAcc, then per-class IoU).
std::string metrics_summary(const Metrics& m);
std::string metrics_csv_header();
std::string metrics_csv_row(const Metrics& m);

}  // namespace mdseg
