#include "mdseg/eval.hpp"

#include <iomanip>
#include <sstream>

#include "mdseg/error.hpp"

namespace mdseg {

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    ignored += other.ignored;
}

void accumulate(ConfusionMatrix& cm, const std::vector<std::uint8_t>& truth,
                const std::vector<std::uint8_t>& pred) {
    if (truth.size() != pred.size())
        throw DimensionError("accumulate: truth and prediction lengths differ");
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] == kIgnoreLabel) {
            ++cm.ignored;
            continue;
        }
        if (truth[i] >= kNumClasses)
            throw IndexError("truth label " + std::to_string(truth[i]) + " out of range");
        if (pred[i] >= kNumClasses)
            throw IndexError("predicted label " + std::to_string(pred[i]) + " out of range");
        ++cm.at(truth[i], pred[i]);
    }
}

Metrics metrics(const ConfusionMatrix& cm) {
    const std::uint64_t total = cm.total();
    if (total == 0) throw ValueError("metrics on an empty confusion matrix");

    Metrics m;
    std::uint64_t diag = 0;
    double macc_sum = 0.0;
    std::size_t macc_classes = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) {
        const std::uint64_t tp = cm.at(k, k);
        diag += tp;
        std::uint64_t fn = 0, fp = 0;
        for (std::size_t j = 0; j < kNumClasses; ++j) {
            if (j != k) {
                fn += cm.at(k, j);
                fp += cm.at(j, k);
            }
        }
        const std::uint64_t denom = tp + fp + fn;
        m.per_class_iou[k] =
            denom == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(denom);
        m.miou += m.per_class_iou[k];
        const std::uint64_t gt = tp + fn;
        if (gt > 0) {
            macc_sum += static_cast<double>(tp) / static_cast<double>(gt);
            ++macc_classes;
        }
    }
    m.miou /= static_cast<double>(kNumClasses);
    m.acc = static_cast<double>(diag) / static_cast<double>(total);
    m.macc = macc_classes == 0 ? 0.0 : macc_sum / static_cast<double>(macc_classes);
    return m;
}

std::string metrics_summary(const Metrics& m) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "mIoU " << 100.0 * m.miou << "  Acc " << 100.0 * m.acc << "  mAcc "
       << 100.0 * m.macc << "\n";
    for (std::size_t k = 0; k < kNumClasses; ++k)
        os << "  " << std::setw(10) << kClassNames[k] << "  IoU " << 100.0 * m.per_class_iou[k]
           << "\n";
    return os.str();
}

std::string metrics_csv_header() {
    std::string s = "miou,acc,macc";
    for (std::size_t k = 0; k < kNumClasses; ++k) s += std::string(",iou_") + kClassNames[k];
    return s;
}

std::string metrics_csv_row(const Metrics& m) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << 100.0 * m.miou << "," << 100.0 * m.acc << ","
       << 100.0 * m.macc;
    for (std::size_t k = 0; k < kNumClasses; ++k)
        os << "," << 100.0 * m.per_class_iou[k];
    return os.str();
}

}  // namespace mdseg
