#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "evax/dataset.hpp"
#include "evax/tensor.hpp"

namespace evax {

// Raised when a metric's denominator is empty (single-class AUC, no positives
// for sensitivity).
class UndefinedMetricError : public NumericalError {
   public:
    using NumericalError::NumericalError;
};

struct ConfusionCounts {
    std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
    std::int64_t total() const { return tp + tn + fp + fn; }
};

ConfusionCounts confusion(std::span<const int> predicted, std::span<const int> truth);

// Mann-Whitney U / (P N), ties counted one half.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct MeanAuc {
    double value = 0;
    std::vector<std::size_t> undefined;  // classes with a single label value
};

// Mean over the defined entries; throws if none are defined.
MeanAuc mean_auc(const std::vector<std::optional<double>> &per_class);

// scores/labels are [N, K] row-major; entries with weight 0 are skipped.
std::vector<std::optional<double>> per_class_auc(const std::vector<std::vector<double>> &scores,
                                                 const std::vector<std::vector<int>> &labels,
                                                 const std::vector<std::vector<double>> &weights = {});

double accuracy(const ConfusionCounts &c);
double sensitivity(const ConfusionCounts &c);

struct BinaryMask {
    std::int64_t height = 0, width = 0;
    std::vector<std::uint8_t> values;  // 0 or 1, row-major

    BinaryMask() = default;
    BinaryMask(std::int64_t h, std::int64_t w, std::uint8_t fill = 0);
    static BinaryMask from_image(const Image &img, double threshold = 0.5);
    std::uint8_t &at(std::int64_t i, std::int64_t j) { return values[static_cast<std::size_t>(i * width + j)]; }
    std::uint8_t at(std::int64_t i, std::int64_t j) const { return values[static_cast<std::size_t>(i * width + j)]; }
    std::int64_t count() const;
    bool operator==(const BinaryMask &) const = default;
};

// Both empty -> 1.
double dice(const BinaryMask &s, const BinaryMask &g);
double jaccard(const BinaryMask &s, const BinaryMask &g);

double box_iou(const Box &a, const Box &b);

// Uniform grid of `points` values over [lo, hi].
std::vector<double> threshold_grid(double lo = 0.1, double hi = 0.6, int points = 11);

// Bounding box of the largest 4-connected component of cam >= t (first in
// raster order on ties); nullopt if nothing passes.
std::optional<Box> largest_component_box(const Tensor &normalized_cam, double t);

// Per-image min-max to [0, 1]; a constant map becomes all ones.
Tensor minmax_normalize(const Tensor &cam);

struct LocalizationResult {
    std::vector<double> thresholds;
    std::vector<double> mean_iou;  // one per threshold
    double best_t = 0;
    double best_mean_iou = 0;
    double ap25 = 0;
    double ap50 = 0;
    double pointing = 0;
};

// cams: raw [H, W] maps, one per sample, in the same pixel frame as the boxes.
// AP at t*: predictions ranked by raw CAM peak, all-point interpolated
// precision over recall with one GT box per sample.
LocalizationResult cam_localize(const std::vector<Tensor> &cams, const std::vector<Box> &gt_boxes,
                                const std::vector<double> &thresholds);

// `threshold,mean_iou` rows, then `ap25,`, `ap50,`, `pointing,`, `best_t,` lines.
void write_localization_csv(const LocalizationResult &r, const std::filesystem::path &path);

}  // namespace evax
