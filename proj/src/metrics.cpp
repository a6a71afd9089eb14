#include "evax/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace evax {

ConfusionCounts confusion(std::span<const int> predicted, std::span<const int> truth) {
    if (predicted.size() != truth.size()) throw ShapeError("confusion: prediction and truth lengths differ");
    ConfusionCounts c;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const bool p = predicted[i] != 0, t = truth[i] != 0;
        if (p && t) ++c.tp;
        else if (!p && !t) ++c.tn;
        else if (p) ++c.fp;
        else ++c.fn;
    }
    return c;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels lengths differ");
    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos_rank_sum = 0;
    std::int64_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            if (labels[idx[k]] == 1) {
                pos_rank_sum += mid;
                ++pos;
            } else if (labels[idx[k]] == 0) {
                ++neg;
            } else {
                throw DataError("roc_auc: labels must be 0 or 1");
            }
        }
        i = j;
    }
    if (pos == 0 || neg == 0) throw UndefinedMetricError("undefined AUC: labels contain a single class");
    // Ranks include negatives; subtracting P(P+1)/2 leaves wins + ties/2.
    const double u = pos_rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

MeanAuc mean_auc(const std::vector<std::optional<double>> &per_class) {
    MeanAuc r;
    double s = 0;
    std::size_t k = 0;
    for (std::size_t i = 0; i < per_class.size(); ++i) {
        if (per_class[i]) {
            s += *per_class[i];
            ++k;
        } else {
            r.undefined.push_back(i);
        }
    }
    if (k == 0) throw UndefinedMetricError("undefined mAUC: no class has both labels");
    r.value = s / static_cast<double>(k);
    return r;
}

std::vector<std::optional<double>> per_class_auc(const std::vector<std::vector<double>> &scores,
                                                 const std::vector<std::vector<int>> &labels,
                                                 const std::vector<std::vector<double>> &weights) {
    if (scores.size() != labels.size()) throw ShapeError("per_class_auc: row counts differ");
    if (scores.empty()) return {};
    const auto k = scores[0].size();
    std::vector<std::optional<double>> out(k);
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> s;
        std::vector<int> l;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (!weights.empty() && weights[i][c] == 0.0) continue;
            s.push_back(scores[i][c]);
            l.push_back(labels[i][c]);
        }
        try {
            out[c] = roc_auc(s, l);
        } catch (const UndefinedMetricError &) {
        }
    }
    return out;
}

double accuracy(const ConfusionCounts &c) {
    if (c.total() == 0) throw UndefinedMetricError("undefined accuracy: no samples");
    return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

double sensitivity(const ConfusionCounts &c) {
    if (c.tp + c.fn == 0) throw UndefinedMetricError("undefined sensitivity: no positives");
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

BinaryMask::BinaryMask(std::int64_t h, std::int64_t w, std::uint8_t fill)
    : height(h), width(w), values(static_cast<std::size_t>(h * w), fill) {}

BinaryMask BinaryMask::from_image(const Image &img, double threshold) {
    BinaryMask m(img.height, img.width);
    for (std::int64_t i = 0; i < img.height; ++i)
        for (std::int64_t j = 0; j < img.width; ++j) m.at(i, j) = img.at(i, j) >= threshold ? 1 : 0;
    return m;
}

std::int64_t BinaryMask::count() const {
    return std::count_if(values.begin(), values.end(), [](std::uint8_t v) { return v != 0; });
}

namespace {

void check_pair(const BinaryMask &s, const BinaryMask &g) {
    if (s.height != g.height || s.width != g.width) {
        throw ShapeError("mask dims differ: " + std::to_string(s.height) + "x" + std::to_string(s.width) + " vs " +
                         std::to_string(g.height) + "x" + std::to_string(g.width));
    }
}

std::int64_t overlap(const BinaryMask &s, const BinaryMask &g) {
    std::int64_t n = 0;
    for (std::size_t i = 0; i < s.values.size(); ++i) n += (s.values[i] != 0 && g.values[i] != 0);
    return n;
}

}  // namespace

double dice(const BinaryMask &s, const BinaryMask &g) {
    check_pair(s, g);
    const auto a = s.count(), b = g.count();
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(overlap(s, g)) / static_cast<double>(a + b);
}

double jaccard(const BinaryMask &s, const BinaryMask &g) {
    check_pair(s, g);
    const auto inter = overlap(s, g);
    const auto uni = s.count() + g.count() - inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double box_iou(const Box &a, const Box &b) {
    const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::vector<double> threshold_grid(double lo, double hi, int points) {
    if (points < 1 || !(lo <= hi)) throw ConfigError("thresholds", "threshold grid needs points >= 1 and lo <= hi");
    if (points == 1) return {lo};
    std::vector<double> t(static_cast<std::size_t>(points));
    for (int i = 0; i < points; ++i) t[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (points - 1);
    return t;
}

Tensor minmax_normalize(const Tensor &cam) {
    const auto [mn, mx] = std::minmax_element(cam.values().begin(), cam.values().end());
    Tensor out(cam.shape());
    const double lo = *mn, range = static_cast<double>(*mx) - lo;
    if (!(range > 0)) {
        out.fill(1.0f);
        return out;
    }
    for (std::int64_t i = 0; i < cam.numel(); ++i) out[i] = static_cast<float>((cam[i] - lo) / range);
    return out;
}

std::optional<Box> largest_component_box(const Tensor &cam, double t) {
    const auto h = cam.dim(0), w = cam.dim(1);
    std::vector<std::int32_t> label(static_cast<std::size_t>(h * w), -1);
    std::vector<std::int64_t> stack;
    std::int64_t best_size = 0;
    Box best;
    std::int32_t next = 0;
    for (std::int64_t start = 0; start < h * w; ++start) {
        if (cam[start] < t || label[static_cast<std::size_t>(start)] >= 0) continue;
        std::int64_t size = 0, r0 = h, r1 = -1, c0 = w, c1 = -1;
        stack.assign(1, start);
        label[static_cast<std::size_t>(start)] = next;
        while (!stack.empty()) {
            const auto p = stack.back();
            stack.pop_back();
            const auto i = p / w, j = p % w;
            ++size;
            r0 = std::min(r0, i), r1 = std::max(r1, i), c0 = std::min(c0, j), c1 = std::max(c1, j);
            const std::int64_t nb[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
            for (const auto &q : nb) {
                if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
                const auto k = q[0] * w + q[1];
                if (cam[k] < t || label[static_cast<std::size_t>(k)] >= 0) continue;
                label[static_cast<std::size_t>(k)] = next;
                stack.push_back(k);
            }
        }
        ++next;
        if (size > best_size) {
            best_size = size;
            best = {static_cast<double>(c0), static_cast<double>(r0), static_cast<double>(c1 + 1),
                    static_cast<double>(r1 + 1)};
        }
    }
    if (best_size == 0) return std::nullopt;
    return best;
}

namespace {

double average_precision(const std::vector<double> &peaks, const std::vector<bool> &hit) {
    const auto n = peaks.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return peaks[a] > peaks[b]; });
    std::vector<double> precision(n), recall(n);
    std::int64_t tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
        tp += hit[order[k]] ? 1 : 0;
        precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
        recall[k] = static_cast<double>(tp) / static_cast<double>(n);
    }
    // Interpolated precision: running max from the tail.
    for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double ap = 0, prev_recall = 0;
    for (std::size_t k = 0; k < n; ++k) {
        ap += (recall[k] - prev_recall) * precision[k];
        prev_recall = recall[k];
    }
    return ap;
}

}  // namespace

LocalizationResult cam_localize(const std::vector<Tensor> &cams, const std::vector<Box> &gt_boxes,
                                const std::vector<double> &thresholds) {
    if (cams.size() != gt_boxes.size()) throw ShapeError("cam_localize: one GT box per CAM is required");
    if (cams.empty()) throw DataError("cam_localize: no samples");
    if (thresholds.empty()) throw ConfigError("thresholds", "cam_localize: empty threshold list");
    for (double t : thresholds) {
        if (!(t >= 0.1 - 1e-12 && t <= 0.6 + 1e-12)) {
            throw ConfigError("thresholds", "thresholds must lie in [0.1, 0.6], got " + std::to_string(t));
        }
    }
    const auto n = cams.size();
    std::vector<Tensor> norm(n);
    std::vector<double> peaks(n);
    LocalizationResult r;
    r.thresholds = thresholds;
    std::int64_t hits = 0;
    for (std::size_t s = 0; s < n; ++s) {
        if (cams[s].rank() != 2) throw ShapeError("cam_localize: CAMs must be [H, W]");
        norm[s] = minmax_normalize(cams[s]);
        const auto it = std::max_element(cams[s].values().begin(), cams[s].values().end());
        peaks[s] = *it;
        const auto arg = it - cams[s].values().begin();
        const double cy = static_cast<double>(arg / cams[s].dim(1)) + 0.5, cx = static_cast<double>(arg % cams[s].dim(1)) + 0.5;
        const auto &b = gt_boxes[s];
        if (cx >= b.x0 && cx < b.x1 && cy >= b.y0 && cy < b.y1) ++hits;
    }
    r.pointing = static_cast<double>(hits) / static_cast<double>(n);

    std::vector<std::vector<double>> ious(thresholds.size(), std::vector<double>(n, 0.0));
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
        double total = 0;
        for (std::size_t s = 0; s < n; ++s) {
            const auto box = largest_component_box(norm[s], thresholds[k]);
            ious[k][s] = box ? box_iou(*box, gt_boxes[s]) : 0.0;
            total += ious[k][s];
        }
        r.mean_iou.push_back(total / static_cast<double>(n));
    }
    const auto best = static_cast<std::size_t>(std::max_element(r.mean_iou.begin(), r.mean_iou.end()) - r.mean_iou.begin());
    r.best_t = thresholds[best];
    r.best_mean_iou = r.mean_iou[best];
    std::vector<bool> hit25(n), hit50(n);
    for (std::size_t s = 0; s < n; ++s) {
        hit25[s] = ious[best][s] >= 0.25;
        hit50[s] = ious[best][s] >= 0.5;
    }
    r.ap25 = average_precision(peaks, hit25);
    r.ap50 = average_precision(peaks, hit50);
    return r;
}

void write_localization_csv(const LocalizationResult &r, const std::filesystem::path &path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    char buf[96];
    out << "threshold,mean_iou\n";
    for (std::size_t k = 0; k < r.thresholds.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.6g,%.9g\n", r.thresholds[k], r.mean_iou[k]);
        out << buf;
    }
    std::snprintf(buf, sizeof buf, "ap25,%.9g\nap50,%.9g\npointing,%.9g\nbest_t,%.6g\n", r.ap25, r.ap50, r.pointing,
                  r.best_t);
    out << buf;
}

}  // namespace evax
