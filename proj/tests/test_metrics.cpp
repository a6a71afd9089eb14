#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "evax/metrics.hpp"
#include "evax/rng.hpp"

namespace evax {
namespace {

double brute_auc(const std::vector<double> &s, const std::vector<int> &l) {
    double wins = 0;
    std::int64_t pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (l[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (l[j] != 0) continue;
            ++pairs;
            if (s[i] > s[j]) wins += 1;
            else if (s[i] == s[j]) wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

TEST(RocAuc, Examples) {
    EXPECT_EQ(roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}), 1.0);
    EXPECT_EQ(roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75);
    EXPECT_EQ(roc_auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{0, 1, 0, 1}), 0.5);
    EXPECT_THROW(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), UndefinedMetricError);
}

TEST(RocAuc, MatchesBruteForceExactly) {
    CounterRng rng(17);
    for (int inst = 0; inst < 200; ++inst) {
        const auto n = 2 + static_cast<std::int64_t>(rng.below(49));
        std::vector<double> s(static_cast<std::size_t>(n));
        std::vector<int> l(static_cast<std::size_t>(n));
        for (auto &v : s) v = static_cast<double>(rng.below(12)) / 4.0;  // plenty of ties
        for (auto &v : l) v = static_cast<int>(rng.below(2));
        l[0] = 0;
        l[1] = 1;
        EXPECT_EQ(roc_auc(s, l), brute_auc(s, l)) << "instance " << inst;
    }
}

TEST(RocAuc, MonotoneInvarianceAndComplement) {
    CounterRng rng(5);
    for (int inst = 0; inst < 50; ++inst) {
        std::vector<double> s(30), t(30), neg(30);
        std::vector<int> l(30);
        for (std::size_t i = 0; i < 30; ++i) {
            s[i] = rng.uniform_f64();
            t[i] = std::exp(3 * s[i]) - 7;
            neg[i] = -s[i];
            l[i] = static_cast<int>(rng.below(2));
        }
        l[0] = 0;
        l[1] = 1;
        EXPECT_EQ(roc_auc(s, l), roc_auc(t, l));
        EXPECT_NEAR(roc_auc(s, l) + roc_auc(neg, l), 1.0, 1e-12);
    }
}

TEST(MeanAuc, Examples) {
    EXPECT_EQ(mean_auc({1.0, 0.5}).value, 0.75);
    EXPECT_EQ(mean_auc({0.9}).value, 0.9);
    EXPECT_NEAR(mean_auc(std::vector<std::optional<double>>(14, 0.8)).value, 0.8, 1e-15);
    auto r = mean_auc({0.6, std::nullopt, 1.0});
    EXPECT_DOUBLE_EQ(r.value, 0.8);
    EXPECT_EQ(r.undefined, std::vector<std::size_t>{1});
    EXPECT_THROW(mean_auc({std::nullopt}), UndefinedMetricError);
}

TEST(Counts, AccuracyAndSensitivity) {
    ConfusionCounts c{3, 5, 1, 1};
    EXPECT_DOUBLE_EQ(accuracy(c), 0.8);
    EXPECT_DOUBLE_EQ(sensitivity(ConfusionCounts{9, 0, 0, 1}), 0.9);
    ConfusionCounts perfect{4, 6, 0, 0};
    EXPECT_EQ(accuracy(perfect), 1.0);
    EXPECT_EQ(sensitivity(perfect), 1.0);
    EXPECT_THROW(accuracy(ConfusionCounts{}), UndefinedMetricError);
    EXPECT_THROW(sensitivity(ConfusionCounts{0, 3, 1, 0}), UndefinedMetricError);
}

TEST(Counts, AccuracyMatchesDirectCounting) {
    CounterRng rng(2);
    for (int inst = 0; inst < 100; ++inst) {
        std::vector<int> p(40), t(40);
        int agree = 0;
        for (std::size_t i = 0; i < 40; ++i) {
            p[i] = static_cast<int>(rng.below(2));
            t[i] = static_cast<int>(rng.below(2));
            agree += p[i] == t[i];
        }
        const auto c = confusion(p, t);
        EXPECT_EQ(c.total(), 40);
        EXPECT_EQ(accuracy(c), agree / 40.0);
    }
}

BinaryMask from_list(std::int64_t h, std::int64_t w, std::initializer_list<int> on) {
    BinaryMask m(h, w);
    for (int i : on) m.values[static_cast<std::size_t>(i)] = 1;
    return m;
}

TEST(Overlap, Examples) {
    auto a = from_list(3, 3, {0, 1, 3, 4});
    EXPECT_EQ(dice(a, a), 1.0);
    EXPECT_EQ(jaccard(a, a), 1.0);
    auto b = from_list(3, 3, {8});
    EXPECT_EQ(dice(a, b), 0.0);
    auto c = from_list(3, 3, {1, 4, 2, 5});
    EXPECT_DOUBLE_EQ(dice(a, c), 0.5);
    EXPECT_DOUBLE_EQ(jaccard(a, c), 1.0 / 3.0);
    EXPECT_EQ(dice(BinaryMask(2, 2), BinaryMask(2, 2)), 1.0);
    EXPECT_EQ(dice(BinaryMask(2, 2), from_list(2, 2, {1})), 0.0);  // all-background prediction
    EXPECT_THROW(dice(a, BinaryMask(2, 3)), ShapeError);
}

TEST(Overlap, DiceJaccardIdentityAndSymmetry) {
    CounterRng rng(3);
    for (int inst = 0; inst < 1000; ++inst) {
        BinaryMask s(8, 9), g(8, 9);
        const double ps = rng.uniform_f64(), pg = rng.uniform_f64();
        for (auto &v : s.values) v = rng.uniform_f64() < ps;
        for (auto &v : g.values) v = rng.uniform_f64() < pg;
        const double d = dice(s, g), j = jaccard(s, g);
        EXPECT_NEAR(d, 2 * j / (1 + j), 1e-12);
        EXPECT_EQ(d, dice(g, s));
        EXPECT_EQ(j, jaccard(g, s));
    }
}

TEST(BoxIou, Examples) {
    Box a{0, 0, 10, 10}, b{5, 5, 15, 15}, c{20, 20, 30, 30};
    EXPECT_EQ(box_iou(a, a), 1.0);
    EXPECT_EQ(box_iou(a, c), 0.0);
    EXPECT_DOUBLE_EQ(box_iou(a, b), 1.0 / 7.0);
}

TEST(ThresholdGrid, DefaultHasElevenPointsInRange) {
    auto t = threshold_grid();
    ASSERT_EQ(t.size(), 11u);
    EXPECT_EQ(t.front(), 0.1);
    EXPECT_EQ(t.back(), 0.6);
    EXPECT_NEAR(t[1], 0.15, 1e-15);
}

TEST(Components, LargestComponentBox) {
    Tensor cam(Shape{5, 6});
    cam.at(0, 0) = 1;  // single pixel
    for (int i = 2; i < 5; ++i)
        for (int j = 3; j < 5; ++j) cam.at(i, j) = 0.8f;
    cam.at(1, 1) = 0.9f;
    cam.at(2, 1) = 0.9f;  // 4-connected pair; diagonal to nothing else
    auto b = largest_component_box(cam, 0.5);
    ASSERT_TRUE(b);
    EXPECT_EQ(*b, (Box{3, 2, 5, 5}));
    EXPECT_FALSE(largest_component_box(cam, 1.5));
    Tensor diag(Shape{3, 3});
    diag.at(0, 0) = diag.at(1, 1) = diag.at(2, 2) = 1;
    EXPECT_EQ(*largest_component_box(diag, 0.5), (Box{0, 0, 1, 1}));
}

Tensor box_indicator(std::int64_t h, std::int64_t w, const Box &b, float scale = 1.0f) {
    Tensor t(Shape{h, w});
    for (auto i = static_cast<std::int64_t>(b.y0); i < b.y1; ++i)
        for (auto j = static_cast<std::int64_t>(b.x0); j < b.x1; ++j) t.at(i, j) = scale;
    return t;
}

TEST(CamLocalize, IndicatorCamIsPerfect) {
    std::vector<Tensor> cams;
    std::vector<Box> boxes;
    CounterRng rng(4);
    for (int s = 0; s < 6; ++s) {
        const double x0 = static_cast<double>(rng.below(10)), y0 = static_cast<double>(rng.below(10));
        boxes.push_back({x0, y0, x0 + 4 + static_cast<double>(rng.below(5)), y0 + 3 + static_cast<double>(rng.below(5))});
        cams.push_back(box_indicator(24, 24, boxes.back(), 0.5f + static_cast<float>(s)));
    }
    auto r = cam_localize(cams, boxes, threshold_grid());
    for (double v : r.mean_iou) EXPECT_EQ(v, 1.0);
    EXPECT_EQ(r.ap25, 1.0);
    EXPECT_EQ(r.ap50, 1.0);
    EXPECT_EQ(r.pointing, 1.0);
}

TEST(CamLocalize, UniformCamCoversImage) {
    Box gt{2, 2, 6, 10};
    auto r = cam_localize({Tensor(Shape{16, 16}, 0.3f)}, {gt}, {0.1, 0.6});
    EXPECT_DOUBLE_EQ(r.mean_iou[0], gt.area() / 256.0);
    EXPECT_DOUBLE_EQ(r.mean_iou[1], gt.area() / 256.0);
}

TEST(CamLocalize, AffineRescalingInvariance) {
    CounterRng rng(8);
    std::vector<Tensor> cams, scaled;
    std::vector<Box> boxes;
    for (int s = 0; s < 8; ++s) {
        Tensor c(Shape{20, 20});
        for (auto &v : c.values()) v = rng.uniform();
        cams.push_back(c);
        Tensor d = c;
        for (auto &v : d.values()) v = 3.0f * v + 2.0f;
        scaled.push_back(d);
        boxes.push_back({2, 3, 12, 15});
    }
    auto a = cam_localize(cams, boxes, threshold_grid());
    auto b = cam_localize(scaled, boxes, threshold_grid());
    EXPECT_EQ(a.mean_iou, b.mean_iou);
    EXPECT_EQ(a.pointing, b.pointing);
    EXPECT_EQ(a.best_t, b.best_t);
}

TEST(CamLocalize, ApRanksByPeak) {
    // Two samples: the confident one misses, the weak one hits.
    Box gt{0, 0, 4, 4};
    auto hit = box_indicator(16, 16, gt, 1.0f);
    auto miss = box_indicator(16, 16, Box{10, 10, 14, 14}, 5.0f);
    auto r = cam_localize({miss, hit}, {gt, gt}, {0.5});
    EXPECT_DOUBLE_EQ(r.ap50, 0.25);  // precision 1/2 at recall 1/2
    auto r2 = cam_localize({hit, box_indicator(16, 16, Box{10, 10, 14, 14}, 0.5f)}, {gt, gt}, {0.5});
    EXPECT_DOUBLE_EQ(r2.ap50, 0.5);
    EXPECT_DOUBLE_EQ(r2.pointing, 0.5);
}

TEST(CamLocalize, CsvHasConfiguredGridPoints) {
    auto r = cam_localize({box_indicator(16, 16, Box{1, 1, 5, 5})}, {Box{1, 1, 5, 5}}, threshold_grid(0.1, 0.6, 6));
    auto path = std::filesystem::temp_directory_path() / "evax_loc.csv";
    write_localization_csv(r, path);
    std::ifstream in(path);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    ASSERT_EQ(lines.size(), 1u + 6u + 4u);
    EXPECT_EQ(lines[0], "threshold,mean_iou");
    EXPECT_EQ(lines[1], "0.1,1");
    EXPECT_EQ(lines[6], "0.6,1");
    EXPECT_EQ(lines[7].rfind("ap25,", 0), 0u);
    EXPECT_EQ(lines[10].rfind("best_t,", 0), 0u);
    EXPECT_THROW(cam_localize({Tensor(Shape{4, 4})}, {Box{}}, {0.7}), ConfigError);
}

}  // namespace
}  // namespace evax
