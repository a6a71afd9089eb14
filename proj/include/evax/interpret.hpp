#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>

#include "evax/dataset.hpp"
#include "evax/image.hpp"
#include "evax/metrics.hpp"
#include "evax/vit.hpp"

namespace evax {

struct Heatmap {
    Tensor grid;        // [gh, gw] raw values
    Tensor normalized;  // [H, W] in [0, 1]
    bool constant = false;
};

// Bilinear (align corners) upsample of a [gh, gw] grid to [H, W].
Tensor upsample_grid(const Tensor &grid, std::int64_t height, std::int64_t width);

// Bilinear (align corners) upsample of the grid to [H, W], then min-max to
// [0, 1]. A constant grid gives an all-zero map with `constant` set.
Heatmap make_heatmap(const Tensor &grid, std::int64_t height, std::int64_t width);

// Grad-CAM over the image tokens of `hooked`: channel weights are the grid
// mean of d logit / d A, the map is ReLU(sum_c w_c A_c). `logit` maps the
// hooked tokens (as a fresh leaf) to the scalar target logit.
Tensor grad_cam_grid(const TokenSequence<float> &hooked,
                     const std::function<VarF(const TokenSequence<float> &)> &logit);

// Hooks the output of block `block` (-1 for the last) of a classifier with
// head.* parameters.
Heatmap grad_cam(const ViTConfig &cfg, const Weights<float> &w, const Tensor &image, std::int64_t target_class,
                 std::int64_t block = -1);

// Head-averaged post-softmax attention of the token containing pixel (x, y)
// over the image-token keys of block `block`.
Heatmap attention_query_map(const ViTConfig &cfg, const Weights<float> &w, const Tensor &image, std::int64_t x,
                            std::int64_t y, std::int64_t block);

struct CamRun {
    std::vector<std::size_t> rows;  // manifest rows with a GT box
    std::vector<Heatmap> heatmaps;
    std::vector<Box> boxes;         // in the model's input frame
    LocalizationResult result;
};

// Grad-CAM of `target_class` on every row of `split` that carries a box, in
// the classifier's input frame, scored with cam_localize.
CamRun localize(const std::filesystem::path &ckpt, const std::filesystem::path &manifest, Split split,
                std::int64_t target_class, const std::vector<double> &thresholds, std::int64_t block = -1);

// RGB colour for v in [0, 1]: (255 v, 0, 255 (1 - v)).
std::array<std::uint8_t, 3> heat_color(float v);

// Gray base blended with the colormap: (1 - alpha) base + alpha colour.
std::vector<std::uint8_t> blend_heatmap(const Heatmap &heatmap, const Image &base, double alpha);
void render_heatmap(const Heatmap &heatmap, const Image &base, const std::filesystem::path &out_path, double alpha);

}  // namespace evax
