#include "evax/interpret.hpp"

#include <algorithm>
#include <cmath>

#include "evax/transfer.hpp"

namespace evax {

namespace {

std::int64_t resolve_block(const ViTConfig &cfg, std::int64_t block) {
    if (block == -1 && cfg.depth > 0) return cfg.depth - 1;
    if (block < 0 || block >= cfg.depth) {
        throw ConfigError("block", "block index " + std::to_string(block) + " outside [0, " +
                                       std::to_string(cfg.depth) + ")");
    }
    return block;
}

}  // namespace

Tensor upsample_grid(const Tensor &grid, std::int64_t height, std::int64_t width) {
    if (grid.rank() != 2) throw ShapeError("upsample_grid: grid must be 2-D, got " + shape_str(grid.shape()));
    OpAttrs at;
    at.out_h = height;
    at.out_w = width;
    Tensor up = primitive_forward<float>(OpId::bilinear_resize_2d,
                                         TensorList<float>({grid.reshaped(Shape{1, grid.dim(0), grid.dim(1)})}), at);
    return up.reshaped(Shape{height, width});
}

Heatmap make_heatmap(const Tensor &grid, std::int64_t height, std::int64_t width) {
    Heatmap h;
    h.grid = grid;
    const Tensor up = upsample_grid(grid, height, width);
    const auto [lo, hi] = std::minmax_element(up.values().begin(), up.values().end());
    const float mn = *lo, mx = *hi;
    h.normalized = Tensor(Shape{height, width});
    if (!(mx > mn)) {
        h.constant = true;
        return h;
    }
    for (std::int64_t i = 0; i < up.numel(); ++i) h.normalized[i] = (up[i] - mn) / (mx - mn);
    return h;
}

Tensor grad_cam_grid(const TokenSequence<float> &hooked,
                     const std::function<VarF(const TokenSequence<float> &)> &logit) {
    TokenSequence<float> leaf = hooked;
    leaf.tokens = variable(hooked.tokens.value());
    auto target = logit(leaf);
    if (target.value().numel() != 1) throw ShapeError("grad_cam: target logit must be a scalar");
    backward(target);
    const Tensor &a = leaf.tokens.value();
    const Tensor g = leaf.tokens.grad();
    const auto p = leaf.prefix(), n = leaf.image_tokens(), d = a.dim(1);
    std::vector<double> wc(static_cast<std::size_t>(d));
    for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t c = 0; c < d; ++c) wc[static_cast<std::size_t>(c)] += g.at(p + t, c);
    for (auto &v : wc) v /= static_cast<double>(n);
    Tensor cam(Shape{leaf.grid_h, leaf.grid_w});
    for (std::int64_t t = 0; t < n; ++t) {
        double s = 0;
        for (std::int64_t c = 0; c < d; ++c) s += wc[static_cast<std::size_t>(c)] * a.at(p + t, c);
        const auto cell = leaf.positions.empty() ? t : leaf.positions[static_cast<std::size_t>(t)];
        cam[cell] = static_cast<float>(std::max(s, 0.0));
    }
    return cam;
}

Heatmap grad_cam(const ViTConfig &cfg, const Weights<float> &w, const Tensor &image, std::int64_t target_class,
                 std::int64_t block) {
    const auto hook = resolve_block(cfg, block);
    const auto k = w("head.bias").value().numel();
    if (target_class < 0 || target_class >= k) {
        throw ConfigError("target_class", "class " + std::to_string(target_class) + " outside [0, " +
                                              std::to_string(k) + ")");
    }
    auto cur = patchify(cfg, w, image);
    for (std::int64_t i = 0; i <= hook; ++i) cur = block_forward(cfg, w, i, cur);
    auto grid = grad_cam_grid(cur, [&](const TokenSequence<float> &a) {
        auto x = a;
        for (std::int64_t i = hook + 1; i < cfg.depth; ++i) x = block_forward(cfg, w, i, x);
        return slice(cls_logits_from_tokens(w, x), 0, target_class, target_class + 1);
    });
    return make_heatmap(grid, image.dim(0), image.dim(1));
}

Heatmap attention_query_map(const ViTConfig &cfg, const Weights<float> &w, const Tensor &image, std::int64_t x,
                            std::int64_t y, std::int64_t block) {
    if (x < 0 || y < 0 || x >= image.dim(1) || y >= image.dim(0)) {
        throw ConfigError("ref_point", "point (" + std::to_string(x) + ", " + std::to_string(y) +
                                           ") outside the " + std::to_string(image.dim(1)) + "x" +
                                           std::to_string(image.dim(0)) + " image");
    }
    const auto b = resolve_block(cfg, block);
    auto cur = patchify(cfg, w, image);
    Tensor attn;
    for (std::int64_t i = 0; i <= b; ++i) cur = block_forward(cfg, w, i, cur, i == b ? &attn : nullptr);
    const auto p = cur.prefix(), gh = cur.grid_h, gw = cur.grid_w, heads = attn.dim(0);
    const auto query = p + (y / cfg.patch_size) * gw + x / cfg.patch_size;
    Tensor grid(Shape{gh, gw});
    for (std::int64_t t = 0; t < gh * gw; ++t) {
        double s = 0;
        for (std::int64_t h = 0; h < heads; ++h) s += attn.at(h, query, p + t);
        grid[t] = static_cast<float>(s / static_cast<double>(heads));
    }
    return make_heatmap(grid, image.dim(0), image.dim(1));
}

CamRun localize(const std::filesystem::path &ckpt, const std::filesystem::path &manifest, Split split,
                std::int64_t target_class, const std::vector<double> &thresholds, std::int64_t block) {
    const auto c = load_classifier(ckpt);
    const auto m = load_manifest(manifest);
    Weights<float> w;
    bind<float>(w, c.params, [](const Param &) { return false; });
    const ImageCache cache(m, c.config.image_size);
    AugmentConfig aug;
    aug.crop_size = c.config.image_size;
    aug.mean = c.mean;
    aug.std = c.std;
    CamRun run;
    std::vector<Tensor> raw;
    for (const auto row : m.indices(split)) {
        const auto &r = m.rows[row];
        if (!r.box) continue;
        auto h = grad_cam(c.config, w, eval_view(cache.image(row), aug), target_class, block);
        raw.push_back(upsample_grid(h.grid, c.config.image_size, c.config.image_size));
        const double sx = cache.scale_x(row), sy = cache.scale_y(row);
        run.boxes.push_back({r.box->x0 * sx, r.box->y0 * sy, r.box->x1 * sx, r.box->y1 * sy});
        run.rows.push_back(row);
        run.heatmaps.push_back(std::move(h));
    }
    if (run.rows.empty()) throw DataError(manifest.string() + ": no rows with a box in the " + split_name(split) + " split");
    run.result = cam_localize(raw, run.boxes, thresholds);
    return run;
}

std::array<std::uint8_t, 3> heat_color(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return {static_cast<std::uint8_t>(std::lround(255.0f * c)), 0,
            static_cast<std::uint8_t>(std::lround(255.0f * (1.0f - c)))};
}

std::vector<std::uint8_t> blend_heatmap(const Heatmap &heatmap, const Image &base, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha", "opacity must lie in [0, 1]");
    if (heatmap.normalized.dim(0) != base.height || heatmap.normalized.dim(1) != base.width) {
        throw ShapeError("render_heatmap: heatmap " + shape_str(heatmap.normalized.shape()) + " does not match a " +
                         std::to_string(base.height) + "x" + std::to_string(base.width) + " image");
    }
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(base.height * base.width * 3));
    for (std::int64_t i = 0; i < base.height * base.width; ++i) {
        const double g = 255.0 * std::clamp(base.pixels[static_cast<std::size_t>(i)], 0.0f, 1.0f);
        const auto col = heat_color(heatmap.normalized[i]);
        for (int c = 0; c < 3; ++c) {
            rgb[static_cast<std::size_t>(i * 3 + c)] =
                static_cast<std::uint8_t>(std::lround((1.0 - alpha) * g + alpha * col[static_cast<std::size_t>(c)]));
        }
    }
    return rgb;
}

void render_heatmap(const Heatmap &heatmap, const Image &base, const std::filesystem::path &out_path, double alpha) {
    write_png_rgb(base.height, base.width, blend_heatmap(heatmap, base, alpha), out_path);
}

}  // namespace evax
