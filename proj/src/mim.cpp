#include "evax/mim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "evax/parallel.hpp"

namespace evax {

namespace fs = std::filesystem;

MaskPlan sample_mask(std::int64_t n, double ratio, CounterRng &rng) {
    if (n < 1) throw ConfigError("mask_ratio", "sample_mask: need at least one image token");
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw ConfigError("mask_ratio", "mask_ratio must lie in (0, 1), got " + std::to_string(ratio));
    }
    const auto k = static_cast<std::int64_t>(std::floor(static_cast<double>(n) * ratio));
    if (k == 0) {
        throw ConfigError("mask_ratio", "mask_ratio " + std::to_string(ratio) + " masks no tokens out of " +
                                            std::to_string(n));
    }
    auto perm = permutation(n, rng);
    MaskPlan plan;
    plan.ratio = ratio;
    plan.mask_list.assign(perm.begin(), perm.begin() + k);
    std::sort(plan.mask_list.begin(), plan.mask_list.end());
    return plan;
}

template <typename T>
TokenSequence<T> apply_mask(const TokenSequence<T> &tokens, const MaskPlan &plan, const Var<T> &mask_token,
                            const Var<T> &pos_embed) {
    if (plan.mask_list.empty()) return tokens;
    std::vector<std::int64_t> rows;
    rows.reserve(plan.mask_list.size());
    for (auto i : plan.mask_list) {
        if (i < 0 || i >= tokens.image_tokens()) {
            throw ShapeError("apply_mask: index " + std::to_string(i) + " outside " +
                             std::to_string(tokens.image_tokens()) + " image tokens");
        }
        rows.push_back(tokens.prefix() + i);
    }
    auto fill = add(gather_rows(pos_embed, rows), mask_token);
    auto out = tokens;
    out.tokens = scatter_rows(tokens.tokens, fill, rows);
    return out;
}

Tokenizer make_random_tokenizer(const ViTConfig &cfg, std::uint64_t seed) {
    Tokenizer t;
    build_vit(t.model, cfg, seed);
    t.source = "random";
    return t;
}

void save_tokenizer(const Tokenizer &tok, const fs::path &path) {
    save_checkpoint(model_checkpoint(tok.model.config, tok.model.params, {{"kind", "tokenizer"}, {"source", tok.source}}),
                    path);
}

Tokenizer load_tokenizer(const fs::path &path) {
    if (!fs::exists(path)) throw ConfigError("tokenizer_ckpt", "tokenizer checkpoint not found: " + path.string());
    const auto ck = load_checkpoint(path);
    Tokenizer t;
    const auto cfg = checkpoint_vit_config(ck);
    build_vit(t.model, cfg, 0);
    load_params(ck, t.model.params);
    t.source = ck.metadata.value("source", std::string("random"));
    return t;
}

template <typename T>
BasicTensor<T> tokenize_targets(const Tokenizer &tok, const ViTConfig &student, const BasicTensor<T> &image) {
    const auto &tc = tok.model.config;
    if (tc.grid() != student.grid() || tc.patch_size != student.patch_size || tc.image_size != student.image_size) {
        throw ShapeError("tokenizer grid " + std::to_string(tc.grid()) + "x" + std::to_string(tc.grid()) +
                         " does not match student grid " + std::to_string(student.grid()) + "x" +
                         std::to_string(student.grid()));
    }
    Weights<T> w;
    bind<T>(w, tok.model.params, nullptr);
    return forward_features(tc, w, patchify(tc, w, image)).out.tokens.value();
}

void add_projection_head(ParamSet &params, std::int64_t d, std::int64_t d_tgt, std::uint64_t seed) {
    CounterRng rng = CounterRng(seed, CounterRng::Stream::init).fork(0x4EAD);
    Tensor wt(Shape{d, d_tgt});
    for (auto &v : wt.values()) v = rng.truncated_normal(0.02f);
    params.add("mim_head.weight", std::move(wt), true);
    params.add("mim_head.bias", Tensor(Shape{d_tgt}), false);
}

template <typename T>
Var<T> mim_loss(const TokenSequence<T> &student_out, const BasicTensor<T> &targets, const MaskPlan &plan,
                const Weights<T> &w) {
    if (plan.mask_list.empty()) throw ShapeError("mim_loss: empty mask plan");
    if (targets.rank() != 2) throw ShapeError("mim_loss: targets must be [L, d], got " + shape_str(targets.shape()));
    const auto tgt_prefix = targets.dim(0) - student_out.image_tokens();
    if (tgt_prefix < 0 || tgt_prefix > 1) {
        throw ShapeError("mim_loss: target sequence " + shape_str(targets.shape()) + " does not match " +
                         std::to_string(student_out.image_tokens()) + " student image tokens");
    }
    std::vector<std::int64_t> s_rows, t_rows;
    for (auto i : plan.mask_list) {
        s_rows.push_back(student_out.prefix() + i);
        t_rows.push_back(tgt_prefix + i);
    }
    auto pred = linear(gather_rows(student_out.tokens, s_rows), w("mim_head.weight"), w("mim_head.bias"));
    auto tgt = gather_rows(constant(targets), t_rows);
    return cosine_loss(pred, tgt);
}

std::int64_t PretrainConfig::resolved_epochs() const {
    if (epochs > 0) return epochs;
    return preset == "ti" ? 900 : 600;
}

void PretrainConfig::validate() const {
    if (!(mask_ratio > 0 && mask_ratio < 1)) throw ConfigError("mask_ratio", "mask_ratio must lie in (0, 1)");
    if (!(crop_scale_min > 0 && crop_scale_min <= 1)) throw ConfigError("crop_scale_min", "crop_scale_min must lie in (0, 1]");
    if (!(hflip_prob >= 0 && hflip_prob <= 1)) throw ConfigError("hflip_prob", "hflip_prob must lie in [0, 1]");
    if (!(base_lr > 0)) throw ConfigError("base_lr", "base_lr must be positive");
    if (!(min_lr >= 0 && min_lr <= base_lr)) throw ConfigError("min_lr", "min_lr must lie in [0, base_lr]");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay", "weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1", "beta1 must lie in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2", "beta2 must lie in [0, 1)");
    if (!(data_fraction > 0 && data_fraction <= 1)) throw ConfigError("data_fraction", "data_fraction must lie in (0, 1]");
    if (epochs < 0) throw ConfigError("epochs", "epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size", "batch_size must be >= 1");
    if (manifest.empty()) throw ConfigError("manifest", "manifest is required");
    if (tokenizer_ckpt.empty()) throw ConfigError("tokenizer_ckpt", "tokenizer_ckpt is required");
}

void write_loss_csv(const std::vector<LossPoint> &curve, const fs::path &path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "step,lr,loss\n";
    char buf[96];
    for (const auto &p : curve) {
        std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g\n", static_cast<long long>(p.step), p.lr, p.loss);
        out << buf;
    }
}

PretrainResult pretrain_run(const PretrainConfig &cfg, const fs::path &run_dir) {
    cfg.validate();
    auto student_cfg = vit_preset(cfg.preset, cfg.image_size);
    const Tokenizer tok = load_tokenizer(cfg.tokenizer_ckpt);
    const auto &tc = tok.model.config;
    if (tc.patch_size != student_cfg.patch_size || tc.image_size != student_cfg.image_size) {
        throw ConfigError("tokenizer_ckpt", "tokenizer grid " + std::to_string(tc.grid()) + "x" + std::to_string(tc.grid()) +
                                                " does not match student grid " + std::to_string(student_cfg.grid()) +
                                                "x" + std::to_string(student_cfg.grid()));
    }

    auto manifest = subsample(load_manifest(cfg.manifest), cfg.data_fraction, cfg.seed);
    const auto rows = manifest.indices(Split::train);
    if (rows.empty()) throw DataError("pretrain: manifest has no train rows");
    const auto stats = corpus_stats(manifest);
    const ImageCache cache(manifest, cfg.image_size);

    AugmentConfig aug;
    aug.crop_scale_min = cfg.crop_scale_min;
    aug.hflip_prob = cfg.hflip_prob;
    aug.crop_size = cfg.image_size;
    aug.mean = stats.mean;
    aug.std = stats.std;
    aug.validate();

    ViTModel student;
    build_vit(student, student_cfg, cfg.seed);
    add_projection_head(student.params, student_cfg.embed_dim, tc.embed_dim, cfg.seed);
    std::vector<ParamGroup> groups(1);
    groups[0].name = "all";
    groups[0].params = student.params.all();
    AdamWConfig opt;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.weight_decay = cfg.weight_decay;
    AdamWState state;

    const auto epochs = cfg.resolved_epochs();
    const auto n_rows = static_cast<std::int64_t>(rows.size());
    const auto per_epoch = (n_rows + cfg.batch_size - 1) / cfg.batch_size;
    const auto total = epochs * per_epoch;
    const auto n_tokens = student_cfg.num_patches();
    const CounterRng mask_root(cfg.seed, CounterRng::Stream::mask);

    PretrainResult result;
    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
        const auto order = epoch_order(rows, cfg.seed, epoch);
        for (std::int64_t b0 = 0; b0 < n_rows; b0 += cfg.batch_size, ++step) {
            const auto bsz = std::min(cfg.batch_size, n_rows - b0);
            std::vector<Tensor> views(static_cast<std::size_t>(bsz)), targets(static_cast<std::size_t>(bsz));
            parallel_for(bsz, [&](std::int64_t i) {
                const auto row = order[static_cast<std::size_t>(b0 + i)];
                views[i] = train_view(cache.image(row), aug, cfg.seed, epoch, row);
                targets[i] = tokenize_targets(tok, student_cfg, views[i]);
            });

            Weights<float> w;
            bind<float>(w, student.params, [](const Param &) { return true; });
            double loss_sum = 0;
            for (std::int64_t i = 0; i < bsz; ++i) {
                CounterRng mrng = mask_root.fork(static_cast<std::uint64_t>(step)).fork(static_cast<std::uint64_t>(i));
                const auto plan = sample_mask(n_tokens, cfg.mask_ratio, mrng);
                auto seq = patchify(student_cfg, w, views[i]);
                seq = apply_mask(seq, plan, w("mask_token"), w("pos_embed"));
                auto out = forward_features(student_cfg, w, seq).out;
                auto loss = mim_loss(out, targets[i], plan, w);
                const double lv = loss.value().item();
                if (!std::isfinite(lv)) {
                    throw NumericalError("pretrain: non-finite loss at step " + std::to_string(step) + " (epoch " +
                                         std::to_string(epoch) + ", row " +
                                         std::to_string(order[static_cast<std::size_t>(b0 + i)]) + ")");
                }
                loss_sum += lv;
                backward(scale(loss, 1.0 / static_cast<double>(bsz)));
            }
            zero_grads(groups);
            w.accumulate_grads(student.params);
            const double lr = total > 1 ? cosine_lr(step, total - 1, cfg.base_lr, cfg.min_lr) : cfg.base_lr;
            adamw_step(groups, state, lr, opt);
            result.curve.push_back({step, lr, loss_sum / static_cast<double>(bsz)});
        }
    }

    fs::create_directories(run_dir / "checkpoints");
    fs::create_directories(run_dir / "reports");
    result.checkpoint = run_dir / "checkpoints" / "pretrain.ckpt";
    nlohmann::json meta = {{"kind", "pretrain"},
                           {"mean", stats.mean},
                           {"std", stats.std},
                           {"steps", total},
                           {"seed", cfg.seed},
                           {"tokenizer_source", tok.source},
                           {"final_loss", result.curve.empty() ? 0.0 : result.curve.back().loss}};
    save_checkpoint(model_checkpoint(student_cfg, student.params, meta), result.checkpoint);
    write_loss_csv(result.curve, run_dir / "reports" / "loss.csv");
    return result;
}

#define EVAX_INSTANTIATE_MIM(T)                                                                                   \
    template TokenSequence<T> apply_mask(const TokenSequence<T> &, const MaskPlan &, const Var<T> &,               \
                                         const Var<T> &);                                                         \
    template BasicTensor<T> tokenize_targets(const Tokenizer &, const ViTConfig &, const BasicTensor<T> &);        \
    template Var<T> mim_loss(const TokenSequence<T> &, const BasicTensor<T> &, const MaskPlan &, const Weights<T> &);

EVAX_INSTANTIATE_MIM(float)
EVAX_INSTANTIATE_MIM(double)

}  // namespace evax
