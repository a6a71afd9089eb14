#include "evax/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "evax/parallel.hpp"

namespace evax {

namespace fs = std::filesystem;

ClsTask parse_cls_task(const std::string &s) {
    if (s == "multi-label") return ClsTask::multi_label;
    if (s == "single-label") return ClsTask::single_label;
    throw ConfigError("task", "unknown classification task '" + s + "' (expected multi-label or single-label)");
}

const char *cls_task_name(ClsTask t) { return t == ClsTask::multi_label ? "multi-label" : "single-label"; }

void add_cls_head(ParamSet &params, std::int64_t d, std::int64_t num_classes, std::uint64_t seed) {
    if (num_classes < 1) throw ConfigError("num_classes", "classification head needs K >= 1");
    CounterRng rng = CounterRng(seed, CounterRng::Stream::init).fork(0xC15);
    Tensor w(Shape{d, num_classes});
    for (auto &v : w.values()) v = rng.truncated_normal(0.02f);
    params.add("head.weight", std::move(w), true);
    params.add("head.bias", Tensor(Shape{num_classes}), false);
}

template <typename T>
Var<T> cls_logits_from_tokens(const Weights<T> &w, const TokenSequence<T> &last_block, double dropout_p,
                              const CounterRng *dropout_rng) {
    TokenSequence<T> normed = last_block;
    normed.tokens = layer_norm(last_block.tokens, w("norm.weight"), w("norm.bias"));
    auto pooled = mean_pool(normed);
    const auto d = pooled.dim(0);
    if (w("head.weight").dim(0) != d) {
        throw ShapeError("cls head expects features of dim " + std::to_string(w("head.weight").dim(0)) + ", got " +
                         std::to_string(d));
    }
    if (dropout_rng && dropout_p > 0) pooled = dropout(pooled, dropout_p, *dropout_rng);
    auto logits = linear(reshape(pooled, Shape{1, d}), w("head.weight"), w("head.bias"));
    return reshape(logits, Shape{logits.dim(1)});
}

template <typename T>
Var<T> cls_forward(const ViTConfig &cfg, const Weights<T> &w, const BasicTensor<T> &image, double dropout_p,
                   const CounterRng *dropout_rng) {
    auto f = forward_features(cfg, w, patchify(cfg, w, image));
    return cls_logits_from_tokens(w, f.last_block, dropout_p, dropout_rng);
}

template <typename T>
Var<T> cls_loss(const Var<T> &logits, const std::vector<int> &labels, ClsTask task, const std::vector<double> &weights) {
    const auto k = logits.value().numel();
    if (static_cast<std::int64_t>(labels.size()) != k) {
        throw DataError("cls_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(k) + " logits");
    }
    for (int l : labels) {
        if (l != 0 && l != 1) {
            throw DataError("cls_loss: label " + std::to_string(l) + " reached the loss; map uncertain labels first");
        }
    }
    if (task == ClsTask::multi_label) {
        BasicTensor<T> targets(Shape{k});
        for (std::int64_t i = 0; i < k; ++i) targets[i] = static_cast<T>(labels[static_cast<std::size_t>(i)]);
        return bce_with_logits(logits, constant(std::move(targets)), weights);
    }
    const auto n_pos = std::count(labels.begin(), labels.end(), 1);
    if (n_pos != 1) throw DataError("cls_loss: single-label targets must be one-hot");
    const auto cls = std::find(labels.begin(), labels.end(), 1) - labels.begin();
    return softmax_cross_entropy(logits, {static_cast<std::int64_t>(cls)});
}

std::vector<ParamGroup> llrd_groups(ParamSet &params, std::int64_t depth, double decay) {
    if (!(decay > 0 && decay <= 1)) throw ConfigError("llrd", "layer decay must lie in (0, 1], got " + std::to_string(decay));
    const auto g_count = depth + 2;
    std::vector<ParamGroup> groups(static_cast<std::size_t>(g_count));
    groups[0].name = "embed";
    for (std::int64_t i = 0; i < depth; ++i) groups[static_cast<std::size_t>(i + 1)].name = "blocks." + std::to_string(i);
    groups.back().name = "head";
    for (std::int64_t g = 0; g < g_count; ++g) {
        double s = 1.0;
        for (std::int64_t k = 0; k < g_count - 1 - g; ++k) s *= decay;
        groups[static_cast<std::size_t>(g)].lr_scale = s;
    }
    for (Param *p : params.all()) {
        const auto &n = p->name;
        std::size_t g = groups.size() - 1;
        if (n.rfind("patch_embed.", 0) == 0 || n == "cls_token" || n == "pos_embed" || n == "mask_token") {
            g = 0;
        } else if (n.rfind("blocks.", 0) == 0) {
            const auto idx = std::stoll(n.substr(7, n.find('.', 7) - 7));
            if (idx < 0 || idx >= depth) throw DataError("llrd_groups: parameter " + n + " outside depth");
            g = static_cast<std::size_t>(idx + 1);
        }
        groups[g].params.push_back(p);
    }
    return groups;
}

nlohmann::json SegDecoderConfig::to_json() const {
    return {{"channels", channels}, {"num_classes", num_classes}, {"bins", bins}};
}

SegDecoderConfig SegDecoderConfig::from_json(const nlohmann::json &j) {
    SegDecoderConfig c;
    try {
        c.channels = j.at("channels").get<std::int64_t>();
        c.num_classes = j.at("num_classes").get<std::int64_t>();
        c.bins = j.at("bins").get<std::vector<std::int64_t>>();
    } catch (const nlohmann::json::exception &e) {
        throw DataError(std::string("malformed seg decoder config: ") + e.what());
    }
    return c;
}

namespace {

// He-normal weights; `out` is the bias length (dim 0 for conv, dim 1 for deconv).
void add_conv(ParamSet &ps, const std::string &name, Shape shape, std::int64_t fan_in, std::int64_t out, CounterRng &rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    Tensor w(shape);
    for (auto &v : w.values()) v = static_cast<float>(std * rng.normal());
    ps.add(name + ".weight", std::move(w), true);
    ps.add(name + ".bias", Tensor(Shape{out}), false);
}

}  // namespace

void add_seg_decoder(ParamSet &params, std::int64_t d, const SegDecoderConfig &cfg, std::uint64_t seed) {
    if (cfg.channels < 1) throw ConfigError("channels", "decoder channels must be >= 1");
    if (cfg.num_classes < 2) throw ConfigError("num_classes", "segmentation needs at least 2 classes");
    CounterRng rng = CounterRng(seed, CounterRng::Stream::init).fork(0x5E6);
    const auto c = cfg.channels;
    add_conv(params, "seg.fpn1.0", {d, d, 2, 2}, d * 4, d, rng);
    add_conv(params, "seg.fpn1.1", {d, d, 2, 2}, d * 4, d, rng);
    add_conv(params, "seg.fpn2.0", {d, d, 2, 2}, d * 4, d, rng);
    for (std::size_t i = 0; i < cfg.bins.size(); ++i) add_conv(params, "seg.ppm." + std::to_string(i), {c, d, 1, 1}, d, c, rng);
    const auto cat = d + static_cast<std::int64_t>(cfg.bins.size()) * c;
    add_conv(params, "seg.bottleneck", {c, cat, 3, 3}, cat * 9, c, rng);
    for (int i = 0; i < 3; ++i) add_conv(params, "seg.lateral." + std::to_string(i), {c, d, 1, 1}, d, c, rng);
    for (int i = 0; i < 3; ++i) add_conv(params, "seg.fpn_out." + std::to_string(i), {c, c, 3, 3}, c * 9, c, rng);
    add_conv(params, "seg.cls", {cfg.num_classes, 4 * c, 1, 1}, 4 * c, cfg.num_classes, rng);
}

template <typename T>
std::array<Var<T>, 4> build_pyramid(const TokenSequence<T> &features, const Weights<T> &w) {
    if (features.grid_h != features.grid_w) {
        throw ShapeError("build_pyramid: grid " + std::to_string(features.grid_h) + "x" + std::to_string(features.grid_w) +
                         " is not square");
    }
    const auto g = features.grid_h;
    auto img = features.prefix() > 0 ? slice(features.tokens, 0, features.prefix(), features.tokens.dim(0)) : features.tokens;
    const auto d = img.dim(1);
    auto map = reshape(transpose(img), Shape{d, g, g});
    auto up1 = conv_transpose2d(map, w("seg.fpn1.0.weight"), w("seg.fpn1.0.bias"), 2);
    auto p4 = conv_transpose2d(gelu(up1), w("seg.fpn1.1.weight"), w("seg.fpn1.1.bias"), 2);
    auto p8 = conv_transpose2d(map, w("seg.fpn2.0.weight"), w("seg.fpn2.0.bias"), 2);
    auto p32 = max_pool2d(map);
    return {p4, p8, map, p32};
}

template <typename T>
Var<T> upernet_forward(const std::array<Var<T>, 4> &pyr, const Weights<T> &w, const SegDecoderConfig &cfg,
                       std::int64_t out_h, std::int64_t out_w) {
    auto conv = [&](const Var<T> &x, const std::string &name, int pad) {
        return conv2d(x, w(name + ".weight"), w(name + ".bias"), 1, pad);
    };
    const auto &top = pyr[3];
    const auto th = top.dim(1), tw = top.dim(2);
    std::vector<Var<T>> ppm = {top};
    for (std::size_t i = 0; i < cfg.bins.size(); ++i) {
        auto p = adaptive_avg_pool2d(top, cfg.bins[i], cfg.bins[i]);
        p = relu(conv(p, "seg.ppm." + std::to_string(i), 0));
        ppm.push_back(resize_bilinear(p, th, tw));
    }
    std::array<Var<T>, 4> lat;
    lat[3] = relu(conv(concat(ppm, 0), "seg.bottleneck", 1));
    for (int i = 0; i < 3; ++i) lat[i] = relu(conv(pyr[i], "seg.lateral." + std::to_string(i), 0));
    for (int i = 3; i > 0; --i) {
        lat[i - 1] = add(lat[i - 1], resize_bilinear(lat[i], lat[i - 1].dim(1), lat[i - 1].dim(2)));
    }
    std::vector<Var<T>> outs;
    const auto h0 = lat[0].dim(1), w0 = lat[0].dim(2);
    for (int i = 0; i < 4; ++i) {
        auto o = i < 3 ? relu(conv(lat[i], "seg.fpn_out." + std::to_string(i), 1)) : lat[3];
        outs.push_back(i == 0 ? o : resize_bilinear(o, h0, w0));
    }
    auto logits = conv(concat(outs, 0), "seg.cls", 0);
    return resize_bilinear(logits, out_h, out_w);
}

template <typename T>
Var<T> seg_forward(const ViTConfig &vit, const SegDecoderConfig &dec, const Weights<T> &w, const BasicTensor<T> &image) {
    auto f = forward_features(vit, w, patchify(vit, w, image));
    return upernet_forward(build_pyramid(f.out, w), w, dec, image.dim(0), image.dim(1));
}

BinaryMask predict_mask(const Tensor &logits) {
    const auto c = logits.dim(0), h = logits.dim(1), wd = logits.dim(2);
    BinaryMask m(h, wd);
    for (std::int64_t i = 0; i < h; ++i)
        for (std::int64_t j = 0; j < wd; ++j) {
            std::int64_t best = 0;
            for (std::int64_t k = 1; k < c; ++k)
                if (logits.at(k, i, j) > logits.at(best, i, j)) best = k;
            m.at(i, j) = best > 0 ? 1 : 0;
        }
    return m;
}

void write_metrics_csv(const std::vector<MetricRow> &rows, const fs::path &path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "epoch,split,metric,value\n";
    char buf[64];
    for (const auto &r : rows) {
        std::snprintf(buf, sizeof buf, "%.9g", r.value);
        out << r.epoch << ',' << r.split << ',' << r.metric << ',' << buf << '\n';
    }
}

namespace {

using Snapshot = std::map<std::string, Tensor>;

Snapshot snapshot(const ParamSet &ps) {
    Snapshot s;
    for (const Param *p : ps.all()) s[p->name] = p->value;
    return s;
}

void restore(ParamSet &ps, const Snapshot &s) {
    for (Param *p : ps.all()) p->value = s.at(p->name);
}

// Backbone from a checkpoint (resized to image_size) or freshly initialized.
ViTModel init_backbone(const fs::path &ckpt, const std::string &preset, std::int64_t image_size, std::uint64_t seed) {
    ViTModel m;
    if (ckpt.empty()) {
        build_vit(m, vit_preset(preset, image_size), seed);
        return m;
    }
    if (!fs::exists(ckpt)) throw ConfigError("ckpt", "checkpoint not found: " + ckpt.string());
    const auto ck = load_checkpoint(ckpt);
    auto cfg = checkpoint_vit_config(ck);
    cfg.image_size = image_size;
    cfg.validate();
    build_vit(m, cfg, seed);
    load_backbone(ck, m);
    return m;
}

struct ClsLabels {
    std::vector<int> labels;
    std::vector<double> weights;
};

ClsLabels row_labels(const ManifestRow &row, ClsTask task, UncertainPolicy policy) {
    ClsLabels out;
    if (task == ClsTask::single_label) {
        for (int l : row.labels) {
            if (l == -1) throw DataError("line " + std::to_string(row.line) + ": uncertain label in a single-label task");
        }
        out.labels = row.labels;
        return out;
    }
    std::vector<float> targets;
    map_uncertain(row.labels, policy, targets, out.weights);
    for (float t : targets) out.labels.push_back(t >= 0.5f ? 1 : 0);
    return out;
}

ClsTask detect_task(const DatasetManifest &m) {
    if (m.label_names.size() < 2) return ClsTask::multi_label;
    for (const auto &r : m.rows) {
        if (std::count(r.labels.begin(), r.labels.end(), 1) != 1 || std::count(r.labels.begin(), r.labels.end(), -1) != 0) {
            return ClsTask::multi_label;
        }
    }
    return ClsTask::single_label;
}

struct ClsSetup {
    ViTConfig cfg;
    ClsTask task;
    std::vector<std::string> label_names;
    double mean = 0, std = 1;
    UncertainPolicy policy = UncertainPolicy::to_one;
};

ClsEval evaluate_cls(const ClsSetup &s, const ParamSet &params, const ImageCache &cache, const DatasetManifest &m,
                     const std::vector<std::size_t> &rows) {
    if (rows.empty()) throw DataError("evaluation split is empty");
    AugmentConfig aug;
    aug.crop_size = s.cfg.image_size;
    aug.mean = s.mean;
    aug.std = s.std;
    const auto k = s.label_names.size();
    std::vector<std::vector<double>> probs(rows.size());
    Weights<float> w;
    bind<float>(w, params, nullptr);
    parallel_for(static_cast<std::int64_t>(rows.size()), [&](std::int64_t i) {
        const auto view = eval_view(cache.image(rows[static_cast<std::size_t>(i)]), aug);
        const auto logits = cls_forward(s.cfg, w, view).value();
        std::vector<double> p(k);
        if (s.task == ClsTask::multi_label) {
            for (std::size_t c = 0; c < k; ++c) p[c] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[c])));
        } else {
            double mx = logits[0], z = 0;
            for (std::size_t c = 1; c < k; ++c) mx = std::max<double>(mx, logits[c]);
            for (std::size_t c = 0; c < k; ++c) z += std::exp(logits[c] - mx);
            for (std::size_t c = 0; c < k; ++c) p[c] = std::exp(logits[c] - mx) / z;
        }
        probs[static_cast<std::size_t>(i)] = std::move(p);
    });

    std::vector<std::vector<int>> labels(rows.size());
    std::vector<std::vector<double>> weights(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto l = row_labels(m.rows[rows[i]], s.task, s.policy);
        labels[i] = std::move(l.labels);
        weights[i] = l.weights.empty() ? std::vector<double>(k, 1.0) : std::move(l.weights);
    }

    ClsEval ev;
    const auto aucs = per_class_auc(probs, labels, weights);
    try {
        ev.mauc = mean_auc(aucs).value;
    } catch (const UndefinedMetricError &) {
    }
    std::vector<int> pred_flat, true_flat;
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (s.task == ClsTask::single_label) {
            const auto arg = std::max_element(probs[i].begin(), probs[i].end()) - probs[i].begin();
            correct += labels[i][static_cast<std::size_t>(arg)] == 1;
        } else {
            for (std::size_t c = 0; c < k; ++c) {
                if (weights[i][c] == 0.0) continue;
                pred_flat.push_back(probs[i][c] >= 0.5 ? 1 : 0);
                true_flat.push_back(labels[i][c]);
            }
        }
    }
    ev.accuracy = s.task == ClsTask::single_label ? static_cast<double>(correct) / static_cast<double>(rows.size())
                                                  : accuracy(confusion(pred_flat, true_flat));
    for (std::size_t c = 0; c < k; ++c) {
        if (aucs[c]) ev.extra.emplace_back("auc_" + s.label_names[c], *aucs[c]);
    }
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<int> p, t;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (weights[i][c] == 0.0) continue;
            const bool predicted = s.task == ClsTask::single_label
                                       ? static_cast<std::size_t>(std::max_element(probs[i].begin(), probs[i].end()) -
                                                                  probs[i].begin()) == c
                                       : probs[i][c] >= 0.5;
            p.push_back(predicted ? 1 : 0);
            t.push_back(labels[i][c]);
        }
        try {
            ev.extra.emplace_back("sensitivity_" + s.label_names[c], sensitivity(confusion(p, t)));
        } catch (const UndefinedMetricError &) {
        }
    }
    return ev;
}

void append_eval(std::vector<MetricRow> &rows, std::int64_t epoch, const std::string &split, const ClsEval &ev) {
    if (ev.mauc) rows.push_back({epoch, split, "mauc", *ev.mauc});
    rows.push_back({epoch, split, "accuracy", ev.accuracy});
}

double selection_score(const ClsEval &ev) { return ev.mauc ? *ev.mauc : ev.accuracy; }

}  // namespace

void FinetuneClsConfig::validate() const {
    if (manifest.empty()) throw ConfigError("manifest", "manifest is required");
    if (task != "auto") parse_cls_task(task);
    if (num_classes < 0) throw ConfigError("num_classes", "num_classes must be >= 0");
    if (epochs < 0) throw ConfigError("epochs", "epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size", "batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError("lr", "lr must be positive");
    if (!(llrd > 0 && llrd <= 1)) throw ConfigError("llrd", "llrd must lie in (0, 1]");
    if (!(dropout >= 0 && dropout < 1)) throw ConfigError("dropout", "dropout must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay", "weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1", "beta1 must lie in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2", "beta2 must lie in [0, 1)");
    if (!(crop_scale_min > 0 && crop_scale_min <= 1)) throw ConfigError("crop_scale_min", "crop_scale_min must lie in (0, 1]");
    if (!(hflip_prob >= 0 && hflip_prob <= 1)) throw ConfigError("hflip_prob", "hflip_prob must lie in [0, 1]");
    if (!(data_fraction > 0 && data_fraction <= 1)) throw ConfigError("data_fraction", "data_fraction must lie in (0, 1]");
    parse_uncertain_policy(uncertain);
}

FinetuneClsConfig FinetuneClsConfig::resolved() const {
    validate();
    const auto full = load_manifest(manifest);
    if (full.task != Task::cls && full.task != Task::loc) {
        throw DataError("finetune-cls needs a cls or loc manifest, got " + std::string(task_name(full.task)));
    }
    const auto k = static_cast<std::int64_t>(full.label_names.size());
    if (num_classes != 0 && num_classes != k) {
        throw DataError("manifest has " + std::to_string(k) + " label columns but num_classes = " +
                        std::to_string(num_classes));
    }
    FinetuneClsConfig r = *this;
    const auto t = task == "auto" ? detect_task(full) : parse_cls_task(task);
    r.task = cls_task_name(t);
    r.num_classes = k;
    if (r.epochs == 0) r.epochs = t == ClsTask::multi_label ? 30 : 10;
    return r;
}

FinetuneResult finetune_cls(const FinetuneClsConfig &config, const fs::path &run_dir) {
    const auto cfg = config.resolved();
    const auto full = load_manifest(cfg.manifest);
    const auto k = cfg.num_classes;
    const auto manifest = subsample(full, cfg.data_fraction, cfg.seed);
    const auto train = manifest.indices(Split::train);
    const auto val = manifest.indices(Split::val);
    const auto test = manifest.indices(Split::test);
    if (train.empty()) throw DataError("finetune-cls: no train rows");

    ClsSetup s;
    s.task = parse_cls_task(cfg.task);
    s.label_names = full.label_names;
    s.policy = parse_uncertain_policy(cfg.uncertain);
    const auto stats = corpus_stats(manifest);
    s.mean = stats.mean;
    s.std = stats.std;

    ViTModel model = init_backbone(cfg.ckpt, cfg.preset, cfg.image_size, cfg.seed);
    s.cfg = model.config;
    add_cls_head(model.params, s.cfg.embed_dim, k, cfg.seed);
    auto groups = llrd_groups(model.params, s.cfg.depth, cfg.llrd);
    AdamWConfig opt;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.weight_decay = cfg.weight_decay;
    AdamWState state;

    const ImageCache cache(manifest, cfg.image_size);
    AugmentConfig aug;
    aug.crop_scale_min = cfg.crop_scale_min;
    aug.hflip_prob = cfg.hflip_prob;
    aug.crop_size = cfg.image_size;
    aug.mean = s.mean;
    aug.std = s.std;
    aug.validate();

    const auto epochs = cfg.epochs;
    const auto n = static_cast<std::int64_t>(train.size());
    const CounterRng drop_root = CounterRng(cfg.seed, CounterRng::Stream::augment).fork(0xD0D0);

    FinetuneResult res;
    double best_score = -1;
    Snapshot best = snapshot(model.params);
    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
        const auto order = epoch_order(train, cfg.seed, epoch);
        double loss_sum = 0;
        for (std::int64_t b0 = 0; b0 < n; b0 += cfg.batch_size, ++step) {
            const auto bsz = std::min(cfg.batch_size, n - b0);
            std::vector<Tensor> views(static_cast<std::size_t>(bsz));
            parallel_for(bsz, [&](std::int64_t i) {
                const auto row = order[static_cast<std::size_t>(b0 + i)];
                views[static_cast<std::size_t>(i)] = train_view(cache.image(row), aug, cfg.seed, epoch, row);
            });
            Weights<float> w;
            bind<float>(w, model.params, [](const Param &) { return true; });
            for (std::int64_t i = 0; i < bsz; ++i) {
                const auto row = order[static_cast<std::size_t>(b0 + i)];
                const auto lab = row_labels(manifest.rows[row], s.task, s.policy);
                const CounterRng drng = drop_root.fork(static_cast<std::uint64_t>(step)).fork(static_cast<std::uint64_t>(i));
                auto logits = cls_forward(s.cfg, w, views[static_cast<std::size_t>(i)], cfg.dropout, &drng);
                auto loss = cls_loss(logits, lab.labels, s.task, lab.weights);
                const double lv = loss.value().item();
                if (!std::isfinite(lv)) throw NumericalError("finetune-cls: non-finite loss at step " + std::to_string(step));
                loss_sum += lv;
                backward(scale(loss, 1.0 / static_cast<double>(bsz)));
            }
            zero_grads(groups);
            w.accumulate_grads(model.params);
            adamw_step(groups, state, cfg.lr, opt);
        }
        res.report.push_back({epoch, "train", "loss", loss_sum / static_cast<double>(n)});
        if (!val.empty()) {
            const auto ev = evaluate_cls(s, model.params, cache, manifest, val);
            append_eval(res.report, epoch, "val", ev);
            if (selection_score(ev) > best_score) {
                best_score = selection_score(ev);
                best = snapshot(model.params);
                res.best_epoch = epoch;
            }
        } else {
            best = snapshot(model.params);
            res.best_epoch = epoch;
        }
    }
    restore(model.params, best);

    res.final_split = !test.empty() ? "test" : !val.empty() ? "val" : "train";
    const auto &final_rows = !test.empty() ? test : !val.empty() ? val : train;
    res.final_eval = evaluate_cls(s, model.params, cache, manifest, final_rows);
    append_eval(res.report, res.best_epoch, res.final_split, res.final_eval);
    for (const auto &[name, v] : res.final_eval.extra) res.report.push_back({res.best_epoch, res.final_split, name, v});

    fs::create_directories(run_dir / "checkpoints");
    fs::create_directories(run_dir / "reports");
    res.checkpoint = run_dir / "checkpoints" / "finetune_cls.ckpt";
    nlohmann::json meta = {{"kind", "finetune-cls"},     {"task", cls_task_name(s.task)},
                           {"label_names", s.label_names}, {"mean", s.mean},
                           {"std", s.std},               {"uncertain", cfg.uncertain},
                           {"best_epoch", res.best_epoch}, {"seed", cfg.seed}};
    save_checkpoint(model_checkpoint(s.cfg, model.params, meta), res.checkpoint);
    write_metrics_csv(res.report, run_dir / "reports" / "metrics.csv");
    return res;
}

Classifier load_classifier(const fs::path &ckpt_path) {
    const auto ck = load_checkpoint(ckpt_path);
    if (ck.metadata.value("kind", std::string()) != "finetune-cls") {
        throw DataError(ckpt_path.string() + " is not a finetune-cls checkpoint");
    }
    Classifier c;
    c.config = checkpoint_vit_config(ck);
    c.task = parse_cls_task(ck.metadata.at("task").get<std::string>());
    c.label_names = ck.metadata.at("label_names").get<std::vector<std::string>>();
    c.mean = ck.metadata.at("mean").get<double>();
    c.std = ck.metadata.at("std").get<double>();
    c.uncertain = ck.metadata.value("uncertain", std::string("one"));
    ViTModel model;
    build_vit(model, c.config, 0);
    add_cls_head(model.params, c.config.embed_dim, static_cast<std::int64_t>(c.label_names.size()), 0);
    load_params(ck, model.params);
    c.params = std::move(model.params);
    return c;
}

ClsEval eval_cls(const fs::path &ckpt_path, const fs::path &manifest_path, Split split) {
    const auto c = load_classifier(ckpt_path);
    ClsSetup s;
    s.cfg = c.config;
    s.task = c.task;
    s.label_names = c.label_names;
    s.mean = c.mean;
    s.std = c.std;
    s.policy = parse_uncertain_policy(c.uncertain);
    const auto m = load_manifest(manifest_path);
    if (m.label_names != s.label_names) throw DataError("manifest label columns differ from the checkpoint's");
    const ImageCache cache(m, s.cfg.image_size);
    return evaluate_cls(s, c.params, cache, m, m.indices(split));
}

void FinetuneSegConfig::validate() const {
    if (manifest.empty()) throw ConfigError("manifest", "manifest is required");
    if (iterations < 1) throw ConfigError("iterations", "iterations must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size", "batch_size must be >= 1");
    if (eval_every < 1) throw ConfigError("eval_every", "eval_every must be >= 1");
    if (channels < 1) throw ConfigError("channels", "channels must be >= 1");
    if (image_size < kMinImageSide) throw ConfigError("image_size", "image_size must be >= 16");
    if (!(lr > 0)) throw ConfigError("lr", "lr must be positive");
    if (!(llrd > 0 && llrd <= 1)) throw ConfigError("llrd", "llrd must lie in (0, 1]");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay", "weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1", "beta1 must lie in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2", "beta2 must lie in [0, 1)");
    if (!(hflip_prob >= 0 && hflip_prob <= 1)) throw ConfigError("hflip_prob", "hflip_prob must lie in [0, 1]");
    if (!(data_fraction > 0 && data_fraction <= 1)) throw ConfigError("data_fraction", "data_fraction must lie in (0, 1]");
}

namespace {

struct SegSetup {
    ViTConfig vit;
    SegDecoderConfig dec;
    double mean = 0, std = 1;
};

Tensor seg_input(const Image &img, const SegSetup &s, bool flip) {
    return normalize(flip ? mirror(img) : img, s.mean, s.std);
}

std::vector<std::int64_t> seg_targets(const Image &mask, bool flip) {
    const Image m = flip ? mirror(mask) : mask;
    std::vector<std::int64_t> t(static_cast<std::size_t>(m.height * m.width));
    for (std::int64_t i = 0; i < m.height; ++i)
        for (std::int64_t j = 0; j < m.width; ++j) t[static_cast<std::size_t>(i * m.width + j)] = m.at(i, j) >= 0.5f ? 1 : 0;
    return t;
}

SegEval evaluate_seg(const SegSetup &s, const ParamSet &params, const ImageCache &cache, const DatasetManifest &m,
                     const std::vector<std::size_t> &rows, const fs::path &pred_dir = {}) {
    if (rows.empty()) throw DataError("evaluation split is empty");
    Weights<float> w;
    bind<float>(w, params, nullptr);
    std::vector<double> d(rows.size()), j(rows.size());
    if (!pred_dir.empty()) fs::create_directories(pred_dir);
    parallel_for(static_cast<std::int64_t>(rows.size()), [&](std::int64_t i) {
        const auto row = rows[static_cast<std::size_t>(i)];
        const auto logits = seg_forward(s.vit, s.dec, w, seg_input(cache.image(row), s, false)).value();
        const auto pred = predict_mask(logits);
        const auto gt = BinaryMask::from_image(cache.mask(row));
        d[static_cast<std::size_t>(i)] = dice(pred, gt);
        j[static_cast<std::size_t>(i)] = jaccard(pred, gt);
        if (!pred_dir.empty()) {
            Image out(pred.height, pred.width, 0.0f);
            for (std::int64_t y = 0; y < pred.height; ++y)
                for (std::int64_t x = 0; x < pred.width; ++x) out.at(y, x) = pred.at(y, x) ? 1.0f : 0.0f;
            write_png_gray(out, pred_dir / (m.rows[row].path.stem().string() + "_pred.png"));
        }
    });
    SegEval ev;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        ev.dice += d[i];
        ev.jaccard += j[i];
    }
    ev.dice /= static_cast<double>(rows.size());
    ev.jaccard /= static_cast<double>(rows.size());
    return ev;
}

void append_seg(std::vector<MetricRow> &rows, std::int64_t it, const std::string &split, const SegEval &ev) {
    rows.push_back({it, split, "dice", ev.dice});
    rows.push_back({it, split, "jaccard", ev.jaccard});
}

}  // namespace

FinetuneSegResult finetune_seg(const FinetuneSegConfig &cfg, const fs::path &run_dir) {
    cfg.validate();
    const auto full = load_manifest(cfg.manifest);
    if (full.task != Task::seg) throw DataError("finetune-seg needs a seg manifest, got " + std::string(task_name(full.task)));
    const auto manifest = subsample(full, cfg.data_fraction, cfg.seed);
    const auto train = manifest.indices(Split::train);
    const auto val = manifest.indices(Split::val);
    const auto test = manifest.indices(Split::test);
    if (train.empty()) throw DataError("finetune-seg: no train rows");

    SegSetup s;
    const auto stats = corpus_stats(manifest);
    s.mean = stats.mean;
    s.std = stats.std;
    s.dec.channels = cfg.channels;
    ViTModel model = init_backbone(cfg.ckpt, cfg.preset, cfg.image_size, cfg.seed);
    s.vit = model.config;
    add_seg_decoder(model.params, s.vit.embed_dim, s.dec, cfg.seed);
    auto groups = llrd_groups(model.params, s.vit.depth, cfg.llrd);
    AdamWConfig opt;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.weight_decay = cfg.weight_decay;
    AdamWState state;
    const ImageCache cache(manifest, cfg.image_size);

    const auto n = static_cast<std::int64_t>(train.size());
    std::map<std::int64_t, std::vector<std::size_t>> orders;
    auto row_at = [&](std::int64_t pos) {
        const auto epoch = pos / n;
        auto it = orders.find(epoch);
        if (it == orders.end()) {
            orders.clear();
            it = orders.emplace(epoch, epoch_order(train, cfg.seed, epoch)).first;
        }
        return std::make_pair(epoch, it->second[static_cast<std::size_t>(pos % n)]);
    };

    FinetuneSegResult res;
    double best_score = -1;
    Snapshot best = snapshot(model.params);
    double loss_window = 0;
    std::int64_t window_count = 0;
    for (std::int64_t it = 0; it < cfg.iterations; ++it) {
        std::vector<Tensor> inputs(static_cast<std::size_t>(cfg.batch_size));
        std::vector<std::vector<std::int64_t>> targets(static_cast<std::size_t>(cfg.batch_size));
        for (std::int64_t i = 0; i < cfg.batch_size; ++i) {
            const auto [epoch, row] = row_at(it * cfg.batch_size + i);
            CounterRng rng = CounterRng(cfg.seed, CounterRng::Stream::augment).fork(static_cast<std::uint64_t>(epoch)).fork(row);
            const bool flip = rng.uniform_f64() < cfg.hflip_prob;
            inputs[static_cast<std::size_t>(i)] = seg_input(cache.image(row), s, flip);
            targets[static_cast<std::size_t>(i)] = seg_targets(cache.mask(row), flip);
        }
        Weights<float> w;
        bind<float>(w, model.params, [](const Param &) { return true; });
        double loss_sum = 0;
        for (std::int64_t i = 0; i < cfg.batch_size; ++i) {
            auto logits = seg_forward(s.vit, s.dec, w, inputs[static_cast<std::size_t>(i)]);
            auto loss = softmax_cross_entropy(logits, targets[static_cast<std::size_t>(i)]);
            const double lv = loss.value().item();
            if (!std::isfinite(lv)) throw NumericalError("finetune-seg: non-finite loss at iteration " + std::to_string(it));
            loss_sum += lv;
            backward(scale(loss, 1.0 / static_cast<double>(cfg.batch_size)));
        }
        zero_grads(groups);
        w.accumulate_grads(model.params);
        adamw_step(groups, state, cfg.lr, opt);
        loss_window += loss_sum / static_cast<double>(cfg.batch_size);
        ++window_count;

        const bool last = it + 1 == cfg.iterations;
        if ((it + 1) % cfg.eval_every == 0 || last) {
            res.report.push_back({it + 1, "train", "loss", loss_window / static_cast<double>(window_count)});
            loss_window = 0;
            window_count = 0;
            if (!val.empty()) {
                const auto ev = evaluate_seg(s, model.params, cache, manifest, val);
                append_seg(res.report, it + 1, "val", ev);
                if (ev.dice > best_score) {
                    best_score = ev.dice;
                    best = snapshot(model.params);
                    res.best_iteration = it + 1;
                }
            } else {
                best = snapshot(model.params);
                res.best_iteration = it + 1;
            }
        }
    }
    restore(model.params, best);
    res.train_eval = evaluate_seg(s, model.params, cache, manifest, train);
    append_seg(res.report, res.best_iteration, "train", res.train_eval);
    res.final_split = !test.empty() ? "test" : !val.empty() ? "val" : "train";
    res.final_eval = !test.empty() ? evaluate_seg(s, model.params, cache, manifest, test)
                     : !val.empty() ? evaluate_seg(s, model.params, cache, manifest, val)
                                    : res.train_eval;
    if (res.final_split != "train") append_seg(res.report, res.best_iteration, res.final_split, res.final_eval);

    fs::create_directories(run_dir / "checkpoints");
    fs::create_directories(run_dir / "reports");
    res.checkpoint = run_dir / "checkpoints" / "finetune_seg.ckpt";
    nlohmann::json meta = {{"kind", "finetune-seg"}, {"decoder", s.dec.to_json()}, {"mean", s.mean},
                           {"std", s.std},           {"best_iteration", res.best_iteration}, {"seed", cfg.seed}};
    save_checkpoint(model_checkpoint(s.vit, model.params, meta), res.checkpoint);
    write_metrics_csv(res.report, run_dir / "reports" / "metrics.csv");
    return res;
}

SegEval eval_seg(const fs::path &ckpt_path, const fs::path &manifest_path, Split split, const fs::path &pred_dir) {
    const auto ck = load_checkpoint(ckpt_path);
    if (ck.metadata.value("kind", std::string()) != "finetune-seg") {
        throw DataError(ckpt_path.string() + " is not a finetune-seg checkpoint");
    }
    SegSetup s;
    s.vit = checkpoint_vit_config(ck);
    s.dec = SegDecoderConfig::from_json(ck.metadata.at("decoder"));
    s.mean = ck.metadata.at("mean").get<double>();
    s.std = ck.metadata.at("std").get<double>();
    ViTModel model;
    build_vit(model, s.vit, 0);
    add_seg_decoder(model.params, s.vit.embed_dim, s.dec, 0);
    load_params(ck, model.params);
    const auto m = load_manifest(manifest_path);
    if (m.task != Task::seg) throw DataError("eval-seg needs a seg manifest");
    const ImageCache cache(m, s.vit.image_size);
    return evaluate_seg(s, model.params, cache, m, m.indices(split), pred_dir);
}

#define EVAX_INSTANTIATE_TRANSFER(T)                                                                                   \
    template Var<T> cls_logits_from_tokens(const Weights<T> &, const TokenSequence<T> &, double, const CounterRng *);  \
    template Var<T> cls_forward(const ViTConfig &, const Weights<T> &, const BasicTensor<T> &, double,                  \
                                const CounterRng *);                                                                   \
    template Var<T> cls_loss(const Var<T> &, const std::vector<int> &, ClsTask, const std::vector<double> &);          \
    template std::array<Var<T>, 4> build_pyramid(const TokenSequence<T> &, const Weights<T> &);                        \
    template Var<T> upernet_forward(const std::array<Var<T>, 4> &, const Weights<T> &, const SegDecoderConfig &,      \
                                    std::int64_t, std::int64_t);                                                       \
    template Var<T> seg_forward(const ViTConfig &, const SegDecoderConfig &, const Weights<T> &, const BasicTensor<T> &);

EVAX_INSTANTIATE_TRANSFER(float)
EVAX_INSTANTIATE_TRANSFER(double)

}  // namespace evax
