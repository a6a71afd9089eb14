#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "evax/dataset.hpp"
#include "evax/metrics.hpp"
#include "evax/vit.hpp"

namespace evax {

enum class ClsTask { multi_label, single_label };
ClsTask parse_cls_task(const std::string &s);
const char *cls_task_name(ClsTask t);

// head.weight [d, K], head.bias [K].
void add_cls_head(ParamSet &params, std::int64_t d, std::int64_t num_classes, std::uint64_t seed);

// Final norm, mean pool over image tokens, dropout (training only, when a
// stream is given), linear head. Returns logits [K].
template <typename T>
Var<T> cls_logits_from_tokens(const Weights<T> &w, const TokenSequence<T> &last_block, double dropout_p = 0.0,
                              const CounterRng *dropout_rng = nullptr);

template <typename T>
Var<T> cls_forward(const ViTConfig &cfg, const Weights<T> &w, const BasicTensor<T> &image, double dropout_p = 0.0,
                   const CounterRng *dropout_rng = nullptr);

// multi_label: weighted mean BCE over K; single_label: softmax CE on the one
// positive class. Labels must be 0/1; -1 is a data error.
template <typename T>
Var<T> cls_loss(const Var<T> &logits, const std::vector<int> &labels, ClsTask task,
                const std::vector<double> &weights = {});

// [embed, blocks.0 .. blocks.{L-1}, head]; group g of G gets decay^(G-1-g).
// The head group holds everything outside the embedding and blocks.
std::vector<ParamGroup> llrd_groups(ParamSet &params, std::int64_t depth, double decay);

struct SegDecoderConfig {
    std::int64_t channels = 256;
    std::int64_t num_classes = 2;
    std::vector<std::int64_t> bins = {1, 2, 3, 6};
    nlohmann::json to_json() const;
    static SegDecoderConfig from_json(const nlohmann::json &j);
};

// Parameters under seg.*: the pyramid deconvolutions, PPM, laterals, FPN
// output convs and the classifier.
void add_seg_decoder(ParamSet &params, std::int64_t d, const SegDecoderConfig &cfg, std::uint64_t seed);

// Maps [d, s, s] at 1/4, 1/8, 1/16, 1/32 of the input resolution.
template <typename T>
std::array<Var<T>, 4> build_pyramid(const TokenSequence<T> &features, const Weights<T> &w);

// Per-pixel logits [num_classes, out_h, out_w].
template <typename T>
Var<T> upernet_forward(const std::array<Var<T>, 4> &pyramid, const Weights<T> &w, const SegDecoderConfig &cfg,
                       std::int64_t out_h, std::int64_t out_w);

template <typename T>
Var<T> seg_forward(const ViTConfig &vit, const SegDecoderConfig &dec, const Weights<T> &w,
                   const BasicTensor<T> &image);

// Per-pixel argmax; class 1 and above count as foreground.
BinaryMask predict_mask(const Tensor &logits);

struct MetricRow {
    std::int64_t epoch = 0;
    std::string split;
    std::string metric;
    double value = 0;
};

// `epoch,split,metric,value`.
void write_metrics_csv(const std::vector<MetricRow> &rows, const std::filesystem::path &path);

struct ClsEval {
    std::optional<double> mauc;
    double accuracy = 0;
    std::vector<std::pair<std::string, double>> extra;  // per-class AUC and sensitivity
};

struct FinetuneClsConfig {
    std::filesystem::path manifest;
    std::filesystem::path ckpt;  // empty: random init from `preset`
    std::string preset = "ti";
    std::int64_t image_size = 224;
    std::string task = "auto";   // auto | multi-label | single-label
    std::int64_t num_classes = 0;  // 0: from the manifest header
    std::int64_t epochs = 0;       // 0: 30 multi-label, 10 single-label
    std::int64_t batch_size = 128;
    double lr = 1e-3;
    double llrd = 0.55;
    double dropout = 0.2;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double crop_scale_min = 0.2;
    double hflip_prob = 0.5;
    double data_fraction = 1.0;
    std::string uncertain = "one";
    std::uint64_t seed = 0;

    void validate() const;
    // Copy with task, num_classes and epochs filled in from the manifest.
    FinetuneClsConfig resolved() const;
};

struct FinetuneResult {
    std::filesystem::path checkpoint;
    std::vector<MetricRow> report;
    std::int64_t best_epoch = 0;
    ClsEval final_eval;  // test split if present, else val
    std::string final_split;
};

// Writes checkpoints/finetune_cls.ckpt (best validation mAUC, accuracy when
// mAUC is undefined) and reports/metrics.csv under run_dir.
FinetuneResult finetune_cls(const FinetuneClsConfig &cfg, const std::filesystem::path &run_dir);

struct Classifier {
    ViTConfig config;
    ParamSet params;  // backbone and head.*
    ClsTask task = ClsTask::multi_label;
    std::vector<std::string> label_names;
    double mean = 0, std = 1;
    std::string uncertain = "one";
};

Classifier load_classifier(const std::filesystem::path &ckpt);

// Evaluates a fine-tuned classifier checkpoint on one split.
ClsEval eval_cls(const std::filesystem::path &ckpt, const std::filesystem::path &manifest, Split split);

struct FinetuneSegConfig {
    std::filesystem::path manifest;
    std::filesystem::path ckpt;
    std::string preset = "ti";
    std::int64_t image_size = 512;
    std::int64_t iterations = 4000;
    std::int64_t batch_size = 4;
    std::int64_t eval_every = 500;
    std::int64_t channels = 256;
    double lr = 2e-4;
    double llrd = 0.85;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double hflip_prob = 0.5;
    double data_fraction = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SegEval {
    double dice = 0;
    double jaccard = 0;
};

struct FinetuneSegResult {
    std::filesystem::path checkpoint;
    std::vector<MetricRow> report;
    std::int64_t best_iteration = 0;
    SegEval train_eval;
    SegEval final_eval;
    std::string final_split;
};

FinetuneSegResult finetune_seg(const FinetuneSegConfig &cfg, const std::filesystem::path &run_dir);

// Mean per-image Dice/Jaccard; optional PNG (0/255) predictions in pred_dir.
SegEval eval_seg(const std::filesystem::path &ckpt, const std::filesystem::path &manifest, Split split,
                 const std::filesystem::path &pred_dir = {});

}  // namespace evax
