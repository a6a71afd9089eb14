#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "evax/dataset.hpp"
#include "evax/vit.hpp"

namespace evax {

struct MaskPlan {
    std::vector<std::int64_t> mask_list;  // sorted image-token indices
    double ratio = 0.0;
};

// Uniform subset of floor(n * r) image-token indices.
MaskPlan sample_mask(std::int64_t n, double ratio, CounterRng &rng);

// Masked slots become mask_token + pos_embed[slot]; every other row is passed
// through untouched.
template <typename T>
TokenSequence<T> apply_mask(const TokenSequence<T> &tokens, const MaskPlan &plan, const Var<T> &mask_token,
                            const Var<T> &pos_embed);

// A frozen ViT whose final-norm outputs serve as targets.
struct Tokenizer {
    ViTModel model;
    std::string source = "random";  // medical-clip | natural-clip | random
};

Tokenizer make_random_tokenizer(const ViTConfig &cfg, std::uint64_t seed);
Tokenizer load_tokenizer(const std::filesystem::path &path);
void save_tokenizer(const Tokenizer &tok, const std::filesystem::path &path);

// Unmasked forward of the tokenizer: [prefix + n, d_tgt]. Throws ShapeError if
// its patch grid differs from the student's.
template <typename T>
BasicTensor<T> tokenize_targets(const Tokenizer &tok, const ViTConfig &student, const BasicTensor<T> &image);

// Projection head parameters mim_head.weight [d, d_tgt], mim_head.bias [d_tgt].
void add_projection_head(ParamSet &params, std::int64_t d, std::int64_t d_tgt, std::uint64_t seed);

// 1 - mean cosine between projected student outputs and targets, over the
// masked image tokens.
template <typename T>
Var<T> mim_loss(const TokenSequence<T> &student_out, const BasicTensor<T> &targets, const MaskPlan &plan,
                const Weights<T> &w);

struct PretrainConfig {
    std::filesystem::path manifest;
    std::filesystem::path tokenizer_ckpt;
    std::string preset = "ti";
    std::int64_t image_size = 224;
    std::int64_t epochs = 0;  // 0: 900 for ti, 600 otherwise
    std::int64_t batch_size = 128;
    double mask_ratio = 0.3;
    double crop_scale_min = 0.2;
    double hflip_prob = 0.5;
    double base_lr = 3e-4;
    double min_lr = 1e-6;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double data_fraction = 1.0;
    std::uint64_t seed = 0;

    std::int64_t resolved_epochs() const;
    void validate() const;
};

struct LossPoint {
    std::int64_t step = 0;
    double lr = 0;
    double loss = 0;
};

struct PretrainResult {
    std::filesystem::path checkpoint;
    std::vector<LossPoint> curve;
};

// Trains a student against the frozen tokenizer. Writes
// checkpoints/pretrain.ckpt and reports/loss.csv (`step,lr,loss`) under run_dir.
PretrainResult pretrain_run(const PretrainConfig &cfg, const std::filesystem::path &run_dir);

void write_loss_csv(const std::vector<LossPoint> &curve, const std::filesystem::path &path);

}  // namespace evax
