#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "evax/autograd.hpp"
#include "evax/checkpoint.hpp"
#include "evax/optim.hpp"

namespace evax {

struct ViTConfig {
    std::string preset = "custom";
    std::int64_t patch_size = 16;
    std::int64_t embed_dim = 192;
    std::int64_t depth = 12;
    std::int64_t heads = 3;
    std::int64_t image_size = 224;
    std::int64_t mlp_hidden = 0;  // 0: smallest multiple of 8 >= 8d/3
    bool use_class_token = true;

    void validate() const;
    std::int64_t grid() const { return image_size / patch_size; }
    std::int64_t num_patches() const { return grid() * grid(); }
    std::int64_t head_dim() const { return embed_dim / heads; }
    std::int64_t hidden() const;
    std::int64_t prefix() const { return use_class_token ? 1 : 0; }

    nlohmann::json to_json() const;
    static ViTConfig from_json(const nlohmann::json &j);
    bool operator==(const ViTConfig &) const = default;
};

// ti (192/3/12), s (384/6/12), b (768/12/12), micro (64/2/2).
ViTConfig vit_preset(const std::string &name, std::int64_t image_size = 224);

// Parameter names:
//   patch_embed.weight [P*P, d], patch_embed.bias [d], cls_token [1, d],
//   pos_embed [prefix + n, d], mask_token [1, d],
//   blocks.{i}.{norm1,attn.sub_norm,norm2}.{weight,bias},
//   blocks.{i}.attn.{qkv,proj}.{weight,bias},
//   blocks.{i}.mlp.{w_g,w_v,w_out}.{weight,bias}, blocks.{i}.mlp.sub_norm.{weight,bias},
//   norm.{weight,bias}
struct ViTModel {
    ViTConfig config;
    ParamSet params;
};

// Truncated normal (sigma 0.02) for weights and embeddings, zero biases, unit
// norm gains. Same config and seed give bitwise identical parameters.
void build_vit(ViTModel &model, const ViTConfig &config, std::uint64_t init_seed);

// Graph leaves for one forward pass. Trainable parameters become variables
// (copied, or cast for T = double); everything else enters as constants and
// records no tape.
template <typename T>
class Weights {
   public:
    const Var<T> &operator()(const std::string &name) const;
    void set(const std::string &name, Var<T> v) { vars_[name] = std::move(v); }
    bool has(const std::string &name) const { return vars_.count(name) != 0; }
    // Adds each variable's gradient into the matching Param::grad.
    void accumulate_grads(ParamSet &params) const;

   private:
    std::unordered_map<std::string, Var<T>> vars_;
};

using TrainableFn = std::function<bool(const Param &)>;

template <typename T>
void bind(Weights<T> &w, const ParamSet &params, const TrainableFn &trainable);

template <typename T>
struct TokenSequence {
    Var<T> tokens;  // [prefix + grid_h * grid_w, d]
    std::int64_t grid_h = 0;
    std::int64_t grid_w = 0;
    bool has_class_token = false;
    std::vector<std::int64_t> positions;  // grid cell of each image token; empty means row-major order

    std::int64_t prefix() const { return has_class_token ? 1 : 0; }
    std::int64_t image_tokens() const { return grid_h * grid_w; }
};

// Non-overlapping P x P patches of a [H, W] image, row-major: [n, P*P].
template <typename T>
BasicTensor<T> extract_patches(const BasicTensor<T> &image, std::int64_t patch);

template <typename T>
TokenSequence<T> patchify(const ViTConfig &cfg, const Weights<T> &w, const BasicTensor<T> &image);

// Pre-norm block with rotary q/k, Sub-LN before the attention projection and
// a SwiGLU FFN. Optionally records the post-softmax attention [heads, L, L].
template <typename T>
TokenSequence<T> block_forward(const ViTConfig &cfg, const Weights<T> &w, std::int64_t index,
                               const TokenSequence<T> &x, BasicTensor<T> *attention = nullptr);

template <typename T>
struct Features {
    TokenSequence<T> last_block;  // output of the final block
    TokenSequence<T> out;         // after the final LN
};

template <typename T>
Features<T> forward_features(const ViTConfig &cfg, const Weights<T> &w, const TokenSequence<T> &x,
                             std::vector<BasicTensor<T>> *attention = nullptr);

// Mean over image tokens; the class token is excluded.
template <typename T>
Var<T> mean_pool(const TokenSequence<T> &x);

// Bilinear (align corners) resampling of the grid part of a position table.
Tensor resize_pos_embed(const Tensor &pos, std::int64_t prefix, std::int64_t old_grid, std::int64_t new_grid);

bool is_backbone_param(const std::string &name);

// Every tensor of `params` plus metadata["vit_config"].
Checkpoint model_checkpoint(const ViTConfig &cfg, const ParamSet &params, nlohmann::json metadata = {});
ViTConfig checkpoint_vit_config(const Checkpoint &ckpt);

// Copies the backbone tensors of a checkpoint into `model` (built for its own
// config). The grid part of pos_embed is resampled when the grids differ;
// other shape mismatches are data errors. Returns the names copied.
std::vector<std::string> load_backbone(const Checkpoint &ckpt, ViTModel &model);

// Copies every tensor of `params` from the checkpoint; missing or misshapen
// tensors are data errors.
void load_params(const Checkpoint &ckpt, ParamSet &params);

}  // namespace evax
