#include "evax/vit.hpp"

#include <cmath>

#include "evax/rng.hpp"

namespace evax {

void ViTConfig::validate() const {
    if (patch_size < 1) throw ConfigError("patch_size", "patch_size must be positive");
    if (image_size < 1 || image_size % patch_size != 0) {
        throw ConfigError("image_size", "image_size " + std::to_string(image_size) + " is not divisible by patch size " +
                                            std::to_string(patch_size));
    }
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) {
        throw ConfigError("heads", "embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                                       std::to_string(heads));
    }
    if (head_dim() % 4 != 0) {
        throw ConfigError("heads", "head dim " + std::to_string(head_dim()) + " must be divisible by 4 for 2D rotary pairs");
    }
    if (depth < 0) throw ConfigError("depth", "depth must be >= 0");
    if (mlp_hidden < 0) throw ConfigError("mlp_hidden", "mlp_hidden must be >= 0");
}

std::int64_t ViTConfig::hidden() const {
    if (mlp_hidden > 0) return mlp_hidden;
    const std::int64_t h = (8 * embed_dim + 2) / 3;  // ceil(8d/3)
    return (h + 7) / 8 * 8;
}

nlohmann::json ViTConfig::to_json() const {
    return {{"preset", preset},         {"patch_size", patch_size}, {"embed_dim", embed_dim},
            {"depth", depth},           {"heads", heads},           {"image_size", image_size},
            {"mlp_hidden", mlp_hidden},   {"use_class_token", use_class_token}};
}

ViTConfig ViTConfig::from_json(const nlohmann::json &j) {
    ViTConfig c;
    try {
        c.preset = j.value("preset", std::string("custom"));
        c.patch_size = j.at("patch_size").get<std::int64_t>();
        c.embed_dim = j.at("embed_dim").get<std::int64_t>();
        c.depth = j.at("depth").get<std::int64_t>();
        c.heads = j.at("heads").get<std::int64_t>();
        c.image_size = j.at("image_size").get<std::int64_t>();
        c.mlp_hidden = j.value("mlp_hidden", std::int64_t{0});
        c.use_class_token = j.value("use_class_token", true);
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError("vit_config", std::string("malformed vit_config: ") + e.what());
    }
    c.validate();
    return c;
}

ViTConfig vit_preset(const std::string &name, std::int64_t image_size) {
    ViTConfig c;
    c.preset = name;
    c.image_size = image_size;
    if (name == "ti") {
        c.embed_dim = 192, c.heads = 3, c.depth = 12;
    } else if (name == "s") {
        c.embed_dim = 384, c.heads = 6, c.depth = 12;
    } else if (name == "b") {
        c.embed_dim = 768, c.heads = 12, c.depth = 12;
    } else if (name == "micro") {
        c.embed_dim = 64, c.heads = 2, c.depth = 2;
    } else {
        throw ConfigError("preset", "unknown preset '" + name + "' (expected ti, s, b or micro)");
    }
    c.validate();
    return c;
}

namespace {

Tensor trunc_normal(Shape shape, CounterRng &rng, float std = 0.02f) {
    Tensor t(std::move(shape));
    for (auto &v : t.values()) v = rng.truncated_normal(std);
    return t;
}

void add_linear(ParamSet &ps, const std::string &name, std::int64_t in, std::int64_t out, CounterRng &rng) {
    ps.add(name + ".weight", trunc_normal({in, out}, rng), true);
    ps.add(name + ".bias", Tensor(Shape{out}), false);
}

void add_norm(ParamSet &ps, const std::string &name, std::int64_t d) {
    ps.add(name + ".weight", Tensor(Shape{d}, 1.0f), false);
    ps.add(name + ".bias", Tensor(Shape{d}), false);
}

std::string blk(std::int64_t i, const char *rest) { return "blocks." + std::to_string(i) + "." + rest; }

}  // namespace

void build_vit(ViTModel &model, const ViTConfig &cfg, std::uint64_t init_seed) {
    cfg.validate();
    model.config = cfg;
    model.params = ParamSet();
    CounterRng rng(init_seed, CounterRng::Stream::init);
    const auto d = cfg.embed_dim, hid = cfg.hidden();
    auto &ps = model.params;
    add_linear(ps, "patch_embed", cfg.patch_size * cfg.patch_size, d, rng);
    if (cfg.use_class_token) ps.add("cls_token", trunc_normal({1, d}, rng), false);
    ps.add("pos_embed", trunc_normal({cfg.prefix() + cfg.num_patches(), d}, rng), false);
    ps.add("mask_token", trunc_normal({1, d}, rng), false);
    for (std::int64_t i = 0; i < cfg.depth; ++i) {
        add_norm(ps, blk(i, "norm1"), d);
        add_linear(ps, blk(i, "attn.qkv"), d, 3 * d, rng);
        add_norm(ps, blk(i, "attn.sub_norm"), d);
        add_linear(ps, blk(i, "attn.proj"), d, d, rng);
        add_norm(ps, blk(i, "norm2"), d);
        add_linear(ps, blk(i, "mlp.w_g"), d, hid, rng);
        add_linear(ps, blk(i, "mlp.w_v"), d, hid, rng);
        add_norm(ps, blk(i, "mlp.sub_norm"), hid);
        add_linear(ps, blk(i, "mlp.w_out"), hid, d, rng);
    }
    add_norm(ps, "norm", d);
}

bool is_backbone_param(const std::string &name) {
    return name.rfind("patch_embed.", 0) == 0 || name == "cls_token" || name == "pos_embed" || name == "mask_token" ||
           name.rfind("blocks.", 0) == 0 || name.rfind("norm.", 0) == 0;
}

template <typename T>
const Var<T> &Weights<T>::operator()(const std::string &name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw DataError("weights: no tensor bound for " + name);
    return it->second;
}

template <typename T>
void Weights<T>::accumulate_grads(ParamSet &params) const {
    for (const auto &[name, v] : vars_) {
        if (!v.requires_grad() || !params.has(name)) continue;
        auto &p = params.at(name);
        if (!v.has_grad()) continue;
        const auto g = v.grad();
        if (p.grad.empty()) p.grad = Tensor(p.value.shape());
        for (std::int64_t i = 0; i < g.numel(); ++i) p.grad[i] += static_cast<float>(g[i]);
    }
}

template <typename T>
void bind(Weights<T> &w, const ParamSet &params, const TrainableFn &trainable) {
    for (const Param *p : params.all()) {
        BasicTensor<T> value = p->value.template cast<T>();
        w.set(p->name, trainable && trainable(*p) ? variable(std::move(value)) : constant(std::move(value)));
    }
}

template <typename T>
BasicTensor<T> extract_patches(const BasicTensor<T> &image, std::int64_t patch) {
    if (image.rank() != 2) throw ShapeError("patchify: image must be [H, W], got " + shape_str(image.shape()));
    const auto h = image.dim(0), w = image.dim(1);
    if (h % patch != 0 || w % patch != 0) {
        throw ShapeError("patchify: image " + shape_str(image.shape()) + " is not divisible by patch size " +
                         std::to_string(patch));
    }
    const auto gh = h / patch, gw = w / patch;
    BasicTensor<T> out(Shape{gh * gw, patch * patch});
    for (std::int64_t gi = 0; gi < gh; ++gi)
        for (std::int64_t gj = 0; gj < gw; ++gj) {
            T *row = out.data() + (gi * gw + gj) * patch * patch;
            for (std::int64_t i = 0; i < patch; ++i)
                for (std::int64_t j = 0; j < patch; ++j) row[i * patch + j] = image.at(gi * patch + i, gj * patch + j);
        }
    return out;
}

template <typename T>
TokenSequence<T> patchify(const ViTConfig &cfg, const Weights<T> &w, const BasicTensor<T> &image) {
    if (image.rank() != 2 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size) {
        throw ShapeError("patchify: expected a " + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) +
                         " image, got " + shape_str(image.shape()));
    }
    auto patches = constant(extract_patches(image, cfg.patch_size));
    auto tokens = linear(patches, w("patch_embed.weight"), w("patch_embed.bias"));
    if (cfg.use_class_token) tokens = concat<T>({w("cls_token"), tokens}, 0);
    tokens = add(tokens, w("pos_embed"));
    return {tokens, cfg.grid(), cfg.grid(), cfg.use_class_token};
}

template <typename T>
TokenSequence<T> block_forward(const ViTConfig &cfg, const Weights<T> &w, std::int64_t index,
                               const TokenSequence<T> &x, BasicTensor<T> *attention) {
    const auto d = cfg.embed_dim, dh = cfg.head_dim();
    if (x.tokens.dim(1) != d) {
        throw ShapeError("block_forward: token dim " + std::to_string(x.tokens.dim(1)) + " != embed_dim " + std::to_string(d));
    }
    const std::string p = "blocks." + std::to_string(index) + ".";
    const auto L = x.tokens.dim(0);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    auto h = layer_norm(x.tokens, w(p + "norm1.weight"), w(p + "norm1.bias"));
    auto qkv = linear(h, w(p + "attn.qkv.weight"), w(p + "attn.qkv.bias"));
    std::vector<Var<T>> heads;
    if (attention) *attention = BasicTensor<T>(Shape{cfg.heads, L, L});
    for (std::int64_t hd = 0; hd < cfg.heads; ++hd) {
        auto q = slice(qkv, 1, hd * dh, (hd + 1) * dh);
        auto k = slice(qkv, 1, d + hd * dh, d + (hd + 1) * dh);
        auto v = slice(qkv, 1, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
        q = rope2d(q, x.grid_h, x.grid_w, x.prefix(), x.positions);
        k = rope2d(k, x.grid_h, x.grid_w, x.prefix(), x.positions);
        auto a = softmax(scale(matmul(q, transpose(k)), inv_sqrt));
        if (attention) std::copy_n(a.value().data(), L * L, attention->data() + hd * L * L);
        heads.push_back(matmul(a, v));
    }
    auto o = heads.size() == 1 ? heads[0] : concat(heads, 1);
    o = layer_norm(o, w(p + "attn.sub_norm.weight"), w(p + "attn.sub_norm.bias"));
    auto y = add(x.tokens, linear(o, w(p + "attn.proj.weight"), w(p + "attn.proj.bias")));

    auto h2 = layer_norm(y, w(p + "norm2.weight"), w(p + "norm2.bias"));
    auto gate = silu(linear(h2, w(p + "mlp.w_g.weight"), w(p + "mlp.w_g.bias")));
    auto val = linear(h2, w(p + "mlp.w_v.weight"), w(p + "mlp.w_v.bias"));
    auto u = layer_norm(mul(gate, val), w(p + "mlp.sub_norm.weight"), w(p + "mlp.sub_norm.bias"));
    auto z = add(y, linear(u, w(p + "mlp.w_out.weight"), w(p + "mlp.w_out.bias")));
    return {z, x.grid_h, x.grid_w, x.has_class_token, x.positions};
}

template <typename T>
Features<T> forward_features(const ViTConfig &cfg, const Weights<T> &w, const TokenSequence<T> &x,
                             std::vector<BasicTensor<T>> *attention) {
    TokenSequence<T> cur = x;
    if (attention) attention->assign(static_cast<std::size_t>(cfg.depth), BasicTensor<T>());
    for (std::int64_t i = 0; i < cfg.depth; ++i) {
        cur = block_forward(cfg, w, i, cur, attention ? &(*attention)[static_cast<std::size_t>(i)] : nullptr);
    }
    Features<T> f;
    f.last_block = cur;
    f.out = {layer_norm(cur.tokens, w("norm.weight"), w("norm.bias")), cur.grid_h, cur.grid_w, cur.has_class_token,
             cur.positions};
    return f;
}

template <typename T>
Var<T> mean_pool(const TokenSequence<T> &x) {
    if (x.image_tokens() < 1) throw ShapeError("mean_pool: no image tokens");
    auto img = x.prefix() > 0 ? slice(x.tokens, 0, x.prefix(), x.tokens.dim(0)) : x.tokens;
    return mean(img, 0);
}

Tensor resize_pos_embed(const Tensor &pos, std::int64_t prefix, std::int64_t old_grid, std::int64_t new_grid) {
    const auto d = pos.dim(1);
    if (pos.dim(0) != prefix + old_grid * old_grid) {
        throw ShapeError("resize_pos_embed: table " + shape_str(pos.shape()) + " does not match grid " + std::to_string(old_grid));
    }
    if (old_grid == new_grid) return pos;
    Tensor grid(Shape{d, old_grid, old_grid});
    for (std::int64_t t = 0; t < old_grid * old_grid; ++t)
        for (std::int64_t c = 0; c < d; ++c) grid[c * old_grid * old_grid + t] = pos.at(prefix + t, c);
    OpAttrs at;
    at.out_h = new_grid;
    at.out_w = new_grid;
    std::vector<Tensor> in = {grid};
    const auto r = primitive_forward<float>(OpId::bilinear_resize_2d, TensorList<float>(in), at);
    Tensor out(Shape{prefix + new_grid * new_grid, d});
    for (std::int64_t t = 0; t < prefix; ++t)
        for (std::int64_t c = 0; c < d; ++c) out.at(t, c) = pos.at(t, c);
    for (std::int64_t t = 0; t < new_grid * new_grid; ++t)
        for (std::int64_t c = 0; c < d; ++c) out.at(prefix + t, c) = r[c * new_grid * new_grid + t];
    return out;
}

Checkpoint model_checkpoint(const ViTConfig &cfg, const ParamSet &params, nlohmann::json metadata) {
    Checkpoint ck;
    ck.metadata = metadata.is_object() ? std::move(metadata) : nlohmann::json::object();
    ck.metadata["vit_config"] = cfg.to_json();
    for (const Param *p : params.all()) ck.tensors[p->name] = p->value;
    return ck;
}

ViTConfig checkpoint_vit_config(const Checkpoint &ckpt) {
    if (!ckpt.metadata.contains("vit_config")) throw DataError("checkpoint has no vit_config metadata");
    return ViTConfig::from_json(ckpt.metadata.at("vit_config"));
}

std::vector<std::string> load_backbone(const Checkpoint &ckpt, ViTModel &model) {
    const auto src = checkpoint_vit_config(ckpt);
    const auto &cfg = model.config;
    if (src.embed_dim != cfg.embed_dim || src.depth != cfg.depth || src.heads != cfg.heads ||
        src.patch_size != cfg.patch_size || src.hidden() != cfg.hidden()) {
        throw DataError("checkpoint backbone " + src.to_json().dump() + " does not match model " + cfg.to_json().dump());
    }
    std::vector<std::string> loaded;
    for (Param *p : model.params.all()) {
        if (!is_backbone_param(p->name) || !ckpt.has(p->name)) continue;
        Tensor t = ckpt.tensor(p->name);
        if (p->name == "pos_embed" && t.shape() != p->value.shape()) {
            if (src.prefix() != cfg.prefix()) throw DataError("checkpoint class-token setting differs from model");
            t = resize_pos_embed(t, src.prefix(), src.grid(), cfg.grid());
        }
        if (t.shape() != p->value.shape()) {
            throw DataError("checkpoint tensor " + p->name + " has shape " + shape_str(t.shape()) + ", model expects " +
                            shape_str(p->value.shape()));
        }
        p->value = std::move(t);
        loaded.push_back(p->name);
    }
    return loaded;
}

void load_params(const Checkpoint &ckpt, ParamSet &params) {
    for (Param *p : params.all()) {
        if (!ckpt.has(p->name)) throw DataError("checkpoint is missing tensor " + p->name);
        const auto &t = ckpt.tensor(p->name);
        if (t.shape() != p->value.shape()) {
            throw DataError("checkpoint tensor " + p->name + " has shape " + shape_str(t.shape()) + ", expected " +
                            shape_str(p->value.shape()));
        }
        p->value = t;
    }
}

#define EVAX_INSTANTIATE_VIT(T)                                                                                      \
    template class Weights<T>;                                                                                       \
    template void bind(Weights<T> &, const ParamSet &, const TrainableFn &);                                        \
    template BasicTensor<T> extract_patches(const BasicTensor<T> &, std::int64_t);                                  \
    template TokenSequence<T> patchify(const ViTConfig &, const Weights<T> &, const BasicTensor<T> &);               \
    template TokenSequence<T> block_forward(const ViTConfig &, const Weights<T> &, std::int64_t,                    \
                                            const TokenSequence<T> &, BasicTensor<T> *);                            \
    template Features<T> forward_features(const ViTConfig &, const Weights<T> &, const TokenSequence<T> &,          \
                                          std::vector<BasicTensor<T>> *);                                           \
    template Var<T> mean_pool(const TokenSequence<T> &);

EVAX_INSTANTIATE_VIT(float)
EVAX_INSTANTIATE_VIT(double)

}  // namespace evax
