#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "evax/mim.hpp"
#include "evax/transfer.hpp"
#include "support/cases.hpp"

namespace evax {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string &name) {
    auto d = fs::temp_directory_path() / ("evax_transfer_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

ViTConfig small_cfg(std::int64_t d, std::int64_t depth, std::int64_t image) {
    ViTConfig c;
    c.embed_dim = d;
    c.heads = 2;
    c.depth = depth;
    c.image_size = image;
    c.validate();
    return c;
}

Tensor random_image(std::int64_t side, std::uint64_t seed) {
    CounterRng rng(seed);
    return testing::random_tensor({side, side}, rng, 0.0, 1.0).cast<float>();
}

Weights<float> frozen(const ParamSet &ps) {
    Weights<float> w;
    bind(w, ps, [](const Param &) { return false; });
    return w;
}

TEST(ClsForward, ZeroWeightGivesBias) {
    auto cfg = small_cfg(32, 1, 64);
    ViTModel m;
    build_vit(m, cfg, 1);
    add_cls_head(m.params, 32, 3, 1);
    m.params.at("head.weight").value.fill(0.0f);
    m.params.at("head.bias").value = Tensor::from({0.5f, -1.0f, 2.0f});
    auto w = frozen(m.params);
    for (std::uint64_t s = 1; s <= 3; ++s) {
        EXPECT_EQ(cls_forward(cfg, w, random_image(64, s)).value(), Tensor::from({0.5f, -1.0f, 2.0f}));
    }
}

TEST(ClsForward, ConstantFeatureStub) {
    auto cfg = small_cfg(32, 1, 64);
    ViTModel m;
    build_vit(m, cfg, 1);
    add_cls_head(m.params, 32, 1, 1);
    m.params.at("norm.weight").value.fill(0.0f);
    m.params.at("norm.bias").value.fill(0.25f);
    m.params.at("head.weight").value.fill(1.0f);
    m.params.at("head.bias").value.fill(-3.0f);
    auto logits = cls_forward(cfg, frozen(m.params), random_image(64, 2));
    EXPECT_NEAR(logits.value()[0], 32 * 0.25 - 3.0, 1e-5);
}

TEST(ClsForward, EvalIsBitwiseRepeatable) {
    auto cfg = small_cfg(32, 2, 64);
    ViTModel m;
    build_vit(m, cfg, 4);
    add_cls_head(m.params, 32, 2, 4);
    auto w = frozen(m.params);
    auto img = random_image(64, 3);
    EXPECT_EQ(cls_forward(cfg, w, img).value(), cls_forward(cfg, w, img).value());
}

TEST(ClsForward, HeadDimMismatch) {
    auto cfg = small_cfg(32, 1, 64);
    ViTModel m;
    build_vit(m, cfg, 1);
    add_cls_head(m.params, 16, 2, 1);
    EXPECT_THROW(cls_forward(cfg, frozen(m.params), random_image(64, 1)), ShapeError);
}

TEST(ClsLoss, ZeroLogitsMultiLabelIsLn2) {
    auto z = constant(Tensor(Shape{2}));
    for (auto labels : {std::vector<int>{0, 0}, {0, 1}, {1, 1}}) {
        EXPECT_NEAR(cls_loss(z, labels, ClsTask::multi_label).value().item(), std::log(2.0), 1e-7);
    }
}

TEST(ClsLoss, UniformSingleLabelIsLnC) {
    for (int c : {2, 3, 7}) {
        std::vector<int> labels(static_cast<std::size_t>(c));
        labels[1] = 1;
        EXPECT_NEAR(cls_loss(constant(Tensor(Shape{c}, 0.3f)), labels, ClsTask::single_label).value().item(),
                    std::log(static_cast<double>(c)), 1e-6);
    }
}

TEST(ClsLoss, ConfidentPredictionIsNearZero) {
    auto logits = constant(Tensor::from({20.0f, -20.0f}));
    EXPECT_LT(cls_loss(logits, {1, 0}, ClsTask::multi_label).value().item(), 1e-3);
    EXPECT_LT(cls_loss(logits, {1, 0}, ClsTask::single_label).value().item(), 1e-3);
}

TEST(ClsLoss, UncertainOrMalformedLabelsAreDataErrors) {
    auto logits = constant(Tensor(Shape{2}));
    EXPECT_THROW(cls_loss(logits, {-1, 1}, ClsTask::multi_label), DataError);
    EXPECT_THROW(cls_loss(logits, {1, 1}, ClsTask::single_label), DataError);
    EXPECT_THROW(cls_loss(logits, {1}, ClsTask::multi_label), DataError);
}

TEST(ClsLoss, BcePermutationInvariance) {
    CounterRng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const int k = 5;
        Tensor logits(Shape{k});
        std::vector<int> labels(k);
        std::vector<double> weights(k);
        for (int i = 0; i < k; ++i) {
            logits[i] = static_cast<float>(4.0 * rng.uniform_f64() - 2.0);
            labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(2));
            weights[static_cast<std::size_t>(i)] = rng.below(4) == 0 ? 0.0 : 1.0;
        }
        auto perm = seeded_permutation(k, static_cast<std::uint64_t>(trial));
        Tensor pl(Shape{k});
        std::vector<int> plab(k);
        std::vector<double> pw(k);
        for (int i = 0; i < k; ++i) {
            const auto j = static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]);
            pl[i] = logits[static_cast<std::int64_t>(j)];
            plab[static_cast<std::size_t>(i)] = labels[j];
            pw[static_cast<std::size_t>(i)] = weights[j];
        }
        EXPECT_NEAR(cls_loss(constant(logits), labels, ClsTask::multi_label, weights).value().item(),
                    cls_loss(constant(pl), plab, ClsTask::multi_label, pw).value().item(), 1e-6);
    }
}

TEST(Llrd, HalfDecayTwoBlocks) {
    ViTModel m;
    build_vit(m, small_cfg(32, 2, 64), 1);
    add_cls_head(m.params, 32, 2, 1);
    auto groups = llrd_groups(m.params, 2, 0.5);
    ASSERT_EQ(groups.size(), 4u);
    const double expect[] = {0.125, 0.25, 0.5, 1.0};
    for (std::size_t g = 0; g < 4; ++g) EXPECT_EQ(groups[g].lr_scale, expect[g]);
    EXPECT_EQ(groups[0].name, "embed");
    EXPECT_EQ(groups[3].name, "head");
    std::size_t total = 0;
    for (const auto &g : groups) total += g.params.size();
    EXPECT_EQ(total, m.params.size());
    for (const Param *p : groups[1].params) EXPECT_EQ(p->name.rfind("blocks.0.", 0), 0u);
}

TEST(Llrd, GeometricSequenceTwelveBlocks) {
    ViTModel m;
    build_vit(m, vit_preset("ti"), 1);
    add_cls_head(m.params, 192, 14, 1);
    for (double decay : {0.55, 0.85, 1.0}) {
        auto groups = llrd_groups(m.params, 12, decay);
        ASSERT_EQ(groups.size(), 14u);
        double s = 1.0;
        for (int g = 13; g >= 0; --g) {
            EXPECT_EQ(groups[static_cast<std::size_t>(g)].lr_scale, s);
            s *= decay;
        }
    }
    EXPECT_NEAR(llrd_groups(m.params, 12, 0.55)[0].lr_scale, 4.2e-4, 0.05e-4);
    EXPECT_THROW(llrd_groups(m.params, 12, 0.0), ConfigError);
    EXPECT_THROW(llrd_groups(m.params, 12, 1.5), ConfigError);
}

struct SegModel {
    ViTConfig vit;
    SegDecoderConfig dec;
    ParamSet params;
};

SegModel make_seg(std::int64_t d, std::int64_t image, std::int64_t channels, std::uint64_t seed, std::int64_t depth = 1) {
    SegModel s;
    s.vit = small_cfg(d, depth, image);
    s.dec.channels = channels;
    ViTModel m;
    build_vit(m, s.vit, seed);
    s.params = std::move(m.params);
    add_seg_decoder(s.params, d, s.dec, seed);
    return s;
}

TEST(Pyramid, StrideArithmetic) {
    for (auto [image, sizes] : {std::pair<std::int64_t, std::array<std::int64_t, 4>>{224, {56, 28, 14, 7}},
                                {512, {128, 64, 32, 16}}}) {
        auto s = make_seg(16, image, 8, 1, 0);
        auto w = frozen(s.params);
        auto pyr = build_pyramid(forward_features(s.vit, w, patchify(s.vit, w, random_image(image, 1))).out, w);
        for (int i = 0; i < 4; ++i) {
            EXPECT_EQ(pyr[static_cast<std::size_t>(i)].shape(), (Shape{16, sizes[static_cast<std::size_t>(i)],
                                                                       sizes[static_cast<std::size_t>(i)]}));
        }
    }
}

TEST(Pyramid, ZeroInputGivesZeroMaps) {
    auto s = make_seg(16, 64, 8, 1, 0);
    auto w = frozen(s.params);
    TokenSequence<float> zero{constant(Tensor(Shape{17, 16})), 4, 4, true, {}};
    for (const auto &m : build_pyramid(zero, w))
        for (float v : m.value().values()) EXPECT_EQ(v, 0.0f);
}

TEST(Pyramid, NonSquareGridRejected) {
    auto s = make_seg(16, 64, 8, 1, 0);
    TokenSequence<float> seq{constant(Tensor(Shape{9, 16})), 2, 4, true, {}};
    EXPECT_THROW(build_pyramid(seq, frozen(s.params)), ShapeError);
}

TEST(UperNet, OutputMatchesInputAndArgmaxIgnoresShift) {
    auto s = make_seg(16, 64, 8, 2);
    testing::jitter_params(s.params, 0.1, 3);
    auto w = frozen(s.params);
    auto logits = seg_forward(s.vit, s.dec, w, random_image(64, 5)).value();
    ASSERT_EQ(logits.shape(), (Shape{2, 64, 64}));
    auto shifted = logits;
    for (std::int64_t p = 0; p < 64 * 64; ++p) {
        const float c = static_cast<float>(p % 7) - 3.0f;
        shifted[p] += c;
        shifted[64 * 64 + p] += c;
    }
    EXPECT_EQ(predict_mask(logits), predict_mask(shifted));
}

class ClsGradient : public ::testing::TestWithParam<int> {};

TEST_P(ClsGradient, BackboneHeadLoss) {
    const auto seed = static_cast<std::uint64_t>(GetParam());
    auto cfg = small_cfg(32, 1, 64);
    ViTModel m;
    build_vit(m, cfg, seed);
    add_cls_head(m.params, 32, 3, seed);
    testing::jitter_params(m.params, 0.2, seed + 50);
    CounterRng rng(seed + 100);
    const auto img = testing::random_tensor({64, 64}, rng, 0, 1).cast<float>().cast<double>();
    const std::vector<int> labels = {1, 0, static_cast<int>(seed % 2)};
    auto loss = [&](const Weights<double> &w) { return cls_loss(cls_forward(cfg, w, img), labels, ClsTask::multi_label); };
    auto r = testing::param_grad_check(m.params,
                                       {"patch_embed.weight", "pos_embed", "blocks.0.attn.qkv.weight",
                                        "blocks.0.attn.proj.weight", "blocks.0.mlp.w_g.weight", "norm.weight",
                                        "head.weight", "head.bias"},
                                       loss, 4, seed);
    EXPECT_LT(r.max_rel_error, 1e-2) << "analytic " << r.analytic << " numeric " << r.numeric;
}

INSTANTIATE_TEST_SUITE_P(Seeds, ClsGradient, ::testing::Range(1, 21));

class SegGradient : public ::testing::TestWithParam<int> {};

TEST_P(SegGradient, PyramidUperNetCrossEntropy) {
    const auto seed = static_cast<std::uint64_t>(GetParam());
    auto s = make_seg(16, 128, 8, seed, 0);
    testing::jitter_params(s.params, 0.2, seed + 50);
    CounterRng rng(seed + 100);
    const auto tokens = testing::random_tensor({64, 16}, rng).cast<float>().cast<double>();
    std::vector<std::int64_t> targets(32 * 32);
    for (auto &t : targets) t = static_cast<std::int64_t>(rng.below(2));
    auto loss = [&](const Weights<double> &w) {
        TokenSequence<double> seq{add(slice(w("pos_embed"), 0, 1, 65), constant(tokens)), 8, 8, false, {}};
        return softmax_cross_entropy(upernet_forward(build_pyramid(seq, w), w, s.dec, 32, 32), targets);
    };
    auto r = testing::param_grad_check(s.params,
                                       {"pos_embed", "seg.fpn1.0.weight", "seg.fpn1.1.weight", "seg.fpn2.0.weight",
                                        "seg.ppm.2.weight", "seg.bottleneck.weight", "seg.lateral.0.weight",
                                        "seg.fpn_out.1.weight", "seg.cls.weight", "seg.cls.bias"},
                                       loss, 8, seed, 1e-3, true);
    EXPECT_LT(r.max_rel_error, 1e-2) << "analytic " << r.analytic << " numeric " << r.numeric;
    EXPECT_LE(r.skipped * 2, r.coordinates);
}

INSTANTIATE_TEST_SUITE_P(Seeds, SegGradient, ::testing::Range(1, 21));

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

struct ClsSetup {
    fs::path dir;
    FinetuneClsConfig cfg;
};

ClsSetup cls_setup(const std::string &name) {
    ClsSetup s;
    s.dir = temp_dir(name);
    SynthSpec sp;
    sp.count = 20;
    sp.image_size = 32;
    sp.train_fraction = 0.6;
    sp.val_fraction = 0.2;
    s.cfg.manifest = synth_corpus(sp, 2, s.dir / "data");
    s.cfg.preset = "micro";
    s.cfg.image_size = 32;
    s.cfg.epochs = 2;
    s.cfg.batch_size = 4;
    s.cfg.seed = 9;
    return s;
}

TEST(FinetuneCls, DeterministicAndReproducibleByEval) {
    auto s = cls_setup("det");
    auto a = finetune_cls(s.cfg, s.dir / "a");
    auto b = finetune_cls(s.cfg, s.dir / "b");
    EXPECT_EQ(slurp(s.dir / "a" / "reports" / "metrics.csv"), slurp(s.dir / "b" / "reports" / "metrics.csv"));
    EXPECT_EQ(slurp(a.checkpoint), slurp(b.checkpoint));
    EXPECT_EQ(a.final_split, "test");
    auto ev = eval_cls(a.checkpoint, s.cfg.manifest, Split::test);
    EXPECT_EQ(ev.accuracy, a.final_eval.accuracy);
    EXPECT_EQ(ev.mauc, a.final_eval.mauc);
    EXPECT_EQ(slurp(s.dir / "a" / "reports" / "metrics.csv").rfind("epoch,split,metric,value\n", 0), 0u);
}

TEST(FinetuneCls, ProjectionHeadIsDropped) {
    auto s = cls_setup("head");
    auto cfg = vit_preset("micro", 32);
    ViTModel m;
    build_vit(m, cfg, 3);
    add_projection_head(m.params, cfg.embed_dim, cfg.embed_dim, 3);
    save_checkpoint(model_checkpoint(cfg, m.params, {{"kind", "pretrain"}}), s.dir / "pre.ckpt");
    const auto before = slurp(s.dir / "pre.ckpt");
    s.cfg.ckpt = s.dir / "pre.ckpt";
    auto r = finetune_cls(s.cfg, s.dir / "run");
    auto ck = load_checkpoint(r.checkpoint);
    EXPECT_FALSE(ck.has("mim_head.weight"));
    EXPECT_TRUE(ck.has("head.weight"));
    EXPECT_EQ(slurp(s.dir / "pre.ckpt"), before);
}

TEST(FinetuneCls, ConfigErrorsNameTheKey) {
    auto s = cls_setup("cfg");
    s.cfg.dropout = 1.0;
    try {
        finetune_cls(s.cfg, s.dir / "run");
        FAIL();
    } catch (const ConfigError &e) {
        EXPECT_EQ(e.key(), "dropout");
    }
    s = cls_setup("cfg2");
    s.cfg.num_classes = 3;
    EXPECT_THROW(finetune_cls(s.cfg, s.dir / "run"), Error);
}

TEST(FinetuneSeg, DeterministicDice) {
    auto dir = temp_dir("seg");
    SynthSpec sp;
    sp.task = Task::seg;
    sp.count = 6;
    sp.image_size = 32;
    sp.train_fraction = 0.5;
    sp.val_fraction = 0.2;
    FinetuneSegConfig c;
    c.manifest = synth_corpus(sp, 3, dir / "data");
    c.preset = "micro";
    c.image_size = 32;
    c.iterations = 3;
    c.batch_size = 2;
    c.eval_every = 2;
    c.channels = 8;
    c.seed = 4;
    auto a = finetune_seg(c, dir / "a");
    auto b = finetune_seg(c, dir / "b");
    EXPECT_EQ(a.final_eval.dice, b.final_eval.dice);
    EXPECT_EQ(slurp(a.checkpoint), slurp(b.checkpoint));
    EXPECT_EQ(eval_seg(a.checkpoint, c.manifest, Split::test, dir / "pred").dice, a.final_eval.dice);
    EXPECT_TRUE(fs::exists(dir / "pred"));
}

}  // namespace
}  // namespace evax
