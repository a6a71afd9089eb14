#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <numeric>

#include "evax/autograd.hpp"
#include "evax/gradcheck.hpp"
#include "support/cases.hpp"

namespace evax {
namespace {

Tensor fwd(OpId op, std::vector<Tensor> in, OpAttrs at = {}) {
    return primitive_forward<float>(op, TensorList<float>(in), at);
}

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<float>(5)), ShapeError);
    EXPECT_THROW(Tensor(Shape{0, 3}), ShapeError);
    Tensor t(Shape{2, 3}, 1.5f);
    EXPECT_EQ(t.numel(), 6);
    EXPECT_EQ(t.at(1, 2), 1.5f);
}

TEST(Ops, SoftmaxOfZerosIsUniform) {
    auto y = fwd(OpId::softmax, {Tensor::from({0, 0, 0})});
    for (float v : y.values()) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-7);
}

TEST(Ops, SiluAtZero) { EXPECT_EQ(fwd(OpId::silu, {Tensor::from({0})})[0], 0.0f); }

TEST(Ops, LayerNormOfConstantIsZero) {
    Tensor x(Shape{1, 5}, 3.0f);
    auto y = fwd(OpId::layer_norm, {x, Tensor(Shape{5}, 1.0f), Tensor(Shape{5})});
    for (float v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Ops, SoftmaxRowsAreDistributions) {
    CounterRng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x(Shape{3, 7});
        for (auto &v : x.values()) v = 10.0f * (rng.uniform() - 0.5f);
        auto y = fwd(OpId::softmax, {x});
        for (int r = 0; r < 3; ++r) {
            double s = 0;
            for (int j = 0; j < 7; ++j) {
                EXPECT_GE(y.at(r, j), 0.0f);
                s += y.at(r, j);
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Ops, LayerNormMoments) {
    CounterRng rng(5);
    Tensor x(Shape{4, 16});
    for (auto &v : x.values()) v = 3.0f * rng.uniform() + 2.0f;
    auto y = fwd(OpId::layer_norm, {x, Tensor(Shape{16}, 1.0f), Tensor(Shape{16})});
    for (int r = 0; r < 4; ++r) {
        double mean = 0, var = 0;
        for (int j = 0; j < 16; ++j) mean += y.at(r, j);
        mean /= 16;
        for (int j = 0; j < 16; ++j) var += (y.at(r, j) - mean) * (y.at(r, j) - mean);
        var /= 16;
        EXPECT_LT(std::abs(mean), 1e-5);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(Ops, MulBackwardIsProductRule) {
    std::vector<Tensor> in = {Tensor::from({2, -3}), Tensor::from({5, 7})};
    auto g = Tensor::from({1, 10});
    auto grads = primitive_backward<float>(OpId::mul, TensorList<float>(in), Tensor(), g, {});
    EXPECT_EQ(grads[0], Tensor::from({5, 70}));
    EXPECT_EQ(grads[1], Tensor::from({2, -30}));
}

TEST(Ops, ReluBackwardDeadRegion) {
    std::vector<Tensor> in = {Tensor::from({-1, 2})};
    auto grads = primitive_backward<float>(OpId::relu, TensorList<float>(in), Tensor(), Tensor::from({4, 4}), {});
    EXPECT_EQ(grads[0], Tensor::from({0, 4}));
}

TEST(Ops, LinearBiasGradSumsOverBatch) {
    CounterRng rng(9);
    Tensor x(Shape{3, 2}), w(Shape{2, 4}), b(Shape{4}), g(Shape{3, 4});
    for (auto *t : {&x, &w, &b, &g})
        for (auto &v : t->values()) v = rng.uniform();
    std::vector<Tensor> in = {x, w, b};
    auto grads = primitive_backward<float>(OpId::linear, TensorList<float>(in), Tensor(), g, {});
    for (int j = 0; j < 4; ++j) EXPECT_FLOAT_EQ(grads[2][j], g.at(0, j) + g.at(1, j) + g.at(2, j));
}

TEST(Ops, DropoutScalesKeptValues) {
    Tensor x(Shape{1000}, 1.0f);
    OpAttrs at;
    at.p = 0.25;
    at.rng = CounterRng(1);
    auto y = fwd(OpId::dropout, {x}, at);
    int kept = 0;
    for (float v : y.values()) {
        if (v != 0.0f) {
            EXPECT_FLOAT_EQ(v, 1.0f / 0.75f);
            ++kept;
        }
    }
    EXPECT_NEAR(kept, 750, 60);
}

TEST(Ops, ErrorsNameOpAndShapes) {
    try {
        fwd(OpId::matmul, {Tensor(Shape{2, 3}), Tensor(Shape{4, 5})});
        FAIL();
    } catch (const ShapeError &e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[4,5]"), std::string::npos);
    }
}

TEST(Ops, NonFiniteOutputIsNumericalError) {
    Tensor x = Tensor::from({1e30f});
    OpAttrs at;
    at.alpha = 1e30;
    EXPECT_THROW(fwd(OpId::scale, {x}, at), NumericalError);
}

TEST(Ops, GradientForTargetInputIsAnError) {
    std::vector<Tensor> in = {Tensor::from({0.5f}), Tensor::from({1})};
    EXPECT_THROW(primitive_gradient<float>(OpId::bce_with_logits, TensorList<float>(in), Tensor::from({1}), {}, 1),
                 ShapeError);
}

TEST(Ops, BilinearAlignCorners) {
    Tensor x(Shape{1, 2, 2}, std::vector<float>{0, 2, 4, 6});
    OpAttrs at;
    at.out_h = 3;
    at.out_w = 3;
    auto y = fwd(OpId::bilinear_resize_2d, {x}, at);
    for (int i = 0; i < 9; ++i) EXPECT_FLOAT_EQ(y[i], static_cast<float>(i / 3 * 2 + i % 3));
}

TEST(Ops, ConvMatchesDirectLoop) {
    CounterRng rng(12);
    Tensor x(Shape{2, 6, 5}), w(Shape{3, 2, 3, 3}), b(Shape{3});
    for (auto *t : {&x, &w, &b})
        for (auto &v : t->values()) v = rng.uniform() - 0.5f;
    OpAttrs at;
    at.stride = 2;
    at.padding = 1;
    auto y = fwd(OpId::conv2d, {x, w, b}, at);
    ASSERT_EQ(y.shape(), (Shape{3, 3, 3}));
    for (int o = 0; o < 3; ++o)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double acc = b[o];
                for (int c = 0; c < 2; ++c)
                    for (int p = 0; p < 3; ++p)
                        for (int q = 0; q < 3; ++q) {
                            int yi = 2 * i - 1 + p, xj = 2 * j - 1 + q;
                            if (yi < 0 || yi >= 6 || xj < 0 || xj >= 5) continue;
                            acc += w[((o * 2 + c) * 3 + p) * 3 + q] * x.at(c, yi, xj);
                        }
                EXPECT_NEAR(y.at(o, i, j), acc, 1e-5);
            }
}

TEST(Ops, TransposedConvUpsamplesByTwo) {
    Tensor x(Shape{1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    Tensor w(Shape{1, 1, 2, 2}, 1.0f);
    OpAttrs at;
    at.stride = 2;
    auto y = fwd(OpId::conv_transpose2d, {x, w}, at);
    ASSERT_EQ(y.shape(), (Shape{1, 4, 4}));
    EXPECT_EQ(y.at(0, 0, 1), 1.0f);
    EXPECT_EQ(y.at(0, 3, 3), 4.0f);
    EXPECT_EQ(y.at(0, 1, 2), 2.0f);
}

TEST(GradCheck, QuadraticIsExact) {
    auto f = [](const VarD &x) { return sum(mul(x, x)); };
    auto r = grad_check<double>(f, TensorD::from({3.0}), 1e-3);
    EXPECT_NEAR(r.analytic, 6.0, 1e-6);
    EXPECT_NEAR(r.numeric, 6.0, 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, RejectsEpsOutsideRange) {
    auto f = [](const VarD &x) { return sum(x); };
    EXPECT_THROW(grad_check<double>(f, TensorD::from({1.0}), 1e-1), ShapeError);
}

class PrimitiveGradients : public ::testing::TestWithParam<OpId> {};

TEST_P(PrimitiveGradients, TwentySeeds) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto c = testing::make_case(GetParam(), seed * 7919);
        auto r = primitive_grad_check(c.op, c.inputs, c.attrs, 1e-3, seed);
        EXPECT_LT(r.max_rel_error, 1e-2) << op_name(c.op) << " seed " << seed << " coordinate " << r.worst_index
                                         << " analytic " << r.analytic << " numeric " << r.numeric;
    }
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGradients, ::testing::ValuesIn(testing::differentiable_ops()),
                         [](const auto &info) { return std::string(op_name(info.param)); });

TEST(Autograd, SharedSubexpressionAccumulates) {
    auto x = variable(Tensor::from({2.0f}));
    auto y = mul(x, x);
    auto z = sum(add(y, x));
    backward(z);
    EXPECT_FLOAT_EQ(x.grad()[0], 5.0f);
}

TEST(Autograd, ConstantsReceiveNoGradient) {
    auto x = variable(Tensor::from({1.0f, 2.0f}));
    auto c = constant(Tensor::from({3.0f, 4.0f}));
    backward(sum(mul(x, c)));
    EXPECT_FALSE(c.has_grad());
    EXPECT_EQ(x.grad(), Tensor::from({3.0f, 4.0f}));
}

TEST(Rng, PermutationBasics) {
    EXPECT_EQ(seeded_permutation(1, 5), std::vector<std::int64_t>{0});
    EXPECT_EQ(seeded_permutation(50, 5), seeded_permutation(50, 5));
    auto p = seeded_permutation(100, 3);
    std::sort(p.begin(), p.end());
    std::vector<std::int64_t> id(100);
    std::iota(id.begin(), id.end(), 0);
    EXPECT_EQ(p, id);
}

TEST(Rng, FirstElementUniformOverSeeds) {
    const int n = 10000, seeds = 10000, bins = 20;
    std::vector<double> hist(bins);
    for (int s = 0; s < seeds; ++s) hist[seeded_permutation(n, s)[0] * bins / n] += 1;
    double chi2 = 0;
    const double expect = static_cast<double>(seeds) / bins;
    for (double h : hist) chi2 += (h - expect) * (h - expect) / expect;
    boost::math::chi_squared dist(bins - 1);
    EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01);
}

TEST(Rng, ForkedStreamsDiffer) {
    CounterRng a(7, CounterRng::Stream::init), b(7, CounterRng::Stream::mask);
    EXPECT_NE(a.next_u64(), b.next_u64());
    CounterRng c(7, CounterRng::Stream::init);
    c.next_u64();
    EXPECT_EQ(CounterRng(7, CounterRng::Stream::init).fork(3).next_u64(), c.fork(3).next_u64());
}

}  // namespace
}  // namespace evax
