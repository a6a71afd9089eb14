#include "cases.hpp"

#include <algorithm>
#include <cmath>

namespace evax::testing {

const std::vector<OpId> &differentiable_ops() {
    static const std::vector<OpId> ops = {
        OpId::matmul,       OpId::add,         OpId::sub,
        OpId::mul,          OpId::scale,       OpId::linear,
        OpId::layer_norm,   OpId::softmax,     OpId::silu,
        OpId::gelu,         OpId::relu,        OpId::mean,
        OpId::sum,          OpId::conv2d,      OpId::conv_transpose2d,
        OpId::max_pool2d,   OpId::bilinear_resize_2d, OpId::adaptive_avg_pool2d,
        OpId::reshape,      OpId::transpose,   OpId::concat,
        OpId::slice,        OpId::dropout,     OpId::rope2d,
        OpId::gather_rows,  OpId::scatter_rows, OpId::cosine_loss,
        OpId::bce_with_logits, OpId::softmax_cross_entropy,
    };
    return ops;
}

TensorD random_tensor(Shape shape, CounterRng &rng, double lo, double hi) {
    TensorD t(std::move(shape));
    for (auto &v : t.values()) v = static_cast<float>(lo + (hi - lo) * rng.uniform_f64());
    return t;
}

namespace {

std::int64_t pick(CounterRng &rng, std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

// Values at least 0.05 away from zero.
TensorD away_from_zero(Shape shape, CounterRng &rng) {
    TensorD t(std::move(shape));
    for (auto &v : t.values()) {
        const double mag = 0.05 + 0.95 * rng.uniform_f64();
        v = static_cast<float>(rng.uniform() < 0.5f ? -mag : mag);
    }
    return t;
}

// Distinct values spaced 0.01 apart in random order.
TensorD distinct_values(Shape shape, CounterRng &rng) {
    TensorD t(std::move(shape));
    auto perm = permutation(t.numel(), rng);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(0.01 * static_cast<double>(perm[i]) - 0.5);
    return t;
}

}  // namespace

PrimitiveCase make_case(OpId op, std::uint64_t seed) {
    CounterRng rng(seed);
    PrimitiveCase c{op, {}, {}};
    auto &in = c.inputs;
    auto &at = c.attrs;
    const auto m = pick(rng, 1, 5), n = pick(rng, 1, 6);
    switch (op) {
        case OpId::matmul: {
            const auto k = pick(rng, 1, 6);
            in = {random_tensor({m, k}, rng), random_tensor({k, n}, rng)};
            break;
        }
        case OpId::add:
        case OpId::sub:
        case OpId::mul: {
            const auto form = rng.below(3);
            Shape b = form == 0 ? Shape{m, n} : form == 1 ? Shape{n} : Shape{m, 1};
            in = {random_tensor({m, n}, rng), random_tensor(b, rng)};
            if (rng.below(2) == 1) std::swap(in[0], in[1]);
            break;
        }
        case OpId::scale:
            in = {random_tensor({m, n}, rng)};
            at.alpha = -2.0 + 4.0 * rng.uniform_f64();
            break;
        case OpId::linear: {
            const auto k = pick(rng, 1, 6);
            in = {random_tensor({m, k}, rng), random_tensor({k, n}, rng), random_tensor({n}, rng)};
            break;
        }
        case OpId::layer_norm: {
            // Rows need a spread well above the probe step; a near-constant
            // row makes the normalization arbitrarily steep.
            const auto d = pick(rng, 3, 8);
            in = {distinct_values({m, d}, rng), random_tensor({d}, rng, 0.5, 1.5), random_tensor({d}, rng)};
            for (auto &v : in[0].values()) v *= 10.0;
            break;
        }
        case OpId::softmax:
            in = {random_tensor({m, n + 1}, rng, -2.0, 2.0)};
            break;
        case OpId::silu:
        case OpId::gelu:
            in = {random_tensor({m, n}, rng, -3.0, 3.0)};
            break;
        case OpId::relu:
            in = {away_from_zero({m, n}, rng)};
            break;
        case OpId::mean:
            in = {random_tensor({m, n, pick(rng, 1, 4)}, rng)};
            at.axis = static_cast<int>(rng.below(3));
            break;
        case OpId::sum:
            in = {random_tensor({m, n}, rng)};
            break;
        case OpId::conv2d: {
            const auto ci = pick(rng, 1, 3), co = pick(rng, 1, 3), k = pick(rng, 1, 3);
            at.stride = static_cast<int>(pick(rng, 1, 2));
            at.padding = static_cast<int>(pick(rng, 0, 1));
            const auto h = pick(rng, k, 7), w = pick(rng, k, 7);
            in = {random_tensor({ci, h, w}, rng), random_tensor({co, ci, k, k}, rng), random_tensor({co}, rng)};
            break;
        }
        case OpId::conv_transpose2d: {
            const auto ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
            at.stride = 2;
            in = {random_tensor({ci, pick(rng, 1, 4), pick(rng, 1, 4)}, rng), random_tensor({ci, co, 2, 2}, rng),
                  random_tensor({co}, rng)};
            break;
        }
        case OpId::max_pool2d:
            in = {distinct_values({pick(rng, 1, 3), 2 * pick(rng, 1, 3), 2 * pick(rng, 1, 3)}, rng)};
            break;
        case OpId::bilinear_resize_2d:
            in = {random_tensor({pick(rng, 1, 3), pick(rng, 1, 5), pick(rng, 1, 5)}, rng)};
            at.out_h = pick(rng, 1, 8);
            at.out_w = pick(rng, 1, 8);
            break;
        case OpId::adaptive_avg_pool2d:
            in = {random_tensor({pick(rng, 1, 3), pick(rng, 1, 7), pick(rng, 1, 7)}, rng)};
            at.out_h = pick(rng, 1, 6);
            at.out_w = pick(rng, 1, 6);
            break;
        case OpId::reshape:
            in = {random_tensor({m, n}, rng)};
            at.shape = {n, m};
            break;
        case OpId::transpose:
            in = {random_tensor({m, n}, rng)};
            break;
        case OpId::concat: {
            at.axis = static_cast<int>(rng.below(2));
            const auto parts = pick(rng, 1, 3);
            for (std::int64_t p = 0; p < parts; ++p) {
                const auto e = pick(rng, 1, 3);
                in.push_back(random_tensor(at.axis == 0 ? Shape{e, n} : Shape{m, e}, rng));
            }
            break;
        }
        case OpId::slice: {
            in = {random_tensor({m, n + 1}, rng)};
            at.axis = 1;
            at.begin = pick(rng, 0, n - 1);
            at.end = pick(rng, at.begin + 1, n + 1);
            break;
        }
        case OpId::dropout:
            in = {random_tensor({m, n}, rng)};
            at.p = 0.1 + 0.5 * rng.uniform_f64();
            at.rng = CounterRng(seed ^ 0xD0D0);
            break;
        case OpId::rope2d: {
            at.grid_h = pick(rng, 1, 3);
            at.grid_w = pick(rng, 1, 3);
            at.prefix = pick(rng, 0, 1);
            in = {random_tensor({at.prefix + at.grid_h * at.grid_w, 4 * pick(rng, 1, 3)}, rng)};
            break;
        }
        case OpId::gather_rows: {
            in = {random_tensor({m + 1, n}, rng)};
            const auto k = pick(rng, 1, m + 1);
            auto perm = permutation(m + 1, rng);
            at.indices.assign(perm.begin(), perm.begin() + k);
            break;
        }
        case OpId::scatter_rows: {
            const auto k = pick(rng, 1, m + 1);
            auto perm = permutation(m + 1, rng);
            at.indices.assign(perm.begin(), perm.begin() + k);
            std::sort(at.indices.begin(), at.indices.end());
            in = {random_tensor({m + 1, n}, rng), random_tensor({k, n}, rng)};
            break;
        }
        case OpId::cosine_loss:
            in = {random_tensor({m, n + 1}, rng), random_tensor({m, n + 1}, rng)};
            break;
        case OpId::bce_with_logits: {
            TensorD y({n});
            for (auto &v : y.values()) v = static_cast<double>(rng.below(2));
            in = {random_tensor({n}, rng, -3.0, 3.0), y};
            if (rng.below(2) == 1) {
                for (std::int64_t i = 0; i < n; ++i) at.weights.push_back(i == 0 ? 1.0 : rng.below(2));
            }
            break;
        }
        case OpId::softmax_cross_entropy: {
            const auto classes = pick(rng, 2, 4);
            if (rng.below(2) == 0) {
                in = {random_tensor({classes}, rng, -2.0, 2.0)};
                at.indices = {static_cast<std::int64_t>(rng.below(classes))};
            } else {
                const auto h = pick(rng, 1, 3), w = pick(rng, 1, 3);
                in = {random_tensor({classes, h, w}, rng, -2.0, 2.0)};
                for (std::int64_t p = 0; p < h * w; ++p) at.indices.push_back(static_cast<std::int64_t>(rng.below(classes)));
            }
            break;
        }
    }
    return c;
}

}  // namespace evax::testing

namespace evax::testing {

GradCheckReport param_grad_check(const ParamSet &params, const std::vector<std::string> &names,
                                 const std::function<VarD(const Weights<double> &)> &loss, int coords_per_tensor,
                                 std::uint64_t seed, double eps, bool piecewise) {
    Weights<double> base;
    bind<double>(base, params, nullptr);
    CounterRng rng(seed);
    GradCheckReport worst;
    std::int64_t total = 0, skipped = 0;
    for (const auto &name : names) {
        const auto point = params.at(name).value.cast<double>();
        auto order = permutation(point.numel(), rng);
        order.resize(static_cast<std::size_t>(std::min<std::int64_t>(coords_per_tensor, point.numel())));
        auto f = [&](const VarD &x) {
            Weights<double> w = base;
            w.set(name, x);
            return loss(w);
        };
        auto r = grad_check<double>(f, point, eps, order, piecewise);
        total += r.coordinates;
        skipped += r.skipped;
        if (r.max_rel_error >= worst.max_rel_error) worst = r;
    }
    worst.coordinates = total;
    worst.skipped = skipped;
    return worst;
}

void jitter_params(ParamSet &params, double sigma, std::uint64_t seed) {
    CounterRng rng(seed);
    for (Param *p : params.all())
        for (auto &v : p->value.values()) v = static_cast<float>(v + sigma * rng.normal());
}

}  // namespace evax::testing
