#include "evax/gradcheck.hpp"

#include <cmath>
#include <string>
#include <unordered_set>

namespace evax {

template <typename T>
std::uint64_t branch_signature(const Var<T> &root) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) {
        h ^= v;
        h *= 1099511628211ULL;
    };
    std::unordered_set<const Node<T> *> seen;
    std::vector<const Node<T> *> stack = {root.node().get()};
    while (!stack.empty()) {
        const Node<T> *n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        if (n->is_op && n->op == OpId::relu) {
            for (T v : n->parents[0]->value.values()) mix(v > T(0) ? 1 : 0);
        } else if (n->is_op && n->op == OpId::max_pool2d) {
            const auto &x = n->parents[0]->value;
            for (std::int64_t c = 0; c < x.dim(0); ++c)
                for (std::int64_t i = 0; i + 1 < x.dim(1); i += 2)
                    for (std::int64_t j = 0; j + 1 < x.dim(2); j += 2) {
                        std::uint64_t best = 0;
                        T bv = x.at(c, i, j);
                        for (std::uint64_t k = 1; k < 4; ++k) {
                            const T v = x.at(c, i + static_cast<std::int64_t>(k / 2), j + static_cast<std::int64_t>(k % 2));
                            if (v > bv) bv = v, best = k;
                        }
                        mix(best);
                    }
        }
        for (const auto &p : n->parents) stack.push_back(p.get());
    }
    return h;
}

template <typename T>
GradCheckReport grad_check(const std::function<Var<T>(const Var<T> &)> &f, const BasicTensor<T> &point,
                           double eps, const std::vector<std::int64_t> &coords, bool piecewise) {
    if (!(eps >= 1e-4 && eps <= 1e-2)) {
        throw ShapeError("grad_check: eps must lie in [1e-4, 1e-2], got " + std::to_string(eps));
    }
    auto x = variable(point);
    auto y = f(x);
    if (y.value().numel() != 1) throw ShapeError("grad_check: function must be scalar-valued");
    backward(y);
    const auto analytic = x.grad();
    const auto base_branch = piecewise ? branch_signature(y) : 0;
    auto eval = [&](const BasicTensor<T> &p, bool &same_branch) {
        if (!piecewise) return static_cast<double>(f(constant(p)).value().item());
        auto v = f(variable(p));
        same_branch = same_branch && branch_signature(v) == base_branch;
        return static_cast<double>(v.value().item());
    };

    GradCheckReport report;
    std::vector<std::int64_t> idx = coords;
    if (idx.empty()) {
        idx.resize(static_cast<std::size_t>(point.numel()));
        for (std::int64_t i = 0; i < point.numel(); ++i) idx[static_cast<std::size_t>(i)] = i;
    }
    report.coordinates = static_cast<std::int64_t>(idx.size());
    BasicTensor<T> probe = point;
    for (const auto i : idx) {
        if (i < 0 || i >= point.numel()) throw ShapeError("grad_check: coordinate out of range");
        const T orig = probe[i];
        probe[i] = static_cast<T>(orig + eps);
        bool same_branch = true;
        const double fp = eval(probe, same_branch);
        probe[i] = static_cast<T>(orig - eps);
        const double fm = eval(probe, same_branch);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericalError("grad_check: non-finite function value at coordinate " + std::to_string(i));
        }
        if (!same_branch) {
            ++report.skipped;
            continue;
        }
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic[i];
        const double rel = std::abs(a - numeric) / std::max(1e-6, std::abs(numeric));
        if (rel > report.max_rel_error || report.worst_index < 0) {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    return report;
}

GradCheckReport primitive_grad_check(OpId op, const std::vector<TensorD> &inputs, const OpAttrs &attrs,
                                     double eps, std::uint64_t probe_seed) {
    const auto out = primitive_forward<double>(op, TensorList<double>(inputs), attrs);
    CounterRng rng(probe_seed);
    TensorD probe(out.shape());
    for (auto &v : probe.values()) v = static_cast<float>(rng.uniform() * 2.0 - 1.0);

    GradCheckReport worst;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!input_differentiable(op, i)) continue;
        auto f = [&](const VarD &x) {
            std::vector<VarD> args;
            for (std::size_t j = 0; j < inputs.size(); ++j) args.push_back(j == i ? x : constant(inputs[j]));
            return sum(mul(apply<double>(op, args, attrs), constant(probe)));
        };
        auto r = grad_check<double>(f, inputs[i], eps);
        if (r.max_rel_error >= worst.max_rel_error) {
            const auto coords = worst.coordinates + r.coordinates;
            worst = r;
            worst.coordinates = coords;
        } else {
            worst.coordinates += r.coordinates;
        }
    }
    return worst;
}

template GradCheckReport grad_check(const std::function<Var<float>(const Var<float> &)> &, const Tensor &, double,
                                    const std::vector<std::int64_t> &, bool);
template GradCheckReport grad_check(const std::function<Var<double>(const Var<double> &)> &, const TensorD &,
                                    double, const std::vector<std::int64_t> &, bool);
template std::uint64_t branch_signature(const Var<float> &);
template std::uint64_t branch_signature(const Var<double> &);

}  // namespace evax
