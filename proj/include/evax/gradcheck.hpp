#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "evax/autograd.hpp"

namespace evax {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    std::int64_t coordinates = 0;
    std::int64_t skipped = 0;  // piecewise mode: probes that changed branch
};

// Hash of the branch taken by every relu (input sign) and max-pool window
// (argmax) on the tape below `root`.
template <typename T>
std::uint64_t branch_signature(const Var<T> &root);

// Compares the reverse-mode gradient of a scalar function against central
// differences (f(x+eps) - f(x-eps)) / (2 eps), coordinate by coordinate.
// Relative error is |analytic - numeric| / max(1e-6, |numeric|).
// `coords` restricts the finite differences to a subset of flat indices. In
// piecewise mode a coordinate whose probes change the branch signature is
// skipped: the difference quotient straddles a kink there.
template <typename T>
GradCheckReport grad_check(const std::function<Var<T>(const Var<T> &)> &f, const BasicTensor<T> &point,
                           double eps, const std::vector<std::int64_t> &coords = {}, bool piecewise = false);

// Checks every differentiable input of one primitive. The scalar objective is
// sum(op(inputs) * probe) for a fixed random probe, so ops whose outputs sum to
// a constant (softmax) still get a non-trivial check.
GradCheckReport primitive_grad_check(OpId op, const std::vector<TensorD> &inputs, const OpAttrs &attrs,
                                     double eps, std::uint64_t probe_seed);

}  // namespace evax
