#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "evax/gradcheck.hpp"
#include "evax/ops.hpp"
#include "evax/vit.hpp"

namespace evax::testing {

struct PrimitiveCase {
    OpId op;
    std::vector<TensorD> inputs;
    OpAttrs attrs;
};

// Every primitive with a gradient, in declaration order.
const std::vector<OpId> &differentiable_ops();

// Random shapes and f32-representable values for one op. Inputs are kept away
// from kinks (relu at 0, max-pool ties) by more than the probe step.
PrimitiveCase make_case(OpId op, std::uint64_t seed);

TensorD random_tensor(Shape shape, CounterRng &rng, double lo = -1.0, double hi = 1.0);


// Central-difference check of d loss / d param on `coords_per_tensor` random
// coordinates of each named tensor; every other parameter stays constant.
// Returns the worst report across tensors; `piecewise` skips probes that
// cross a relu or max-pool kink.
GradCheckReport param_grad_check(const ParamSet &params, const std::vector<std::string> &names,
                                 const std::function<VarD(const Weights<double> &)> &loss, int coords_per_tensor,
                                 std::uint64_t seed, double eps = 1e-3, bool piecewise = false);

// Adds N(0, sigma) to every parameter so checks run away from the symmetric
// initialization (unit gains, zero biases).
void jitter_params(ParamSet &params, double sigma, std::uint64_t seed);

}  // namespace evax::testing
