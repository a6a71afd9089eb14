#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "evax/tensor.hpp"

namespace evax {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;        // same shape as value once accumulated
    bool decay = true;  // false for biases, norms, embeddings
};

// Named parameters with stable addresses, kept in insertion order.
class ParamSet {
   public:
    Param &add(const std::string &name, Tensor value, bool decay);
    Param &at(const std::string &name);
    const Param &at(const std::string &name) const;
    bool has(const std::string &name) const { return index_.count(name) != 0; }
    std::vector<Param *> all();
    std::vector<const Param *> all() const;
    std::int64_t count() const;  // total scalar parameters
    std::size_t size() const { return items_.size(); }

   private:
    std::vector<std::unique_ptr<Param>> items_;
    std::map<std::string, std::size_t> index_;
};

// Weight decay applies to a parameter only when both the group flag and the
// parameter's own flag are set.
struct ParamGroup {
    std::string name;
    std::vector<Param *> params;
    double lr_scale = 1.0;
    bool weight_decay_enabled = true;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

struct AdamWState {
    std::int64_t step = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

// One AdamW update with bias correction and decoupled decay, in the PyTorch
// order: theta -= lr*wd*theta, then theta -= lr * m_hat / (sqrt(v_hat) + eps).
// `lr` is the already-scheduled base rate; each group multiplies its lr_scale.
void adamw_step(const std::vector<ParamGroup> &groups, AdamWState &state, double lr, const AdamWConfig &cfg);

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, double min_lr);

void zero_grads(const std::vector<ParamGroup> &groups);

}  // namespace evax
