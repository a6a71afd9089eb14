#include "evax/optim.hpp"

#include <cmath>
#include <numbers>

namespace evax {

Param &ParamSet::add(const std::string &name, Tensor value, bool decay) {
    if (index_.count(name)) throw ConfigError(name, "duplicate parameter name " + name);
    index_[name] = items_.size();
    items_.push_back(std::make_unique<Param>(Param{name, std::move(value), Tensor(), decay}));
    return *items_.back();
}

Param &ParamSet::at(const std::string &name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("no parameter named " + name);
    return *items_[it->second];
}

const Param &ParamSet::at(const std::string &name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("no parameter named " + name);
    return *items_[it->second];
}

std::vector<Param *> ParamSet::all() {
    std::vector<Param *> out;
    for (auto &p : items_) out.push_back(p.get());
    return out;
}

std::vector<const Param *> ParamSet::all() const {
    std::vector<const Param *> out;
    for (const auto &p : items_) out.push_back(p.get());
    return out;
}

std::int64_t ParamSet::count() const {
    std::int64_t n = 0;
    for (const auto &p : items_) n += p->value.numel();
    return n;
}

void adamw_step(const std::vector<ParamGroup> &groups, AdamWState &state, double lr, const AdamWConfig &cfg) {
    for (const auto &g : groups) {
        if (!(g.lr_scale > 0)) throw ConfigError("lr_scale", "param group " + g.name + " needs lr_scale > 0");
        for (const Param *p : g.params) {
            if (!p->grad.empty() && p->grad.shape() != p->value.shape()) {
                throw ShapeError("adamw_step: gradient " + shape_str(p->grad.shape()) + " does not match parameter " +
                                 p->name + " " + shape_str(p->value.shape()));
            }
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (const auto &g : groups) {
        const double glr = lr * g.lr_scale;
        for (Param *p : g.params) {
            auto &m = state.m[p->name];
            auto &v = state.v[p->name];
            if (m.empty()) {
                m = Tensor(p->value.shape());
                v = Tensor(p->value.shape());
            }
            const bool decay = g.weight_decay_enabled && p->decay && cfg.weight_decay != 0.0;
            const bool has_grad = !p->grad.empty();
            float *theta = p->value.data();
            float *mm = m.data();
            float *vv = v.data();
            for (std::int64_t i = 0; i < p->value.numel(); ++i) {
                const double grad = has_grad ? p->grad[i] : 0.0;
                double th = theta[i];
                if (decay) th -= glr * cfg.weight_decay * th;
                const double mi = cfg.beta1 * mm[i] + (1.0 - cfg.beta1) * grad;
                const double vi = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * grad * grad;
                mm[i] = static_cast<float>(mi);
                vv[i] = static_cast<float>(vi);
                th -= glr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
                theta[i] = static_cast<float>(th);
            }
            require_finite(p->value, p->name.c_str());
        }
    }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, double min_lr) {
    if (total_steps <= 0) throw ConfigError("total_steps", "cosine_lr: total_steps must be positive");
    if (step < 0 || step > total_steps) {
        throw ConfigError("step", "cosine_lr: step " + std::to_string(step) + " outside [0, " +
                                      std::to_string(total_steps) + "]");
    }
    if (step == total_steps) return min_lr;
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return min_lr + (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
}

void zero_grads(const std::vector<ParamGroup> &groups) {
    for (const auto &g : groups)
        for (Param *p : g.params) p->grad = Tensor();
}

}  // namespace evax
