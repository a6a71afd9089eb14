#include "evax/autograd.hpp"

#include <unordered_set>

namespace evax {

template <typename T>
BasicTensor<T> Var<T>::grad() const {
    if (node_->grad.empty()) return BasicTensor<T>(node_->value.shape());
    return node_->grad;
}

template <typename T>
Var<T> constant(BasicTensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var<T>(std::move(n));
}

template <typename T>
Var<T> variable(BasicTensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var<T>(std::move(n));
}

template <typename T>
Var<T> apply(OpId op, const std::vector<Var<T>> &inputs, OpAttrs attrs) {
    std::vector<const BasicTensor<T> *> ptrs;
    ptrs.reserve(inputs.size());
    for (const auto &v : inputs) ptrs.push_back(&v.value());
    auto n = std::make_shared<Node<T>>();
    n->value = primitive_forward(op, TensorList<T>(std::move(ptrs)), attrs);
    for (const auto &v : inputs) n->requires_grad = n->requires_grad || v.requires_grad();
    if (n->requires_grad) {
        n->is_op = true;
        n->op = op;
        n->attrs = std::move(attrs);
        n->parents.reserve(inputs.size());
        for (const auto &v : inputs) n->parents.push_back(v.node());
    }
    return Var<T>(std::move(n));
}

template <typename T>
void backward(const Var<T> &root) {
    if (root.value().numel() != 1) {
        throw ShapeError("backward: root must be a single value, got " + shape_str(root.shape()));
    }
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order over grad-requiring nodes.
    std::vector<Node<T> *> order;
    std::unordered_set<Node<T> *> seen;
    std::vector<std::pair<Node<T> *, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto &[node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T> *p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad = BasicTensor<T>(root.shape(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T> *n = *it;
        if (!n->is_op || n->grad.empty()) continue;
        std::vector<const BasicTensor<T> *> ptrs;
        ptrs.reserve(n->parents.size());
        for (const auto &p : n->parents) ptrs.push_back(&p->value);
        auto grads = primitive_backward(n->op, TensorList<T>(std::move(ptrs)), n->value, n->grad, n->attrs);
        for (std::size_t i = 0; i < n->parents.size(); ++i) {
            Node<T> *p = n->parents[i].get();
            if (!p->requires_grad || grads[i].empty()) continue;
            if (p->grad.empty()) {
                p->grad = std::move(grads[i]);
            } else {
                auto &acc = p->grad.storage();
                const auto &g = grads[i].storage();
                for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
            }
        }
    }
}

template <typename T>
Var<T> matmul(const Var<T> &a, const Var<T> &b) {
    return apply<T>(OpId::matmul, {a, b});
}
template <typename T>
Var<T> add(const Var<T> &a, const Var<T> &b) {
    return apply<T>(OpId::add, {a, b});
}
template <typename T>
Var<T> sub(const Var<T> &a, const Var<T> &b) {
    return apply<T>(OpId::sub, {a, b});
}
template <typename T>
Var<T> mul(const Var<T> &a, const Var<T> &b) {
    return apply<T>(OpId::mul, {a, b});
}
template <typename T>
Var<T> scale(const Var<T> &x, double alpha) {
    OpAttrs at;
    at.alpha = alpha;
    return apply<T>(OpId::scale, {x}, std::move(at));
}
template <typename T>
Var<T> linear(const Var<T> &x, const Var<T> &w, const Var<T> &b) {
    if (b.valid()) return apply<T>(OpId::linear, {x, w, b});
    return apply<T>(OpId::linear, {x, w});
}
template <typename T>
Var<T> layer_norm(const Var<T> &x, const Var<T> &gain, const Var<T> &bias) {
    OpAttrs at;
    at.eps = kLayerNormEps;
    return apply<T>(OpId::layer_norm, {x, gain, bias}, std::move(at));
}
template <typename T>
Var<T> softmax(const Var<T> &x) {
    return apply<T>(OpId::softmax, {x});
}
template <typename T>
Var<T> silu(const Var<T> &x) {
    return apply<T>(OpId::silu, {x});
}
template <typename T>
Var<T> gelu(const Var<T> &x) {
    return apply<T>(OpId::gelu, {x});
}
template <typename T>
Var<T> relu(const Var<T> &x) {
    return apply<T>(OpId::relu, {x});
}
template <typename T>
Var<T> mean(const Var<T> &x, int axis) {
    OpAttrs at;
    at.axis = axis;
    return apply<T>(OpId::mean, {x}, std::move(at));
}
template <typename T>
Var<T> sum(const Var<T> &x) {
    return apply<T>(OpId::sum, {x});
}
template <typename T>
Var<T> conv2d(const Var<T> &x, const Var<T> &w, const Var<T> &b, int stride, int padding) {
    OpAttrs at;
    at.stride = stride;
    at.padding = padding;
    if (b.valid()) return apply<T>(OpId::conv2d, {x, w, b}, std::move(at));
    return apply<T>(OpId::conv2d, {x, w}, std::move(at));
}
template <typename T>
Var<T> conv_transpose2d(const Var<T> &x, const Var<T> &w, const Var<T> &b, int stride) {
    OpAttrs at;
    at.stride = stride;
    if (b.valid()) return apply<T>(OpId::conv_transpose2d, {x, w, b}, std::move(at));
    return apply<T>(OpId::conv_transpose2d, {x, w}, std::move(at));
}
template <typename T>
Var<T> max_pool2d(const Var<T> &x) {
    return apply<T>(OpId::max_pool2d, {x});
}
template <typename T>
Var<T> resize_bilinear(const Var<T> &x, std::int64_t out_h, std::int64_t out_w) {
    OpAttrs at;
    at.out_h = out_h;
    at.out_w = out_w;
    return apply<T>(OpId::bilinear_resize_2d, {x}, std::move(at));
}
template <typename T>
Var<T> adaptive_avg_pool2d(const Var<T> &x, std::int64_t out_h, std::int64_t out_w) {
    OpAttrs at;
    at.out_h = out_h;
    at.out_w = out_w;
    return apply<T>(OpId::adaptive_avg_pool2d, {x}, std::move(at));
}
template <typename T>
Var<T> reshape(const Var<T> &x, Shape shape) {
    OpAttrs at;
    at.shape = std::move(shape);
    return apply<T>(OpId::reshape, {x}, std::move(at));
}
template <typename T>
Var<T> transpose(const Var<T> &x) {
    return apply<T>(OpId::transpose, {x});
}
template <typename T>
Var<T> concat(const std::vector<Var<T>> &xs, int axis) {
    OpAttrs at;
    at.axis = axis;
    return apply<T>(OpId::concat, xs, std::move(at));
}
template <typename T>
Var<T> slice(const Var<T> &x, int axis, std::int64_t begin, std::int64_t end) {
    OpAttrs at;
    at.axis = axis;
    at.begin = begin;
    at.end = end;
    return apply<T>(OpId::slice, {x}, std::move(at));
}
template <typename T>
Var<T> dropout(const Var<T> &x, double p, const CounterRng &rng) {
    if (p <= 0) return x;
    OpAttrs at;
    at.p = p;
    at.rng = rng;
    return apply<T>(OpId::dropout, {x}, std::move(at));
}
template <typename T>
Var<T> rope2d(const Var<T> &x, std::int64_t grid_h, std::int64_t grid_w, std::int64_t prefix,
              std::vector<std::int64_t> positions) {
    OpAttrs at;
    at.indices = std::move(positions);
    at.grid_h = grid_h;
    at.grid_w = grid_w;
    at.prefix = prefix;
    return apply<T>(OpId::rope2d, {x}, std::move(at));
}
template <typename T>
Var<T> gather_rows(const Var<T> &x, std::vector<std::int64_t> rows) {
    OpAttrs at;
    at.indices = std::move(rows);
    return apply<T>(OpId::gather_rows, {x}, std::move(at));
}
template <typename T>
Var<T> scatter_rows(const Var<T> &x, const Var<T> &fill, std::vector<std::int64_t> rows) {
    OpAttrs at;
    at.indices = std::move(rows);
    return apply<T>(OpId::scatter_rows, {x, fill}, std::move(at));
}
template <typename T>
Var<T> cosine_loss(const Var<T> &a, const Var<T> &b) {
    return apply<T>(OpId::cosine_loss, {a, b});
}
template <typename T>
Var<T> bce_with_logits(const Var<T> &logits, const Var<T> &targets, std::vector<double> weights) {
    OpAttrs at;
    at.weights = std::move(weights);
    return apply<T>(OpId::bce_with_logits, {logits, targets}, std::move(at));
}
template <typename T>
Var<T> softmax_cross_entropy(const Var<T> &logits, std::vector<std::int64_t> targets) {
    OpAttrs at;
    at.indices = std::move(targets);
    return apply<T>(OpId::softmax_cross_entropy, {logits}, std::move(at));
}

#define EVAX_INSTANTIATE_AUTOGRAD(T)                                                                      \
    template class Var<T>;                                                                                \
    template Var<T> constant(BasicTensor<T>);                                                             \
    template Var<T> variable(BasicTensor<T>);                                                             \
    template Var<T> apply(OpId, const std::vector<Var<T>> &, OpAttrs);                                    \
    template void backward(const Var<T> &);                                                               \
    template Var<T> matmul(const Var<T> &, const Var<T> &);                                               \
    template Var<T> add(const Var<T> &, const Var<T> &);                                                  \
    template Var<T> sub(const Var<T> &, const Var<T> &);                                                  \
    template Var<T> mul(const Var<T> &, const Var<T> &);                                                  \
    template Var<T> scale(const Var<T> &, double);                                                        \
    template Var<T> linear(const Var<T> &, const Var<T> &, const Var<T> &);                               \
    template Var<T> layer_norm(const Var<T> &, const Var<T> &, const Var<T> &);                           \
    template Var<T> softmax(const Var<T> &);                                                              \
    template Var<T> silu(const Var<T> &);                                                                 \
    template Var<T> gelu(const Var<T> &);                                                                 \
    template Var<T> relu(const Var<T> &);                                                                 \
    template Var<T> mean(const Var<T> &, int);                                                            \
    template Var<T> sum(const Var<T> &);                                                                  \
    template Var<T> conv2d(const Var<T> &, const Var<T> &, const Var<T> &, int, int);                     \
    template Var<T> conv_transpose2d(const Var<T> &, const Var<T> &, const Var<T> &, int);                \
    template Var<T> max_pool2d(const Var<T> &);                                                           \
    template Var<T> resize_bilinear(const Var<T> &, std::int64_t, std::int64_t);                          \
    template Var<T> adaptive_avg_pool2d(const Var<T> &, std::int64_t, std::int64_t);                      \
    template Var<T> reshape(const Var<T> &, Shape);                                                       \
    template Var<T> transpose(const Var<T> &);                                                            \
    template Var<T> concat(const std::vector<Var<T>> &, int);                                             \
    template Var<T> slice(const Var<T> &, int, std::int64_t, std::int64_t);                               \
    template Var<T> dropout(const Var<T> &, double, const CounterRng &);                                  \
    template Var<T> rope2d(const Var<T> &, std::int64_t, std::int64_t, std::int64_t, std::vector<std::int64_t>);                     \
    template Var<T> gather_rows(const Var<T> &, std::vector<std::int64_t>);                               \
    template Var<T> scatter_rows(const Var<T> &, const Var<T> &, std::vector<std::int64_t>);              \
    template Var<T> cosine_loss(const Var<T> &, const Var<T> &);                                          \
    template Var<T> bce_with_logits(const Var<T> &, const Var<T> &, std::vector<double>);                 \
    template Var<T> softmax_cross_entropy(const Var<T> &, std::vector<std::int64_t>);

EVAX_INSTANTIATE_AUTOGRAD(float)
EVAX_INSTANTIATE_AUTOGRAD(double)

}  // namespace evax
