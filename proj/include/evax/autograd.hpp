#pragma once

#include <memory>
#include <unordered_map>
#include <vector>

#include "evax/ops.hpp"
#include "evax/tensor.hpp"

namespace evax {

template <typename T>
struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;  // empty until backward reaches the node
    bool requires_grad = false;
    bool is_op = false;
    OpId op = OpId::add;
    OpAttrs attrs;
    std::vector<std::shared_ptr<Node>> parents;
};

// Handle to a value in a reverse-mode tape. Copies share the node.
template <typename T>
class Var {
   public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    const BasicTensor<T> &value() const { return node_->value; }
    // Gradient accumulated by backward(); zeros of the value's shape if the
    // node never received one.
    BasicTensor<T> grad() const;
    bool has_grad() const { return !node_->grad.empty(); }
    const Shape &shape() const { return node_->value.shape(); }
    std::int64_t dim(int axis) const { return node_->value.dim(axis); }
    bool requires_grad() const { return node_->requires_grad; }
    bool valid() const { return node_ != nullptr; }
    const std::shared_ptr<Node<T>> &node() const { return node_; }

   private:
    std::shared_ptr<Node<T>> node_;
};

using VarF = Var<float>;
using VarD = Var<double>;

template <typename T>
Var<T> constant(BasicTensor<T> value);
template <typename T>
Var<T> variable(BasicTensor<T> value);

// Records one primitive on the tape. The result requires grad if any input does.
template <typename T>
Var<T> apply(OpId op, const std::vector<Var<T>> &inputs, OpAttrs attrs = {});

// Seeds d(root)/d(root) = 1 (root must hold a single value) and propagates.
template <typename T>
void backward(const Var<T> &root);

// Thin wrappers over apply().
template <typename T> Var<T> matmul(const Var<T> &a, const Var<T> &b);
template <typename T> Var<T> add(const Var<T> &a, const Var<T> &b);
template <typename T> Var<T> sub(const Var<T> &a, const Var<T> &b);
template <typename T> Var<T> mul(const Var<T> &a, const Var<T> &b);
template <typename T> Var<T> scale(const Var<T> &x, double alpha);
template <typename T> Var<T> linear(const Var<T> &x, const Var<T> &w, const Var<T> &b);
template <typename T> Var<T> layer_norm(const Var<T> &x, const Var<T> &gain, const Var<T> &bias);
template <typename T> Var<T> softmax(const Var<T> &x);
template <typename T> Var<T> silu(const Var<T> &x);
template <typename T> Var<T> gelu(const Var<T> &x);
template <typename T> Var<T> relu(const Var<T> &x);
template <typename T> Var<T> mean(const Var<T> &x, int axis);
template <typename T> Var<T> sum(const Var<T> &x);
template <typename T> Var<T> conv2d(const Var<T> &x, const Var<T> &w, const Var<T> &b, int stride, int padding);
template <typename T> Var<T> conv_transpose2d(const Var<T> &x, const Var<T> &w, const Var<T> &b, int stride);
template <typename T> Var<T> max_pool2d(const Var<T> &x);
template <typename T> Var<T> resize_bilinear(const Var<T> &x, std::int64_t out_h, std::int64_t out_w);
template <typename T> Var<T> adaptive_avg_pool2d(const Var<T> &x, std::int64_t out_h, std::int64_t out_w);
template <typename T> Var<T> reshape(const Var<T> &x, Shape shape);
template <typename T> Var<T> transpose(const Var<T> &x);
template <typename T> Var<T> concat(const std::vector<Var<T>> &xs, int axis);
template <typename T> Var<T> slice(const Var<T> &x, int axis, std::int64_t begin, std::int64_t end);
template <typename T> Var<T> dropout(const Var<T> &x, double p, const CounterRng &rng);
template <typename T> Var<T> rope2d(const Var<T> &x, std::int64_t grid_h, std::int64_t grid_w, std::int64_t prefix,
                                   std::vector<std::int64_t> positions = {});
template <typename T> Var<T> gather_rows(const Var<T> &x, std::vector<std::int64_t> rows);
template <typename T> Var<T> scatter_rows(const Var<T> &x, const Var<T> &fill, std::vector<std::int64_t> rows);
template <typename T> Var<T> cosine_loss(const Var<T> &a, const Var<T> &b);
template <typename T> Var<T> bce_with_logits(const Var<T> &logits, const Var<T> &targets, std::vector<double> weights = {});
template <typename T> Var<T> softmax_cross_entropy(const Var<T> &logits, std::vector<std::int64_t> targets);

}  // namespace evax
