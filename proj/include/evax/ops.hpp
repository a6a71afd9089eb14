#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "evax/rng.hpp"
#include "evax/tensor.hpp"

namespace evax {

// The primitive set. Every op has an exact forward definition and an analytic
// backward; composite layers (attention, SwiGLU, UperNet) are built from these.
enum class OpId {
    matmul,             // [m,k] x [k,n]
    add,                // numpy broadcasting
    sub,                // numpy broadcasting
    mul,                // numpy broadcasting
    scale,              // x * attrs.alpha
    linear,             // x[m,in] W[in,out] + b[out]
    layer_norm,         // last axis, inputs (x, gain, bias)
    softmax,            // last axis
    silu,
    gelu,               // exact erf form
    relu,
    mean,               // over attrs.axis, axis removed
    sum,                // all elements -> [1]
    conv2d,             // x[C,H,W], w[O,C,kh,kw], optional b[O]; stride, padding
    conv_transpose2d,   // x[C,H,W], w[C,O,k,k], optional b[O]; stride
    max_pool2d,         // [C,H,W], kernel 2 stride 2
    bilinear_resize_2d, // [C,H,W] -> [C,out_h,out_w], align corners
    adaptive_avg_pool2d,// [C,H,W] -> [C,out_h,out_w]
    reshape,
    transpose,          // 2-D
    concat,             // along attrs.axis, any number of inputs
    slice,              // [begin, end) along attrs.axis
    dropout,            // inverted dropout, mask drawn from attrs.rng
    rope2d,             // [L, dh] axial rotary encoding; attrs.indices optionally gives each token's grid cell
    gather_rows,        // [L,d] -> [k,d] rows attrs.indices
    scatter_rows,       // (x[L,d], fill[k,d]) -> x with rows attrs.indices replaced
    cosine_loss,        // (a[k,d], b[k,d]) -> 1 - mean_i cos(a_i, b_i)
    bce_with_logits,    // (logits[K], targets[K]) -> weighted mean BCE
    softmax_cross_entropy, // logits [C] or [C,H,W]; class ids in attrs.indices
};

std::string_view op_name(OpId op);

struct OpAttrs {
    int axis = -1;
    Shape shape;                       // reshape target
    std::int64_t begin = 0, end = 0;   // slice
    int stride = 1;
    int padding = 0;
    std::int64_t out_h = 0, out_w = 0; // resize / adaptive pool
    double alpha = 1.0;                // scale factor
    double p = 0.0;                    // dropout probability
    double eps = 1e-6;                 // layer_norm epsilon
    CounterRng rng;                    // dropout mask stream
    std::int64_t grid_h = 0, grid_w = 0, prefix = 0;  // rope2d
    std::vector<std::int64_t> indices; // gather/scatter rows, CE targets
    std::vector<double> weights;       // bce per-class weights (empty = all 1)
};

// Non-owning list of input tensors: built from a contiguous span or from
// pointers into autograd nodes without copying payloads.
template <typename T>
class TensorList {
   public:
    class iterator {
       public:
        explicit iterator(const BasicTensor<T> *const *p) : p_(p) {}
        const BasicTensor<T> &operator*() const { return **p_; }
        iterator &operator++() {
            ++p_;
            return *this;
        }
        bool operator!=(const iterator &o) const { return p_ != o.p_; }

       private:
        const BasicTensor<T> *const *p_;
    };

    TensorList() = default;
    TensorList(std::span<const BasicTensor<T>> s) {  // NOLINT(google-explicit-constructor)
        for (const auto &t : s) ptrs_.push_back(&t);
    }
    TensorList(const std::vector<BasicTensor<T>> &v)  // NOLINT(google-explicit-constructor)
        : TensorList(std::span<const BasicTensor<T>>(v)) {}
    TensorList(std::initializer_list<const BasicTensor<T> *> ptrs) : ptrs_(ptrs) {}
    explicit TensorList(std::vector<const BasicTensor<T> *> ptrs) : ptrs_(std::move(ptrs)) {}

    std::size_t size() const noexcept { return ptrs_.size(); }
    bool empty() const noexcept { return ptrs_.empty(); }
    const BasicTensor<T> &operator[](std::size_t i) const { return *ptrs_[i]; }
    iterator begin() const { return iterator(ptrs_.data()); }
    iterator end() const { return iterator(ptrs_.data() + ptrs_.size()); }

   private:
    std::vector<const BasicTensor<T> *> ptrs_;
};

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kCosineEps = 1e-8;

// Forward of one primitive. Throws ShapeError naming the op and the shapes on
// invalid input, NumericalError if the result is not finite.
template <typename T>
BasicTensor<T> primitive_forward(OpId op, const TensorList<T> &inputs,
                                 const OpAttrs &attrs);

// Gradients for every input given the upstream gradient of the output.
// `output` may be empty, in which case it is recomputed where needed.
// Entries for non-differentiable inputs (loss targets) are empty tensors.
template <typename T>
std::vector<BasicTensor<T>> primitive_backward(OpId op, const TensorList<T> &inputs,
                                               const BasicTensor<T> &output,
                                               const BasicTensor<T> &upstream,
                                               const OpAttrs &attrs);

bool input_differentiable(OpId op, std::size_t input_index);

// Gradient for one input; throws if that input has no defined gradient.
template <typename T>
BasicTensor<T> primitive_gradient(OpId op, const TensorList<T> &inputs,
                                  const BasicTensor<T> &upstream, const OpAttrs &attrs,
                                  std::size_t input_index);

// Rotates one head vector in place for grid position (row, col); used by
// rope2d and exposed for position-shift checks at arbitrary coordinates.
template <typename T>
void rope_rotate_vector(std::span<T> head, double row, double col, bool inverse = false);

// C[m,n] += A[m,k] B[k,n], all row-major.
template <typename T>
void gemm_accumulate(const T *a, const T *b, T *c, std::int64_t m, std::int64_t k,
                     std::int64_t n);

}  // namespace evax
