#include "evax/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <type_traits>

namespace evax {

namespace {

template <typename T>
using Inputs = const TensorList<T> &;

template <typename T>
[[noreturn]] void fail(OpId op, Inputs<T> inputs, const std::string &msg) {
    std::ostringstream os;
    os << op_name(op) << ": " << msg << " (input shapes:";
    for (const auto &t : inputs) os << ' ' << shape_str(t.shape());
    os << ')';
    throw ShapeError(os.str());
}

template <typename T>
void expect_arity(OpId op, Inputs<T> in, std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
        fail<T>(op, in, "expected " + std::to_string(lo) + (lo == hi ? "" : "-" + std::to_string(hi)) +
                            " inputs, got " + std::to_string(in.size()));
    }
}

template <typename T>
void expect_rank(OpId op, Inputs<T> in, std::size_t i, int rank) {
    if (in[i].rank() != rank) {
        fail<T>(op, in, "input " + std::to_string(i) + " must have rank " + std::to_string(rank));
    }
}

int norm_axis(int axis, int rank) { return axis < 0 ? axis + rank : axis; }

// ---------------------------------------------------------------- broadcasting

Shape broadcast_shape(const Shape &a, const Shape &b, bool &ok) {
    ok = true;
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) ok = false;
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `s` aligned to an output of rank r, with zero for broadcast axes.
std::vector<std::int64_t> broadcast_strides(const Shape &s, const Shape &out) {
    std::size_t r = out.size();
    std::vector<std::int64_t> st(r, 0);
    std::int64_t acc = 1;
    for (std::size_t k = 0; k < s.size(); ++k) {
        std::size_t i = s.size() - 1 - k;
        std::size_t o = r - 1 - k;
        st[o] = s[i] == 1 ? 0 : acc;
        acc *= s[i];
    }
    return st;
}

// Calls f(out_index, a_index, b_index) over the broadcast output.
template <typename F>
void for_each_broadcast(const Shape &out, const std::vector<std::int64_t> &sa,
                        const std::vector<std::int64_t> &sb, F &&f) {
    const std::size_t r = out.size();
    const std::int64_t n = shape_numel(out);
    if (r == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t ia = 0, ib = 0;
    const std::int64_t inner = out[r - 1];
    for (std::int64_t o = 0; o < n; o += inner) {
        for (std::int64_t j = 0; j < inner; ++j) f(o + j, ia + j * sa[r - 1], ib + j * sb[r - 1]);
        // advance all but the innermost axis
        for (std::size_t k = r - 1; k-- > 0;) {
            ++idx[k];
            ia += sa[k];
            ib += sb[k];
            if (idx[k] < out[k]) break;
            ia -= sa[k] * out[k];
            ib -= sb[k] * out[k];
            idx[k] = 0;
        }
    }
}

enum class Binary { add, sub, mul };

template <typename T>
BasicTensor<T> binary_forward(OpId op, Inputs<T> in, Binary kind) {
    expect_arity(op, in, 2, 2);
    const auto &a = in[0];
    const auto &b = in[1];
    auto apply = [kind](T x, T y) -> T {
        switch (kind) {
            case Binary::add:
                return x + y;
            case Binary::sub:
                return x - y;
            case Binary::mul:
                return x * y;
        }
        return T(0);
    };
    if (a.shape() == b.shape()) {
        BasicTensor<T> out(a.shape());
        for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = apply(a[i], b[i]);
        return out;
    }
    bool ok = false;
    Shape os = broadcast_shape(a.shape(), b.shape(), ok);
    if (!ok) fail<T>(op, in, "shapes are not broadcast-compatible");
    BasicTensor<T> out(os);
    auto sa = broadcast_strides(a.shape(), os);
    auto sb = broadcast_strides(b.shape(), os);
    for_each_broadcast(os, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        out[o] = apply(a[ia], b[ib]);
    });
    return out;
}

template <typename T>
std::vector<BasicTensor<T>> binary_backward(Inputs<T> in, const BasicTensor<T> &g, Binary kind) {
    const auto &a = in[0];
    const auto &b = in[1];
    BasicTensor<T> ga(a.shape());
    BasicTensor<T> gb(b.shape());
    auto sa = broadcast_strides(a.shape(), g.shape());
    auto sb = broadcast_strides(b.shape(), g.shape());
    for_each_broadcast(g.shape(), sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        switch (kind) {
            case Binary::add:
                ga[ia] += g[o];
                gb[ib] += g[o];
                break;
            case Binary::sub:
                ga[ia] += g[o];
                gb[ib] -= g[o];
                break;
            case Binary::mul:
                ga[ia] += g[o] * b[ib];
                gb[ib] += g[o] * a[ia];
                break;
        }
    });
    return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------- matmul

template <typename T>
BasicTensor<T> transpose2d(const BasicTensor<T> &x) {
    const auto m = x.dim(0), n = x.dim(1);
    BasicTensor<T> out(Shape{n, m});
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    }
    return out;
}

template <typename T>
BasicTensor<T> matmul2d(const BasicTensor<T> &a, const BasicTensor<T> &b) {
    BasicTensor<T> out(Shape{a.dim(0), b.dim(1)});
    gemm_accumulate(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
    return out;
}

// ---------------------------------------------------------------- conv helpers

struct ConvGeom {
    std::int64_t c, h, w, kh, kw, stride, pad, oh, ow;
};

// cols[(c*kh + i)*kw + j, oy*ow + ox] = x[c, oy*s - p + i, ox*s - p + j]
template <typename T>
void im2col(const T *x, const ConvGeom &g, T *cols) {
    const std::int64_t ohw = g.oh * g.ow;
    for (std::int64_t c = 0; c < g.c; ++c) {
        for (std::int64_t i = 0; i < g.kh; ++i) {
            for (std::int64_t j = 0; j < g.kw; ++j) {
                T *row = cols + ((c * g.kh + i) * g.kw + j) * ohw;
                for (std::int64_t oy = 0; oy < g.oh; ++oy) {
                    const std::int64_t y = oy * g.stride - g.pad + i;
                    T *dst = row + oy * g.ow;
                    if (y < 0 || y >= g.h) {
                        std::fill(dst, dst + g.ow, T(0));
                        continue;
                    }
                    const T *src = x + (c * g.h + y) * g.w;
                    for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                        const std::int64_t xx = ox * g.stride - g.pad + j;
                        dst[ox] = (xx < 0 || xx >= g.w) ? T(0) : src[xx];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T *cols, const ConvGeom &g, T *x) {
    const std::int64_t ohw = g.oh * g.ow;
    for (std::int64_t c = 0; c < g.c; ++c) {
        for (std::int64_t i = 0; i < g.kh; ++i) {
            for (std::int64_t j = 0; j < g.kw; ++j) {
                const T *row = cols + ((c * g.kh + i) * g.kw + j) * ohw;
                for (std::int64_t oy = 0; oy < g.oh; ++oy) {
                    const std::int64_t y = oy * g.stride - g.pad + i;
                    if (y < 0 || y >= g.h) continue;
                    T *dst = x + (c * g.h + y) * g.w;
                    const T *src = row + oy * g.ow;
                    for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                        const std::int64_t xx = ox * g.stride - g.pad + j;
                        if (xx >= 0 && xx < g.w) dst[xx] += src[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
ConvGeom conv_geom(OpId op, Inputs<T> in, const OpAttrs &at) {
    expect_arity(op, in, 2, 3);
    expect_rank(op, in, 0, 3);
    expect_rank(op, in, 1, 4);
    const auto &x = in[0];
    const auto &w = in[1];
    if (w.dim(1) != x.dim(0)) fail<T>(op, in, "weight in-channels do not match input channels");
    if (in.size() == 3 && (in[2].rank() != 1 || in[2].dim(0) != w.dim(0))) {
        fail<T>(op, in, "bias must be [out_channels]");
    }
    if (at.stride < 1 || at.padding < 0) fail<T>(op, in, "invalid stride/padding");
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), w.dim(2), w.dim(3), at.stride, at.padding, 0, 0};
    g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
    g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
    if (g.oh <= 0 || g.ow <= 0) fail<T>(op, in, "kernel larger than padded input");
    return g;
}

template <typename T>
BasicTensor<T> conv2d_forward(Inputs<T> in, const OpAttrs &at) {
    const auto g = conv_geom(OpId::conv2d, in, at);
    const auto &w = in[1];
    const std::int64_t o = w.dim(0);
    const std::int64_t ck = g.c * g.kh * g.kw;
    std::vector<T> cols(static_cast<std::size_t>(ck * g.oh * g.ow));
    im2col(in[0].data(), g, cols.data());
    BasicTensor<T> out(Shape{o, g.oh, g.ow});
    if (in.size() == 3) {
        for (std::int64_t k = 0; k < o; ++k) {
            std::fill(out.data() + k * g.oh * g.ow, out.data() + (k + 1) * g.oh * g.ow, in[2][k]);
        }
    }
    gemm_accumulate(w.data(), cols.data(), out.data(), o, ck, g.oh * g.ow);
    return out;
}

template <typename T>
std::vector<BasicTensor<T>> conv2d_backward(Inputs<T> in, const BasicTensor<T> &gout,
                                            const OpAttrs &at) {
    const auto g = conv_geom(OpId::conv2d, in, at);
    const auto &w = in[1];
    const std::int64_t o = w.dim(0);
    const std::int64_t ck = g.c * g.kh * g.kw;
    const std::int64_t s = g.oh * g.ow;
    BasicTensor<T> cols(Shape{ck, s});
    im2col(in[0].data(), g, cols.data());
    // dW = G cols^T
    BasicTensor<T> gw(w.shape());
    auto colst = transpose2d(cols);
    gemm_accumulate(gout.data(), colst.data(), gw.data(), o, s, ck);
    // dcols = W^T G
    auto wt = transpose2d(w.reshaped(Shape{o, ck}));
    BasicTensor<T> dcols(Shape{ck, s});
    gemm_accumulate(wt.data(), gout.data(), dcols.data(), ck, o, s);
    BasicTensor<T> gx(in[0].shape());
    col2im(dcols.data(), g, gx.data());
    std::vector<BasicTensor<T>> grads{std::move(gx), std::move(gw)};
    if (in.size() == 3) {
        BasicTensor<T> gb(in[2].shape());
        for (std::int64_t k = 0; k < o; ++k) {
            double acc = 0;
            for (std::int64_t i = 0; i < s; ++i) acc += gout[k * s + i];
            gb[k] = static_cast<T>(acc);
        }
        grads.push_back(std::move(gb));
    }
    return grads;
}

// Transposed conv: the adjoint of a conv whose output grid is the input here.
template <typename T>
ConvGeom deconv_geom(Inputs<T> in, const OpAttrs &at) {
    constexpr OpId op = OpId::conv_transpose2d;
    expect_arity(op, in, 2, 3);
    expect_rank(op, in, 0, 3);
    expect_rank(op, in, 1, 4);
    const auto &x = in[0];
    const auto &w = in[1];
    if (w.dim(0) != x.dim(0)) fail<T>(op, in, "weight in-channels do not match input channels");
    if (in.size() == 3 && (in[2].rank() != 1 || in[2].dim(0) != w.dim(1))) {
        fail<T>(op, in, "bias must be [out_channels]");
    }
    if (at.stride < 1) fail<T>(op, in, "invalid stride");
    // geometry of the output image viewed as the input of the adjoint conv
    ConvGeom g{w.dim(1), (x.dim(1) - 1) * at.stride + w.dim(2), (x.dim(2) - 1) * at.stride + w.dim(3),
               w.dim(2), w.dim(3), at.stride, 0, x.dim(1), x.dim(2)};
    return g;
}

template <typename T>
BasicTensor<T> deconv_forward(Inputs<T> in, const OpAttrs &at) {
    const auto g = deconv_geom(in, at);
    const auto &x = in[0];
    const auto &w = in[1];
    const std::int64_t cin = x.dim(0);
    const std::int64_t ok = g.c * g.kh * g.kw;
    const std::int64_t s = g.oh * g.ow;
    // cols[ok, s] = W^T[ok, cin] x[cin, s]
    auto wt = transpose2d(w.reshaped(Shape{cin, ok}));
    std::vector<T> cols(static_cast<std::size_t>(ok * s), T(0));
    gemm_accumulate(wt.data(), x.data(), cols.data(), ok, cin, s);
    BasicTensor<T> out(Shape{g.c, g.h, g.w});
    col2im(cols.data(), g, out.data());
    if (in.size() == 3) {
        const std::int64_t hw = g.h * g.w;
        for (std::int64_t k = 0; k < g.c; ++k) {
            for (std::int64_t i = 0; i < hw; ++i) out[k * hw + i] += in[2][k];
        }
    }
    return out;
}

template <typename T>
std::vector<BasicTensor<T>> deconv_backward(Inputs<T> in, const BasicTensor<T> &gout,
                                            const OpAttrs &at) {
    const auto g = deconv_geom(in, at);
    const auto &x = in[0];
    const auto &w = in[1];
    const std::int64_t cin = x.dim(0);
    const std::int64_t ok = g.c * g.kh * g.kw;
    const std::int64_t s = g.oh * g.ow;
    BasicTensor<T> dcols(Shape{ok, s});
    im2col(gout.data(), g, dcols.data());
    // dx[cin, s] = W[cin, ok] dcols[ok, s]
    BasicTensor<T> gx(x.shape());
    gemm_accumulate(w.data(), dcols.data(), gx.data(), cin, ok, s);
    // dW[cin, ok] = x[cin, s] dcols^T[s, ok]
    BasicTensor<T> gw(w.shape());
    auto dct = transpose2d(dcols);
    gemm_accumulate(x.data(), dct.data(), gw.data(), cin, s, ok);
    std::vector<BasicTensor<T>> grads{std::move(gx), std::move(gw)};
    if (in.size() == 3) {
        BasicTensor<T> gb(in[2].shape());
        const std::int64_t hw = g.h * g.w;
        for (std::int64_t k = 0; k < g.c; ++k) {
            double acc = 0;
            for (std::int64_t i = 0; i < hw; ++i) acc += gout[k * hw + i];
            gb[k] = static_cast<T>(acc);
        }
        grads.push_back(std::move(gb));
    }
    return grads;
}

// ---------------------------------------------------------------- resampling

// align-corners source coordinate of output index i
inline double align_coord(std::int64_t i, std::int64_t in_n, std::int64_t out_n) {
    if (out_n <= 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
}

struct Lerp {
    std::int64_t i0, i1;
    double w1;
};

std::vector<Lerp> lerp_table(std::int64_t in_n, std::int64_t out_n) {
    std::vector<Lerp> t(static_cast<std::size_t>(out_n));
    for (std::int64_t i = 0; i < out_n; ++i) {
        double src = align_coord(i, in_n, out_n);
        auto i0 = static_cast<std::int64_t>(std::floor(src));
        i0 = std::clamp<std::int64_t>(i0, 0, in_n - 1);
        std::int64_t i1 = std::min(i0 + 1, in_n - 1);
        t[static_cast<std::size_t>(i)] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
}

template <typename T>
BasicTensor<T> resize_forward(Inputs<T> in, const OpAttrs &at) {
    constexpr OpId op = OpId::bilinear_resize_2d;
    expect_arity(op, in, 1, 1);
    expect_rank(op, in, 0, 3);
    if (at.out_h < 1 || at.out_w < 1) fail<T>(op, in, "output size must be >= 1");
    const auto &x = in[0];
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto ty = lerp_table(h, at.out_h);
    auto tx = lerp_table(w, at.out_w);
    BasicTensor<T> out(Shape{c, at.out_h, at.out_w});
    for (std::int64_t k = 0; k < c; ++k) {
        for (std::int64_t i = 0; i < at.out_h; ++i) {
            const auto &ly = ty[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < at.out_w; ++j) {
                const auto &lx = tx[static_cast<std::size_t>(j)];
                double top = x.at(k, ly.i0, lx.i0) * (1 - lx.w1) + x.at(k, ly.i0, lx.i1) * lx.w1;
                double bot = x.at(k, ly.i1, lx.i0) * (1 - lx.w1) + x.at(k, ly.i1, lx.i1) * lx.w1;
                out.at(k, i, j) = static_cast<T>(top * (1 - ly.w1) + bot * ly.w1);
            }
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> resize_backward(Inputs<T> in, const BasicTensor<T> &g, const OpAttrs &at) {
    const auto &x = in[0];
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto ty = lerp_table(h, at.out_h);
    auto tx = lerp_table(w, at.out_w);
    BasicTensor<T> gx(x.shape());
    for (std::int64_t k = 0; k < c; ++k) {
        for (std::int64_t i = 0; i < at.out_h; ++i) {
            const auto &ly = ty[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < at.out_w; ++j) {
                const auto &lx = tx[static_cast<std::size_t>(j)];
                const double v = g.at(k, i, j);
                gx.at(k, ly.i0, lx.i0) += static_cast<T>(v * (1 - ly.w1) * (1 - lx.w1));
                gx.at(k, ly.i0, lx.i1) += static_cast<T>(v * (1 - ly.w1) * lx.w1);
                gx.at(k, ly.i1, lx.i0) += static_cast<T>(v * ly.w1 * (1 - lx.w1));
                gx.at(k, ly.i1, lx.i1) += static_cast<T>(v * ly.w1 * lx.w1);
            }
        }
    }
    return gx;
}

struct Bin {
    std::int64_t lo, hi;
};

std::vector<Bin> adaptive_bins(std::int64_t in_n, std::int64_t out_n) {
    std::vector<Bin> bins(static_cast<std::size_t>(out_n));
    for (std::int64_t i = 0; i < out_n; ++i) {
        bins[static_cast<std::size_t>(i)] = {(i * in_n) / out_n, ((i + 1) * in_n + out_n - 1) / out_n};
    }
    return bins;
}

template <typename T>
BasicTensor<T> adaptive_pool_forward(Inputs<T> in, const OpAttrs &at) {
    constexpr OpId op = OpId::adaptive_avg_pool2d;
    expect_arity(op, in, 1, 1);
    expect_rank(op, in, 0, 3);
    if (at.out_h < 1 || at.out_w < 1) fail<T>(op, in, "output size must be >= 1");
    const auto &x = in[0];
    const auto c = x.dim(0);
    auto by = adaptive_bins(x.dim(1), at.out_h);
    auto bx = adaptive_bins(x.dim(2), at.out_w);
    BasicTensor<T> out(Shape{c, at.out_h, at.out_w});
    for (std::int64_t k = 0; k < c; ++k) {
        for (std::int64_t i = 0; i < at.out_h; ++i) {
            for (std::int64_t j = 0; j < at.out_w; ++j) {
                const auto &yb = by[static_cast<std::size_t>(i)];
                const auto &xb = bx[static_cast<std::size_t>(j)];
                double acc = 0;
                for (auto y = yb.lo; y < yb.hi; ++y) {
                    for (auto xx = xb.lo; xx < xb.hi; ++xx) acc += x.at(k, y, xx);
                }
                out.at(k, i, j) = static_cast<T>(acc / static_cast<double>((yb.hi - yb.lo) * (xb.hi - xb.lo)));
            }
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> adaptive_pool_backward(Inputs<T> in, const BasicTensor<T> &g, const OpAttrs &at) {
    const auto &x = in[0];
    const auto c = x.dim(0);
    auto by = adaptive_bins(x.dim(1), at.out_h);
    auto bx = adaptive_bins(x.dim(2), at.out_w);
    BasicTensor<T> gx(x.shape());
    for (std::int64_t k = 0; k < c; ++k) {
        for (std::int64_t i = 0; i < at.out_h; ++i) {
            for (std::int64_t j = 0; j < at.out_w; ++j) {
                const auto &yb = by[static_cast<std::size_t>(i)];
                const auto &xb = bx[static_cast<std::size_t>(j)];
                const T v = static_cast<T>(g.at(k, i, j) /
                                           static_cast<double>((yb.hi - yb.lo) * (xb.hi - xb.lo)));
                for (auto y = yb.lo; y < yb.hi; ++y) {
                    for (auto xx = xb.lo; xx < xb.hi; ++xx) gx.at(k, y, xx) += v;
                }
            }
        }
    }
    return gx;
}

// ---------------------------------------------------------------- misc helpers

struct AxisSplit {
    std::int64_t outer, n, inner;
};

AxisSplit split_axis(const Shape &s, int axis) {
    AxisSplit r{1, s[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

template <typename T>
T sigmoid(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

bool dropout_keep(CounterRng &rng, double p) { return rng.uniform_f64() >= p; }

template <typename T>
void check_rows(OpId op, Inputs<T> in, const std::vector<std::int64_t> &idx, std::int64_t rows) {
    for (auto i : idx) {
        if (i < 0 || i >= rows) fail<T>(op, in, "row index " + std::to_string(i) + " out of range");
    }
}

}  // namespace

std::string_view op_name(OpId op) {
    switch (op) {
        case OpId::matmul: return "matmul";
        case OpId::add: return "add";
        case OpId::sub: return "sub";
        case OpId::mul: return "mul";
        case OpId::scale: return "scale";
        case OpId::linear: return "linear";
        case OpId::layer_norm: return "layer_norm";
        case OpId::softmax: return "softmax";
        case OpId::silu: return "silu";
        case OpId::gelu: return "gelu";
        case OpId::relu: return "relu";
        case OpId::mean: return "mean";
        case OpId::sum: return "sum";
        case OpId::conv2d: return "conv2d";
        case OpId::conv_transpose2d: return "conv_transpose2d";
        case OpId::max_pool2d: return "max_pool2d";
        case OpId::bilinear_resize_2d: return "bilinear_resize_2d";
        case OpId::adaptive_avg_pool2d: return "adaptive_avg_pool2d";
        case OpId::reshape: return "reshape";
        case OpId::transpose: return "transpose";
        case OpId::concat: return "concat";
        case OpId::slice: return "slice";
        case OpId::dropout: return "dropout";
        case OpId::rope2d: return "rope2d";
        case OpId::gather_rows: return "gather_rows";
        case OpId::scatter_rows: return "scatter_rows";
        case OpId::cosine_loss: return "cosine_loss";
        case OpId::bce_with_logits: return "bce_with_logits";
        case OpId::softmax_cross_entropy: return "softmax_cross_entropy";
    }
    return "unknown";
}

bool input_differentiable(OpId op, std::size_t input_index) {
    switch (op) {
        case OpId::bce_with_logits:
            return input_index == 0;
        default:
            return true;
    }
}

template <typename T>
void gemm_accumulate(const T *a, const T *b, T *c, std::int64_t m, std::int64_t k, std::int64_t n) {
    if (m == 0 || n == 0 || k == 0) return;
    if (m * k * n >= 4096) {
        if constexpr (std::is_same_v<T, float>) {
            cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                        static_cast<int>(k), 1.0f, a, static_cast<int>(k), b, static_cast<int>(n), 1.0f, c,
                        static_cast<int>(n));
        } else {
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                        static_cast<int>(k), 1.0, a, static_cast<int>(k), b, static_cast<int>(n), 1.0, c,
                        static_cast<int>(n));
        }
        return;
    }
    for (std::int64_t i = 0; i < m; ++i) {
        T *crow = c + i * n;
        const T *arow = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T *brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

namespace {
std::int64_t rope_position(const OpAttrs &at, std::int64_t token) {
    return at.indices.empty() ? token : at.indices[static_cast<std::size_t>(token)];
}
}  // namespace

template <typename T>
void rope_rotate_vector(std::span<T> head, double row, double col, bool inverse) {
    const std::size_t dh = head.size();
    const std::size_t half = dh / 2;
    const std::size_t pairs = dh / 4;
    for (std::size_t k = 0; k < pairs; ++k) {
        const double theta = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(half));
        for (int axis = 0; axis < 2; ++axis) {
            double angle = (axis == 0 ? row : col) * theta;
            if (inverse) angle = -angle;
            const double cs = std::cos(angle), sn = std::sin(angle);
            const std::size_t i0 = axis * half + 2 * k;
            const double x0 = head[i0], x1 = head[i0 + 1];
            head[i0] = static_cast<T>(x0 * cs - x1 * sn);
            head[i0 + 1] = static_cast<T>(x0 * sn + x1 * cs);
        }
    }
}

template <typename T>
BasicTensor<T> primitive_forward(OpId op, Inputs<T> in, const OpAttrs &at) {
    BasicTensor<T> out;
    switch (op) {
        case OpId::matmul: {
            expect_arity(op, in, 2, 2);
            expect_rank(op, in, 0, 2);
            expect_rank(op, in, 1, 2);
            if (in[0].dim(1) != in[1].dim(0)) fail<T>(op, in, "inner dimensions differ");
            out = matmul2d(in[0], in[1]);
            break;
        }
        case OpId::add:
            out = binary_forward(op, in, Binary::add);
            break;
        case OpId::sub:
            out = binary_forward(op, in, Binary::sub);
            break;
        case OpId::mul:
            out = binary_forward(op, in, Binary::mul);
            break;
        case OpId::scale: {
            expect_arity(op, in, 1, 1);
            out = in[0];
            for (auto &v : out.values()) v = static_cast<T>(v * at.alpha);
            break;
        }
        case OpId::linear: {
            expect_arity(op, in, 2, 3);
            expect_rank(op, in, 0, 2);
            expect_rank(op, in, 1, 2);
            const auto m = in[0].dim(0), k = in[0].dim(1), n = in[1].dim(1);
            if (in[1].dim(0) != k) fail<T>(op, in, "weight rows must equal input features");
            out = BasicTensor<T>(Shape{m, n});
            if (in.size() == 3) {
                if (in[2].rank() != 1 || in[2].dim(0) != n) fail<T>(op, in, "bias must be [out]");
                for (std::int64_t i = 0; i < m; ++i) std::copy_n(in[2].data(), n, out.data() + i * n);
            }
            gemm_accumulate(in[0].data(), in[1].data(), out.data(), m, k, n);
            break;
        }
        case OpId::layer_norm: {
            expect_arity(op, in, 3, 3);
            const auto &x = in[0];
            const auto d = x.dim(-1);
            if (in[1].shape() != Shape{d} || in[2].shape() != Shape{d}) {
                fail<T>(op, in, "gain and bias must be [last dim]");
            }
            out = BasicTensor<T>(x.shape());
            const auto rows = x.numel() / d;
            for (std::int64_t r = 0; r < rows; ++r) {
                const T *xr = x.data() + r * d;
                double mean = 0;
                for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
                mean /= static_cast<double>(d);
                double var = 0;
                for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                var /= static_cast<double>(d);
                const double inv = 1.0 / std::sqrt(var + at.eps);
                T *yr = out.data() + r * d;
                for (std::int64_t j = 0; j < d; ++j) {
                    yr[j] = static_cast<T>((xr[j] - mean) * inv * in[1][j] + in[2][j]);
                }
            }
            break;
        }
        case OpId::softmax: {
            expect_arity(op, in, 1, 1);
            const auto &x = in[0];
            const auto d = x.dim(-1);
            out = BasicTensor<T>(x.shape());
            for (std::int64_t r = 0; r < x.numel() / d; ++r) {
                const T *xr = x.data() + r * d;
                T *yr = out.data() + r * d;
                T mx = *std::max_element(xr, xr + d);
                double s = 0;
                for (std::int64_t j = 0; j < d; ++j) {
                    double e = std::exp(static_cast<double>(xr[j] - mx));
                    yr[j] = static_cast<T>(e);
                    s += e;
                }
                for (std::int64_t j = 0; j < d; ++j) yr[j] = static_cast<T>(yr[j] / s);
            }
            break;
        }
        case OpId::silu:
        case OpId::gelu:
        case OpId::relu: {
            expect_arity(op, in, 1, 1);
            out = in[0];
            for (auto &v : out.values()) {
                if (op == OpId::silu) {
                    v = v * sigmoid(v);
                } else if (op == OpId::gelu) {
                    v = static_cast<T>(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))));
                } else {
                    v = v > T(0) ? v : T(0);
                }
            }
            break;
        }
        case OpId::mean: {
            expect_arity(op, in, 1, 1);
            const auto &x = in[0];
            const int axis = norm_axis(at.axis, x.rank());
            if (axis < 0 || axis >= x.rank()) fail<T>(op, in, "axis out of range");
            auto sp = split_axis(x.shape(), axis);
            Shape os = x.shape();
            os.erase(os.begin() + axis);
            if (os.empty()) os = Shape{1};
            out = BasicTensor<T>(os);
            for (std::int64_t o = 0; o < sp.outer; ++o) {
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    double acc = 0;
                    for (std::int64_t k = 0; k < sp.n; ++k) acc += x[(o * sp.n + k) * sp.inner + i];
                    out[o * sp.inner + i] = static_cast<T>(acc / static_cast<double>(sp.n));
                }
            }
            break;
        }
        case OpId::sum: {
            expect_arity(op, in, 1, 1);
            double acc = 0;
            for (auto v : in[0].values()) acc += v;
            out = BasicTensor<T>::scalar(static_cast<T>(acc));
            break;
        }
        case OpId::conv2d:
            out = conv2d_forward(in, at);
            break;
        case OpId::conv_transpose2d:
            out = deconv_forward(in, at);
            break;
        case OpId::max_pool2d: {
            expect_arity(op, in, 1, 1);
            expect_rank(op, in, 0, 3);
            const auto &x = in[0];
            const auto c = x.dim(0), oh = x.dim(1) / 2, ow = x.dim(2) / 2;
            if (oh < 1 || ow < 1) fail<T>(op, in, "input smaller than pooling window");
            out = BasicTensor<T>(Shape{c, oh, ow});
            for (std::int64_t k = 0; k < c; ++k) {
                for (std::int64_t i = 0; i < oh; ++i) {
                    for (std::int64_t j = 0; j < ow; ++j) {
                        out.at(k, i, j) = std::max({x.at(k, 2 * i, 2 * j), x.at(k, 2 * i, 2 * j + 1),
                                                    x.at(k, 2 * i + 1, 2 * j), x.at(k, 2 * i + 1, 2 * j + 1)});
                    }
                }
            }
            break;
        }
        case OpId::bilinear_resize_2d:
            out = resize_forward(in, at);
            break;
        case OpId::adaptive_avg_pool2d:
            out = adaptive_pool_forward(in, at);
            break;
        case OpId::reshape: {
            expect_arity(op, in, 1, 1);
            if (shape_numel(at.shape) != in[0].numel()) fail<T>(op, in, "target " + shape_str(at.shape) + " has wrong size");
            out = in[0].reshaped(at.shape);
            break;
        }
        case OpId::transpose: {
            expect_arity(op, in, 1, 1);
            expect_rank(op, in, 0, 2);
            out = transpose2d(in[0]);
            break;
        }
        case OpId::concat: {
            if (in.empty()) fail<T>(op, in, "needs at least one input");
            const int axis = norm_axis(at.axis, in[0].rank());
            if (axis < 0 || axis >= in[0].rank()) fail<T>(op, in, "axis out of range");
            Shape os = in[0].shape();
            os[static_cast<std::size_t>(axis)] = 0;
            for (const auto &t : in) {
                if (t.rank() != in[0].rank()) fail<T>(op, in, "ranks differ");
                for (int d = 0; d < t.rank(); ++d) {
                    if (d != axis && t.dim(d) != in[0].dim(d)) fail<T>(op, in, "non-concat extents differ");
                }
                os[static_cast<std::size_t>(axis)] += t.dim(axis);
            }
            out = BasicTensor<T>(os);
            auto sp = split_axis(os, axis);
            std::int64_t offset = 0;
            for (const auto &t : in) {
                const auto n = t.dim(axis);
                for (std::int64_t o = 0; o < sp.outer; ++o) {
                    std::copy_n(t.data() + o * n * sp.inner, n * sp.inner,
                                out.data() + (o * sp.n + offset) * sp.inner);
                }
                offset += n;
            }
            break;
        }
        case OpId::slice: {
            expect_arity(op, in, 1, 1);
            const auto &x = in[0];
            const int axis = norm_axis(at.axis, x.rank());
            if (axis < 0 || axis >= x.rank()) fail<T>(op, in, "axis out of range");
            if (at.begin < 0 || at.end > x.dim(axis) || at.begin >= at.end) {
                fail<T>(op, in, "range [" + std::to_string(at.begin) + "," + std::to_string(at.end) + ") invalid");
            }
            Shape os = x.shape();
            os[static_cast<std::size_t>(axis)] = at.end - at.begin;
            out = BasicTensor<T>(os);
            auto sp = split_axis(x.shape(), axis);
            const auto n = at.end - at.begin;
            for (std::int64_t o = 0; o < sp.outer; ++o) {
                std::copy_n(x.data() + (o * sp.n + at.begin) * sp.inner, n * sp.inner,
                            out.data() + o * n * sp.inner);
            }
            break;
        }
        case OpId::dropout: {
            expect_arity(op, in, 1, 1);
            if (at.p < 0 || at.p >= 1) fail<T>(op, in, "p must be in [0,1)");
            out = in[0];
            if (at.p > 0) {
                CounterRng rng = at.rng;
                const T keep_scale = static_cast<T>(1.0 / (1.0 - at.p));
                for (auto &v : out.values()) v = dropout_keep(rng, at.p) ? v * keep_scale : T(0);
            }
            break;
        }
        case OpId::rope2d: {
            expect_arity(op, in, 1, 1);
            expect_rank(op, in, 0, 2);
            const auto &x = in[0];
            const auto dh = x.dim(1);
            if (dh % 4 != 0) fail<T>(op, in, "head dim must be divisible by 4");
            if (x.dim(0) != at.prefix + at.grid_h * at.grid_w) fail<T>(op, in, "token count does not match grid");
            if (!at.indices.empty() && static_cast<std::int64_t>(at.indices.size()) != at.grid_h * at.grid_w) {
                fail<T>(op, in, "position list does not match grid");
            }
            out = x;
            for (std::int64_t t = at.prefix; t < x.dim(0); ++t) {
                const auto idx = rope_position(at, t - at.prefix);
                rope_rotate_vector<T>(std::span<T>(out.data() + t * dh, static_cast<std::size_t>(dh)),
                                      static_cast<double>(idx / at.grid_w), static_cast<double>(idx % at.grid_w));
            }
            break;
        }
        case OpId::gather_rows: {
            expect_arity(op, in, 1, 1);
            expect_rank(op, in, 0, 2);
            check_rows(op, in, at.indices, in[0].dim(0));
            if (at.indices.empty()) fail<T>(op, in, "no rows selected");
            const auto d = in[0].dim(1);
            out = BasicTensor<T>(Shape{static_cast<std::int64_t>(at.indices.size()), d});
            for (std::size_t r = 0; r < at.indices.size(); ++r) {
                std::copy_n(in[0].data() + at.indices[r] * d, d, out.data() + static_cast<std::int64_t>(r) * d);
            }
            break;
        }
        case OpId::scatter_rows: {
            expect_arity(op, in, 2, 2);
            expect_rank(op, in, 0, 2);
            expect_rank(op, in, 1, 2);
            check_rows(op, in, at.indices, in[0].dim(0));
            if (in[1].dim(0) != static_cast<std::int64_t>(at.indices.size()) || in[1].dim(1) != in[0].dim(1)) {
                fail<T>(op, in, "fill must be [indices, d]");
            }
            const auto d = in[0].dim(1);
            out = in[0];
            for (std::size_t r = 0; r < at.indices.size(); ++r) {
                std::copy_n(in[1].data() + static_cast<std::int64_t>(r) * d, d, out.data() + at.indices[r] * d);
            }
            break;
        }
        case OpId::cosine_loss: {
            expect_arity(op, in, 2, 2);
            expect_rank(op, in, 0, 2);
            if (in[0].shape() != in[1].shape()) fail<T>(op, in, "operands must have equal shapes");
            const auto k = in[0].dim(0), d = in[0].dim(1);
            double total = 0;
            for (std::int64_t i = 0; i < k; ++i) {
                const T *a = in[0].data() + i * d;
                const T *b = in[1].data() + i * d;
                double ab = 0, aa = 0, bb = 0;
                for (std::int64_t j = 0; j < d; ++j) {
                    ab += static_cast<double>(a[j]) * b[j];
                    aa += static_cast<double>(a[j]) * a[j];
                    bb += static_cast<double>(b[j]) * b[j];
                }
                total += ab / (std::sqrt(aa) * std::sqrt(bb) + kCosineEps);
            }
            out = BasicTensor<T>::scalar(static_cast<T>(1.0 - total / static_cast<double>(k)));
            break;
        }
        case OpId::bce_with_logits: {
            expect_arity(op, in, 2, 2);
            if (in[0].shape() != in[1].shape()) fail<T>(op, in, "logits and targets must match");
            if (!at.weights.empty() && static_cast<std::int64_t>(at.weights.size()) != in[0].numel()) {
                fail<T>(op, in, "weights must match logits");
            }
            double total = 0, wsum = 0;
            for (std::int64_t i = 0; i < in[0].numel(); ++i) {
                const double y = in[1][i];
                if (y != 0.0 && y != 1.0) {
                    throw DataError("bce_with_logits: label " + std::to_string(y) +
                                    " reached the loss; uncertain labels must be mapped upstream");
                }
                const double w = at.weights.empty() ? 1.0 : at.weights[static_cast<std::size_t>(i)];
                const double x = in[0][i];
                total += w * (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))));
                wsum += w;
            }
            if (wsum <= 0) fail<T>(op, in, "all targets excluded");
            out = BasicTensor<T>::scalar(static_cast<T>(total / wsum));
            break;
        }
        case OpId::softmax_cross_entropy: {
            expect_arity(op, in, 1, 1);
            const auto &x = in[0];
            const auto c = x.dim(0);
            const auto s = x.numel() / c;
            if (static_cast<std::int64_t>(at.indices.size()) != s) fail<T>(op, in, "need one target per position");
            double total = 0;
            for (std::int64_t p = 0; p < s; ++p) {
                const auto target = at.indices[static_cast<std::size_t>(p)];
                if (target < 0 || target >= c) fail<T>(op, in, "target class out of range");
                double mx = x[p];
                for (std::int64_t k = 1; k < c; ++k) mx = std::max<double>(mx, x[k * s + p]);
                double z = 0;
                for (std::int64_t k = 0; k < c; ++k) z += std::exp(x[k * s + p] - mx);
                total += std::log(z) + mx - x[target * s + p];
            }
            out = BasicTensor<T>::scalar(static_cast<T>(total / static_cast<double>(s)));
            break;
        }
    }
    require_finite(out, op_name(op).data());
    return out;
}

template <typename T>
std::vector<BasicTensor<T>> primitive_backward(OpId op, Inputs<T> in, const BasicTensor<T> &output,
                                               const BasicTensor<T> &g, const OpAttrs &at) {
    BasicTensor<T> recomputed;
    if (output.empty() && op == OpId::softmax) recomputed = primitive_forward(op, in, at);
    const BasicTensor<T> &y = output.empty() ? recomputed : output;
    std::vector<BasicTensor<T>> grads;
    switch (op) {
        case OpId::matmul: {
            // dA = G B^T, dB = A^T G
            auto bt = transpose2d(in[1]);
            auto at_ = transpose2d(in[0]);
            grads.push_back(matmul2d(g, bt));
            grads.push_back(matmul2d(at_, g));
            break;
        }
        case OpId::add:
            grads = binary_backward(in, g, Binary::add);
            break;
        case OpId::sub:
            grads = binary_backward(in, g, Binary::sub);
            break;
        case OpId::mul:
            grads = binary_backward(in, g, Binary::mul);
            break;
        case OpId::scale: {
            BasicTensor<T> gx = g;
            for (auto &v : gx.values()) v = static_cast<T>(v * at.alpha);
            grads.push_back(std::move(gx));
            break;
        }
        case OpId::linear: {
            const auto m = in[0].dim(0), k = in[0].dim(1), n = in[1].dim(1);
            auto wt = transpose2d(in[1]);
            grads.push_back(matmul2d(g, wt));
            BasicTensor<T> gw(in[1].shape());
            // dW[k,n] = sum_i x[i,k] g[i,n]
            for (std::int64_t i = 0; i < m; ++i) {
                const T *xr = in[0].data() + i * k;
                const T *gr = g.data() + i * n;
                for (std::int64_t p = 0; p < k; ++p) {
                    const T xv = xr[p];
                    T *wr = gw.data() + p * n;
                    for (std::int64_t j = 0; j < n; ++j) wr[j] += xv * gr[j];
                }
            }
            grads.push_back(std::move(gw));
            if (in.size() == 3) {
                BasicTensor<T> gb(Shape{n});
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                }
                grads.push_back(std::move(gb));
            }
            break;
        }
        case OpId::layer_norm: {
            const auto &x = in[0];
            const auto d = x.dim(-1);
            BasicTensor<T> gx(x.shape()), gg(in[1].shape()), gb(in[2].shape());
            std::vector<double> xhat(static_cast<std::size_t>(d));
            std::vector<double> accg(static_cast<std::size_t>(d), 0.0), accb(static_cast<std::size_t>(d), 0.0);
            for (std::int64_t r = 0; r < x.numel() / d; ++r) {
                const T *xr = x.data() + r * d;
                const T *gr = g.data() + r * d;
                double mean = 0;
                for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
                mean /= static_cast<double>(d);
                double var = 0;
                for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                var /= static_cast<double>(d);
                const double inv = 1.0 / std::sqrt(var + at.eps);
                double m1 = 0, m2 = 0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const auto ju = static_cast<std::size_t>(j);
                    xhat[ju] = (xr[j] - mean) * inv;
                    const double dxh = static_cast<double>(gr[j]) * in[1][j];
                    m1 += dxh;
                    m2 += dxh * xhat[ju];
                    accg[ju] += static_cast<double>(gr[j]) * xhat[ju];
                    accb[ju] += gr[j];
                }
                m1 /= static_cast<double>(d);
                m2 /= static_cast<double>(d);
                for (std::int64_t j = 0; j < d; ++j) {
                    const double dxh = static_cast<double>(gr[j]) * in[1][j];
                    gx[r * d + j] = static_cast<T>(inv * (dxh - m1 - xhat[static_cast<std::size_t>(j)] * m2));
                }
            }
            for (std::int64_t j = 0; j < d; ++j) {
                gg[j] = static_cast<T>(accg[static_cast<std::size_t>(j)]);
                gb[j] = static_cast<T>(accb[static_cast<std::size_t>(j)]);
            }
            grads = {std::move(gx), std::move(gg), std::move(gb)};
            break;
        }
        case OpId::softmax: {
            const auto d = y.dim(-1);
            BasicTensor<T> gx(y.shape());
            for (std::int64_t r = 0; r < y.numel() / d; ++r) {
                const T *yr = y.data() + r * d;
                const T *gr = g.data() + r * d;
                double dot = 0;
                for (std::int64_t j = 0; j < d; ++j) dot += static_cast<double>(yr[j]) * gr[j];
                for (std::int64_t j = 0; j < d; ++j) gx[r * d + j] = static_cast<T>(yr[j] * (gr[j] - dot));
            }
            grads.push_back(std::move(gx));
            break;
        }
        case OpId::silu:
        case OpId::gelu:
        case OpId::relu: {
            BasicTensor<T> gx(in[0].shape());
            for (std::int64_t i = 0; i < gx.numel(); ++i) {
                const T x = in[0][i];
                T d;
                if (op == OpId::silu) {
                    const T s = sigmoid(x);
                    d = s * (T(1) + x * (T(1) - s));
                } else if (op == OpId::gelu) {
                    const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
                    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
                    d = static_cast<T>(cdf + x * pdf);
                } else {
                    d = x > T(0) ? T(1) : T(0);
                }
                gx[i] = g[i] * d;
            }
            grads.push_back(std::move(gx));
            break;
        }
        case OpId::mean: {
            const auto &x = in[0];
            const int axis = norm_axis(at.axis, x.rank());
            auto sp = split_axis(x.shape(), axis);
            BasicTensor<T> gx(x.shape());
            const double inv = 1.0 / static_cast<double>(sp.n);
            for (std::int64_t o = 0; o < sp.outer; ++o) {
                for (std::int64_t k = 0; k < sp.n; ++k) {
                    for (std::int64_t i = 0; i < sp.inner; ++i) {
                        gx[(o * sp.n + k) * sp.inner + i] = static_cast<T>(g[o * sp.inner + i] * inv);
                    }
                }
            }
            grads.push_back(std::move(gx));
            break;
        }
        case OpId::sum: {
            grads.emplace_back(in[0].shape(), g.item());
            break;
        }
        case OpId::conv2d:
            grads = conv2d_backward(in, g, at);
            break;
        case OpId::conv_transpose2d:
            grads = deconv_backward(in, g, at);
            break;
        case OpId::max_pool2d: {
            const auto &x = in[0];
            BasicTensor<T> gx(x.shape());
            for (std::int64_t k = 0; k < g.dim(0); ++k) {
                for (std::int64_t i = 0; i < g.dim(1); ++i) {
                    for (std::int64_t j = 0; j < g.dim(2); ++j) {
                        std::int64_t by = 2 * i, bx = 2 * j;
                        for (int dy = 0; dy < 2; ++dy) {
                            for (int dx = 0; dx < 2; ++dx) {
                                if (x.at(k, 2 * i + dy, 2 * j + dx) > x.at(k, by, bx)) {
                                    by = 2 * i + dy;
                                    bx = 2 * j + dx;
                                }
                            }
                        }
                        gx.at(k, by, bx) += g.at(k, i, j);
                    }
                }
            }
            grads.push_back(std::move(gx));
            break;
        }
        case OpId::bilinear_resize_2d:
            grads.push_back(resize_backward(in, g, at));
            break;
        case OpId::adaptive_avg_pool2d:
            grads.push_back(adaptive_pool_backward(in, g, at));
            break;
        case OpId::reshape:
            grads.push_back(g.reshaped(in[0].shape()));
            break;
        case OpId::transpose:
            grads.push_back(transpose2d(g));
            break;
        case OpId::concat: {
            const int axis = norm_axis(at.axis, in[0].rank());
            auto sp = split_axis(g.shape(), axis);
            std::int64_t offset = 0;
            for (const auto &t : in) {
                BasicTensor<T> gt(t.shape());
                const auto n = t.dim(axis);
                for (std::int64_t o = 0; o < sp.outer; ++o) {
                    std::copy_n(g.data() + (o * sp.n + offset) * sp.inner, n * sp.inner,
                                gt.data() + o * n * sp.inner);
                }
                offset += n;
                grads.push_back(std::move(gt));
            }
            break;
        }
        case OpId::slice: {
            const auto &x = in[0];
            const int axis = norm_axis(at.axis, x.rank());
            auto sp = split_axis(x.shape(), axis);
            const auto n = at.end - at.begin;
            BasicTensor<T> gx(x.shape());
            for (std::int64_t o = 0; o < sp.outer; ++o) {
                std::copy_n(g.data() + o * n * sp.inner, n * sp.inner,
                            gx.data() + (o * sp.n + at.begin) * sp.inner);
            }
            grads.push_back(std::move(gx));
            break;
        }
        case OpId::dropout: {
            BasicTensor<T> gx = g;
            if (at.p > 0) {
                CounterRng rng = at.rng;
                const T keep_scale = static_cast<T>(1.0 / (1.0 - at.p));
                for (auto &v : gx.values()) v = dropout_keep(rng, at.p) ? v * keep_scale : T(0);
            }
            grads.push_back(std::move(gx));
            break;
        }
        case OpId::rope2d: {
            BasicTensor<T> gx = g;
            const auto dh = g.dim(1);
            for (std::int64_t t = at.prefix; t < g.dim(0); ++t) {
                const auto idx = rope_position(at, t - at.prefix);
                rope_rotate_vector<T>(std::span<T>(gx.data() + t * dh, static_cast<std::size_t>(dh)),
                                      static_cast<double>(idx / at.grid_w), static_cast<double>(idx % at.grid_w),
                                      /*inverse=*/true);
            }
            grads.push_back(std::move(gx));
            break;
        }
        case OpId::gather_rows: {
            const auto d = in[0].dim(1);
            BasicTensor<T> gx(in[0].shape());
            for (std::size_t r = 0; r < at.indices.size(); ++r) {
                const T *src = g.data() + static_cast<std::int64_t>(r) * d;
                T *dst = gx.data() + at.indices[r] * d;
                for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
            grads.push_back(std::move(gx));
            break;
        }
        case OpId::scatter_rows: {
            const auto d = in[0].dim(1);
            BasicTensor<T> gx = g;
            BasicTensor<T> gf(in[1].shape());
            for (std::size_t r = 0; r < at.indices.size(); ++r) {
                std::copy_n(g.data() + at.indices[r] * d, d, gf.data() + static_cast<std::int64_t>(r) * d);
            }
            for (auto i : at.indices) std::fill_n(gx.data() + i * d, d, T(0));
            grads = {std::move(gx), std::move(gf)};
            break;
        }
        case OpId::cosine_loss: {
            const auto k = in[0].dim(0), d = in[0].dim(1);
            BasicTensor<T> ga(in[0].shape()), gb(in[1].shape());
            const double scale = -static_cast<double>(g.item()) / static_cast<double>(k);
            for (std::int64_t i = 0; i < k; ++i) {
                const T *a = in[0].data() + i * d;
                const T *b = in[1].data() + i * d;
                double ab = 0, aa = 0, bb = 0;
                for (std::int64_t j = 0; j < d; ++j) {
                    ab += static_cast<double>(a[j]) * b[j];
                    aa += static_cast<double>(a[j]) * a[j];
                    bb += static_cast<double>(b[j]) * b[j];
                }
                const double na = std::sqrt(aa), nb = std::sqrt(bb);
                const double den = na * nb + kCosineEps;
                // d/da [ab / (|a||b| + eps)] = b/den - ab |b| a / (|a| den^2)
                for (std::int64_t j = 0; j < d; ++j) {
                    double da = b[j] / den - (na > 0 ? ab * nb * a[j] / (na * den * den) : 0.0);
                    double db = a[j] / den - (nb > 0 ? ab * na * b[j] / (nb * den * den) : 0.0);
                    ga[i * d + j] = static_cast<T>(scale * da);
                    gb[i * d + j] = static_cast<T>(scale * db);
                }
            }
            grads = {std::move(ga), std::move(gb)};
            break;
        }
        case OpId::bce_with_logits: {
            BasicTensor<T> gx(in[0].shape());
            double wsum = 0;
            for (std::int64_t i = 0; i < in[0].numel(); ++i) {
                wsum += at.weights.empty() ? 1.0 : at.weights[static_cast<std::size_t>(i)];
            }
            for (std::int64_t i = 0; i < in[0].numel(); ++i) {
                const double w = at.weights.empty() ? 1.0 : at.weights[static_cast<std::size_t>(i)];
                gx[i] = static_cast<T>(g.item() * w * (sigmoid<double>(in[0][i]) - in[1][i]) / wsum);
            }
            grads = {std::move(gx), BasicTensor<T>()};
            break;
        }
        case OpId::softmax_cross_entropy: {
            const auto &x = in[0];
            const auto c = x.dim(0);
            const auto s = x.numel() / c;
            BasicTensor<T> gx(x.shape());
            const double scale = static_cast<double>(g.item()) / static_cast<double>(s);
            for (std::int64_t p = 0; p < s; ++p) {
                double mx = x[p];
                for (std::int64_t k = 1; k < c; ++k) mx = std::max<double>(mx, x[k * s + p]);
                double z = 0;
                for (std::int64_t k = 0; k < c; ++k) z += std::exp(x[k * s + p] - mx);
                for (std::int64_t k = 0; k < c; ++k) {
                    double prob = std::exp(x[k * s + p] - mx) / z;
                    if (k == at.indices[static_cast<std::size_t>(p)]) prob -= 1.0;
                    gx[k * s + p] = static_cast<T>(scale * prob);
                }
            }
            grads.push_back(std::move(gx));
            break;
        }
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!grads[i].empty()) require_finite(grads[i], op_name(op).data());
    }
    return grads;
}

template <typename T>
BasicTensor<T> primitive_gradient(OpId op, Inputs<T> inputs, const BasicTensor<T> &upstream,
                                  const OpAttrs &attrs, std::size_t input_index) {
    if (input_index >= inputs.size() || !input_differentiable(op, input_index)) {
        throw ShapeError(std::string(op_name(op)) + ": input " + std::to_string(input_index) +
                         " has no defined gradient");
    }
    auto out = primitive_forward(op, inputs, attrs);
    if (out.shape() != upstream.shape()) {
        throw ShapeError(std::string(op_name(op)) + ": upstream gradient shape " + shape_str(upstream.shape()) +
                         " does not match output " + shape_str(out.shape()));
    }
    return primitive_backward(op, inputs, out, upstream, attrs)[input_index];
}

#define EVAX_INSTANTIATE_OPS(T)                                                                          \
    template BasicTensor<T> primitive_forward(OpId, const TensorList<T> &, const OpAttrs &);   \
    template std::vector<BasicTensor<T>> primitive_backward(OpId, const TensorList<T> &,       \
                                                            const BasicTensor<T> &,                      \
                                                            const BasicTensor<T> &, const OpAttrs &);    \
    template BasicTensor<T> primitive_gradient(OpId, const TensorList<T> &,                    \
                                               const BasicTensor<T> &, const OpAttrs &, std::size_t);    \
    template void rope_rotate_vector(std::span<T>, double, double, bool);                                \
    template void gemm_accumulate(const T *, const T *, T *, std::int64_t, std::int64_t, std::int64_t);

EVAX_INSTANTIATE_OPS(float)
EVAX_INSTANTIATE_OPS(double)

}  // namespace evax
