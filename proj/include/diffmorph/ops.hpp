#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "diffmorph/gemm.hpp"
#include "diffmorph/tensor.hpp"

namespace diffmorph {

inline constexpr double kLeakySlope = 0.2;

namespace detail {

template <class T>
T sigmoid_scalar(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

// y = f(x); df(x, y) gives dy/dx.
template <class T, class F, class DF>
BasicTensor<T> unary_map(const BasicTensor<T>& a, const char* op, F f, DF df) {
    const auto& x = a.vec();
    std::vector<T> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    return BasicTensor<T>::from_op(a.shape(), std::move(y), op, {a}, [df](Node<T>& out) {
        auto& in = out.parent(0);
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += out.grad[i] * df(in.data[i], out.data[i]);
        }
    });
}

// Elementwise binary op where either operand may be a one-element tensor
// broadcast against the other.
template <class T, class F, class DA, class DB>
BasicTensor<T> binary_map(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op, F f,
                          DA da, DB db) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    Shape shape;
    if (a.shape() == b.shape()) {
        shape = a.shape();
    } else if (b_scalar) {
        shape = a.shape();
    } else if (a_scalar) {
        shape = b.shape();
    } else {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const std::size_t n = shape_numel(shape);
    const std::size_t sa = a.numel() == n ? 1 : 0;
    const std::size_t sb = b.numel() == n ? 1 : 0;
    const auto& x = a.vec();
    const auto& z = b.vec();
    std::vector<T> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = f(x[i * sa], z[i * sb]);
    return BasicTensor<T>::from_op(std::move(shape), std::move(y), op, {a, b},
                                   [da, db, sa, sb](Node<T>& out) {
                                       auto& pa = out.parent(0);
                                       auto& pb = out.parent(1);
                                       const std::size_t n = out.data.size();
                                       if (pa.requires_grad) {
                                           auto& g = pa.ensure_grad();
                                           for (std::size_t i = 0; i < n; ++i) {
                                               g[i * sa] += out.grad[i] * da(pa.data[i * sa], pb.data[i * sb], out.data[i]);
                                           }
                                       }
                                       if (pb.requires_grad) {
                                           auto& g = pb.ensure_grad();
                                           for (std::size_t i = 0; i < n; ++i) {
                                               g[i * sb] += out.grad[i] * db(pa.data[i * sa], pb.data[i * sb], out.data[i]);
                                           }
                                       }
                                   });
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
    const long r = static_cast<long>(rank);
    if (axis < -r || axis >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::binary_map(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(1); });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::binary_map(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(-1); });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::binary_map(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
        [](T x, T, T) { return x; });
}

template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::binary_map(
        a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T x, T y, T) { return -x / (y * y); });
}

template <class T>
BasicTensor<T> pow(const BasicTensor<T>& a, T p) {
    return detail::unary_map(
        a, "pow", [p](T x) { return std::pow(x, p); },
        [p](T x, T) { return p * std::pow(x, p - T(1)); });
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
    return detail::unary_map(
        a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
BasicTensor<T> log(const BasicTensor<T>& a) {
    return detail::unary_map(
        a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
BasicTensor<T> sqrt(const BasicTensor<T>& a) {
    return detail::unary_map(
        a, "sqrt", [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
BasicTensor<T> neg(const BasicTensor<T>& a) {
    return detail::unary_map(
        a, "neg", [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
    return detail::unary_map(
        a, "sigmoid", [](T x) { return detail::sigmoid_scalar(x); },
        [](T, T y) { return y * (T(1) - y); });
}

template <class T>
BasicTensor<T> swish(const BasicTensor<T>& a) {
    return detail::unary_map(
        a, "swish", [](T x) { return x * detail::sigmoid_scalar(x); },
        [](T x, T) {
            const T s = detail::sigmoid_scalar(x);
            return s + x * s * (T(1) - s);
        });
}

template <class T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& a, T slope = T(kLeakySlope)) {
    if (auto* tr = detail::branch_trace())
        for (T x : a.vec()) tr->mix(x > T(0));
    return detail::unary_map(
        a, "leaky_relu", [slope](T x) { return x > T(0) ? x : slope * x; },
        [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
    return detail::unary_map(
        a, "scale", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
BasicTensor<T> shift(const BasicTensor<T>& a, T s) {
    return detail::unary_map(
        a, "shift", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

enum class Unary { Exp, Log, Sqrt, Neg, Swish, LeakyRelu, Sigmoid };
enum class Binary { Add, Sub, Mul, Div };

template <class T>
BasicTensor<T> elementwise(Unary kind, const BasicTensor<T>& a) {
    switch (kind) {
        case Unary::Exp: return exp(a);
        case Unary::Log: return log(a);
        case Unary::Sqrt: return sqrt(a);
        case Unary::Neg: return neg(a);
        case Unary::Swish: return swish(a);
        case Unary::LeakyRelu: return leaky_relu(a);
        case Unary::Sigmoid: return sigmoid(a);
    }
    throw std::invalid_argument("unknown unary op");
}

template <class T>
BasicTensor<T> elementwise(Binary kind, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    switch (kind) {
        case Binary::Add: return add(a, b);
        case Binary::Sub: return sub(a, b);
        case Binary::Mul: return mul(a, b);
        case Binary::Div: return div(a, b);
    }
    throw std::invalid_argument("unknown binary op");
}

template <class T> BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <class T> BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <class T> BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }
template <class T> BasicTensor<T> operator/(const BasicTensor<T>& a, const BasicTensor<T>& b) { return div(a, b); }
template <class T> BasicTensor<T> operator-(const BasicTensor<T>& a) { return neg(a); }
template <class T> BasicTensor<T> operator*(const BasicTensor<T>& a, T s) { return scale(a, s); }
template <class T> BasicTensor<T> operator*(T s, const BasicTensor<T>& a) { return scale(a, s); }
template <class T> BasicTensor<T> operator+(const BasicTensor<T>& a, T s) { return shift(a, s); }
template <class T> BasicTensor<T> operator-(const BasicTensor<T>& a, T s) { return shift(a, -s); }

// ---------------------------------------------------------------- linear algebra

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<T> c(M * N);
    detail::gemm_nn(M, N, K, a.vec().data(), b.vec().data(), c.data(), false);
    return BasicTensor<T>::from_op({M, N}, std::move(c), "matmul", {a, b},
                                   [M, N, K](detail::Node<T>& out) {
                                       auto& pa = out.parent(0);
                                       auto& pb = out.parent(1);
                                       if (pa.requires_grad) {
                                           detail::gemm(false, true, M, K, N, out.grad.data(), pb.data.data(),
                                                        pa.ensure_grad().data(), true);
                                       }
                                       if (pb.requires_grad) {
                                           detail::gemm(true, false, K, N, M, pa.data.data(), out.grad.data(),
                                                        pb.ensure_grad().data(), true);
                                       }
                                   });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
    const std::size_t R = a.dim(0), C = a.dim(1);
    auto t = detail::transposed(a.vec().data(), R, C);
    return BasicTensor<T>::from_op({C, R}, std::move(t), "transpose", {a}, [R, C](detail::Node<T>& out) {
        auto& g = out.parent(0).ensure_grad();
        for (std::size_t i = 0; i < R; ++i) {
            for (std::size_t j = 0; j < C; ++j) g[i * C + j] += out.grad[j * R + i];
        }
    });
}

// ---------------------------------------------------------------- shape ops

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return BasicTensor<T>::from_op(std::move(shape), a.vec(), "reshape", {a}, [](detail::Node<T>& out) {
        auto& g = out.parent(0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, long axis_in) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts.front().shape();
    const std::size_t axis = detail::normalize_axis(axis_in, first.size());
    Shape shape = first;
    shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(p.shape()));
        for (std::size_t d = 0; d < first.size(); ++d) {
            if (d != axis && p.dim(d) != first[d]) {
                throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
            }
        }
        shape[axis] += p.dim(axis);
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
    const std::size_t out_row = shape[axis] * inner;
    std::vector<T> data(shape_numel(shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t row = p.dim(axis) * inner;
        const auto& src = p.vec();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(src.begin() + o * row, row, data.begin() + o * out_row + off);
        }
        off += row;
    }
    return BasicTensor<T>::from_op(std::move(shape), std::move(data), "concat", parts,
                                   [offsets, outer, out_row](detail::Node<T>& out) {
                                       for (std::size_t k = 0; k < out.parents.size(); ++k) {
                                           auto& p = out.parent(k);
                                           if (!p.requires_grad) continue;
                                           auto& g = p.ensure_grad();
                                           const std::size_t row = g.size() / outer;
                                           for (std::size_t o = 0; o < outer; ++o) {
                                               const T* src = out.grad.data() + o * out_row + offsets[k];
                                               T* dst = g.data() + o * row;
                                               for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
                                           }
                                       }
                                   });
}

template <class T>
BasicTensor<T> narrow(const BasicTensor<T>& a, long axis_in, std::size_t start, std::size_t length) {
    const std::size_t axis = detail::normalize_axis(axis_in, a.rank());
    if (start + length > a.dim(axis) || length == 0) {
        throw ShapeError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") invalid for " + shape_str(a.shape()));
    }
    Shape shape = a.shape();
    shape[axis] = length;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
    const std::size_t in_row = a.dim(axis) * inner;
    const std::size_t out_row = length * inner;
    const std::size_t off = start * inner;
    std::vector<T> data(outer * out_row);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(a.vec().begin() + o * in_row + off, out_row, data.begin() + o * out_row);
    }
    return BasicTensor<T>::from_op(std::move(shape), std::move(data), "narrow", {a},
                                   [outer, in_row, out_row, off](detail::Node<T>& out) {
                                       auto& g = out.parent(0).ensure_grad();
                                       for (std::size_t o = 0; o < outer; ++o) {
                                           for (std::size_t i = 0; i < out_row; ++i) {
                                               g[o * in_row + off + i] += out.grad[o * out_row + i];
                                           }
                                       }
                                   });
}

// ---------------------------------------------------------------- reductions

enum class Reduce { Sum, Mean, Max };

/// Reduces over `axes` (all axes when empty); reduced axes are dropped.
/// Max routes its gradient to the lowest-index maximal element.
template <class T>
BasicTensor<T> reduce(Reduce kind, const BasicTensor<T>& a, std::vector<long> axes = {}) {
    const std::size_t rank = a.rank();
    std::vector<bool> reduced(rank, axes.empty());
    for (long ax : axes) reduced[detail::normalize_axis(ax, rank)] = true;

    Shape out_shape;
    for (std::size_t d = 0; d < rank; ++d) {
        if (!reduced[d]) out_shape.push_back(a.dim(d));
    }
    // Output stride for every input axis; zero on reduced axes.
    std::vector<std::size_t> ostride(rank, 0);
    {
        std::size_t s = 1;
        for (std::size_t d = rank; d-- > 0;) {
            if (!reduced[d]) {
                ostride[d] = s;
                s *= a.dim(d);
            }
        }
    }
    const std::size_t n = a.numel();
    const std::size_t m = shape_numel(out_shape);
    std::vector<std::size_t> target(n);
    {
        std::vector<std::size_t> idx(rank, 0);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t t = 0;
            for (std::size_t d = 0; d < rank; ++d) t += idx[d] * ostride[d];
            target[i] = t;
            for (std::size_t d = rank; d-- > 0;) {
                if (++idx[d] < a.dim(d)) break;
                idx[d] = 0;
            }
        }
    }
    const auto& x = a.vec();
    const std::size_t count = m == 0 ? 0 : n / m;
    std::vector<T> y(m, kind == Reduce::Max ? -std::numeric_limits<T>::infinity() : T(0));
    std::vector<std::size_t> argmax;
    if (kind == Reduce::Max) {
        argmax.assign(m, 0);
        std::vector<bool> seen(m, false);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t t = target[i];
            if (!seen[t] || x[i] > y[t]) {
                y[t] = x[i];
                argmax[t] = i;
                seen[t] = true;
            }
        }
        if (auto* tr = detail::branch_trace())
            for (auto i : argmax) tr->mix(i);
    } else {
        for (std::size_t i = 0; i < n; ++i) y[target[i]] += x[i];
        if (kind == Reduce::Mean) {
            for (auto& v : y) v /= static_cast<T>(count);
        }
    }
    const char* name = kind == Reduce::Sum ? "sum" : kind == Reduce::Mean ? "mean" : "max";
    return BasicTensor<T>::from_op(
        std::move(out_shape), std::move(y), name, {a},
        [kind, target = std::move(target), argmax = std::move(argmax), count](detail::Node<T>& out) {
            auto& g = out.parent(0).ensure_grad();
            if (kind == Reduce::Max) {
                for (std::size_t t = 0; t < argmax.size(); ++t) g[argmax[t]] += out.grad[t];
                return;
            }
            const T s = kind == Reduce::Mean ? T(1) / static_cast<T>(count) : T(1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[target[i]] * s;
        });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a, std::vector<long> axes = {}) {
    return reduce(Reduce::Sum, a, std::move(axes));
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a, std::vector<long> axes = {}) {
    return reduce(Reduce::Mean, a, std::move(axes));
}

template <class T>
BasicTensor<T> max(const BasicTensor<T>& a, std::vector<long> axes = {}) {
    return reduce(Reduce::Max, a, std::move(axes));
}

/// Softmax along the last axis.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& a) {
    if (a.rank() == 0) throw ShapeError("softmax: scalar input");
    const std::size_t cols = a.shape().back();
    const std::size_t rows = a.numel() / cols;
    const auto& x = a.vec();
    std::vector<T> y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * cols;
        T* yr = y.data() + r * cols;
        const T mx = *std::max_element(xr, xr + cols);
        T total = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            total += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= total;
    }
    return BasicTensor<T>::from_op(a.shape(), std::move(y), "softmax", {a}, [rows, cols](detail::Node<T>& out) {
        auto& g = out.parent(0).ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* yr = out.data.data() + r * cols;
            const T* gr = out.grad.data() + r * cols;
            T dot = 0;
            for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += yr[c] * (gr[c] - dot);
        }
    });
}

/// Adds a per-channel vector to x[B,C,...]; v is [C] or [B,C].
template <class T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& x, const BasicTensor<T>& v) {
    if (x.rank() < 2) throw ShapeError("add_channel_bias: input rank < 2: " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1);
    const std::size_t inner = x.numel() / (B * C);
    const bool per_batch = v.rank() == 2;
    if (!((v.rank() == 1 && v.dim(0) == C) || (per_batch && v.dim(0) == B && v.dim(1) == C))) {
        throw ShapeError("add_channel_bias: bias " + shape_str(v.shape()) + " does not fit " + shape_str(x.shape()));
    }
    std::vector<T> y = x.vec();
    const auto& bv = v.vec();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            const T add = bv[per_batch ? b * C + c : c];
            T* row = y.data() + (b * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) row[i] += add;
        }
    }
    return BasicTensor<T>::from_op(x.shape(), std::move(y), "add_channel_bias", {x, v},
                                   [B, C, inner, per_batch](detail::Node<T>& out) {
                                       auto& px = out.parent(0);
                                       auto& pv = out.parent(1);
                                       if (px.requires_grad) {
                                           auto& g = px.ensure_grad();
                                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
                                       }
                                       if (pv.requires_grad) {
                                           auto& g = pv.ensure_grad();
                                           for (std::size_t b = 0; b < B; ++b) {
                                               for (std::size_t c = 0; c < C; ++c) {
                                                   const T* row = out.grad.data() + (b * C + c) * inner;
                                                   T acc = 0;
                                                   for (std::size_t i = 0; i < inner; ++i) acc += row[i];
                                                   g[per_batch ? b * C + c : c] += acc;
                                               }
                                           }
                                       }
                                   });
}

}  // namespace diffmorph
