#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "diffmorph/gemm.hpp"
#include "diffmorph/parallel.hpp"
#include "diffmorph/tensor.hpp"

namespace diffmorph {

namespace detail {

struct ConvGeometry {
    std::size_t batch, channels, height, width;  // input side of the convolution
    std::size_t kernel, stride, pad;
    std::size_t out_h, out_w;

    std::size_t rows() const { return channels * kernel * kernel; }
    std::size_t cols() const { return batch * out_h * out_w; }
};

// col[(c*k + ki)*k + kj, b*P + oy*W' + ox] = x[b, c, oy*s + ki - p, ox*s + kj - p]
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
    const std::size_t P = g.out_h * g.out_w;
    const std::size_t ncols = g.cols();
    const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
    parallel_for(g.rows(), [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
            const std::size_t c = r / (g.kernel * g.kernel);
            const long ki = static_cast<long>((r / g.kernel) % g.kernel);
            const long kj = static_cast<long>(r % g.kernel);
            T* dst = col + r * ncols;
            for (std::size_t b = 0; b < g.batch; ++b) {
                const T* src = x + (b * g.channels + c) * g.height * g.width;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride) + ki - static_cast<long>(g.pad);
                    T* out = dst + b * P + oy * g.out_w;
                    if (iy < 0 || iy >= H) {
                        for (std::size_t ox = 0; ox < g.out_w; ++ox) out[ox] = T(0);
                        continue;
                    }
                    const T* srow = src + iy * W;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride) + kj - static_cast<long>(g.pad);
                        out[ox] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
                    }
                }
            }
        }
    }, 8);
}

// Adjoint of im2col: scatters columns back into x (accumulating).
template <class T>
void col2im(const ConvGeometry& g, const T* col, T* x) {
    const std::size_t P = g.out_h * g.out_w;
    const std::size_t ncols = g.cols();
    const std::size_t kk = g.kernel * g.kernel;
    const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
    // Parallel over channels: each channel's rows write disjoint planes.
    parallel_for(g.channels, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t c = c0; c < c1; ++c) {
            for (std::size_t r = c * kk; r < (c + 1) * kk; ++r) {
                const long ki = static_cast<long>((r / g.kernel) % g.kernel);
                const long kj = static_cast<long>(r % g.kernel);
                const T* src = col + r * ncols;
                for (std::size_t b = 0; b < g.batch; ++b) {
                    T* dst = x + (b * g.channels + c) * g.height * g.width;
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride) + ki - static_cast<long>(g.pad);
                        if (iy < 0 || iy >= H) continue;
                        const T* in = src + b * P + oy * g.out_w;
                        T* drow = dst + iy * W;
                        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                            const long ix = static_cast<long>(ox * g.stride) + kj - static_cast<long>(g.pad);
                            if (ix >= 0 && ix < W) drow[ix] += in[ox];
                        }
                    }
                }
            }
        }
    });
}

// [B, O, P] <-> [O, B*P]
template <class T>
void batch_to_rows(const T* src, T* dst, std::size_t B, std::size_t O, std::size_t P) {
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o)
            std::copy_n(src + (b * O + o) * P, P, dst + o * B * P + b * P);
}

template <class T>
void rows_to_batch(const T* src, T* dst, std::size_t B, std::size_t O, std::size_t P) {
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o)
            std::copy_n(src + o * B * P + b * P, P, dst + (b * O + o) * P);
}

template <class T>
void check_conv_weight(const BasicTensor<T>& w, std::size_t in_channels, const char* op, bool transposed) {
    if (w.rank() != 4 || w.dim(2) != w.dim(3)) {
        throw ShapeError(std::string(op) + ": weight must be [O,C,k,k], got " + shape_str(w.shape()));
    }
    const std::size_t expect = transposed ? w.dim(0) : w.dim(1);
    if (expect != in_channels) {
        throw ShapeError(std::string(op) + ": weight " + shape_str(w.shape()) + " does not match " +
                         std::to_string(in_channels) + " input channels");
    }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. x[B,C,H,W], w[O,C,k,k], bias[O]
/// (bias may be an undefined tensor).
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                      std::size_t stride = 1, std::size_t pad = 0) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
    detail::check_conv_weight(w, x.dim(1), "conv2d", false);
    const std::size_t k = w.dim(2);
    if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(k));
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t H = x.dim(2), W = x.dim(3);
    if (H + 2 * pad < k || W + 2 * pad < k) {
        throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape()) + ", kernel " +
                         std::to_string(k) + ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
    }
    const std::size_t O = w.dim(0);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O)) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(O) + " outputs");
    }
    detail::ConvGeometry g{x.dim(0), x.dim(1), H, W, k, stride, pad,
                           (H + 2 * pad - k) / stride + 1, (W + 2 * pad - k) / stride + 1};
    const std::size_t P = g.out_h * g.out_w;
    std::vector<T> col(g.rows() * g.cols());
    detail::im2col(g, x.vec().data(), col.data());
    std::vector<T> rows(O * g.cols());
    detail::gemm_nn(O, g.cols(), g.rows(), w.vec().data(), col.data(), rows.data(), false);
    std::vector<T> y(g.batch * O * P);
    detail::rows_to_batch(rows.data(), y.data(), g.batch, O, P);
    if (bias.defined()) {
        for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t o = 0; o < O; ++o) {
                T* row = y.data() + (b * O + o) * P;
                for (std::size_t p = 0; p < P; ++p) row[p] += bias.vec()[o];
            }
    }
    std::vector<BasicTensor<T>> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    return BasicTensor<T>::from_op(
        {g.batch, O, g.out_h, g.out_w}, std::move(y), "conv2d", std::move(inputs), [g, O, P](detail::Node<T>& out) {
            auto& px = out.parent(0);
            auto& pw = out.parent(1);
            std::vector<T> drows(O * g.cols());
            detail::batch_to_rows(out.grad.data(), drows.data(), g.batch, O, P);
            if (out.parents.size() > 2 && out.parent(2).requires_grad) {
                auto& gb = out.parent(2).ensure_grad();
                for (std::size_t o = 0; o < O; ++o) {
                    T acc = 0;
                    const T* row = drows.data() + o * g.cols();
                    for (std::size_t i = 0; i < g.cols(); ++i) acc += row[i];
                    gb[o] += acc;
                }
            }
            if (pw.requires_grad) {
                std::vector<T> col(g.rows() * g.cols());
                detail::im2col(g, px.data.data(), col.data());
                detail::gemm(false, true, O, g.rows(), g.cols(), drows.data(), col.data(),
                             pw.ensure_grad().data(), true);
            }
            if (px.requires_grad) {
                std::vector<T> dcol(g.rows() * g.cols());
                detail::gemm(true, false, g.rows(), g.cols(), O, pw.data.data(), drows.data(), dcol.data(), false);
                detail::col2im(g, dcol.data(), px.ensure_grad().data());
            }
        });
}

/// Adjoint of conv2d: x[B,O,h,w] with w[O,C,k,k] gives [B,C,stride*h,stride*w].
/// The output size is the one whose conv2d (same k/stride/pad) has size h x w.
template <class T>
BasicTensor<T> transposed_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                                 std::size_t stride = 2, std::size_t pad = 1) {
    if (x.rank() != 4) {
        throw ShapeError("transposed_conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
    }
    detail::check_conv_weight(w, x.dim(1), "transposed_conv2d", true);
    const std::size_t k = w.dim(2);
    const std::size_t h = x.dim(2), wd = x.dim(3);
    const std::size_t H = stride * h, W = stride * wd;
    auto conv_out = [&](std::size_t n) -> long {
        if (stride == 0 || n + 2 * pad < k) return -1;
        const std::size_t span = n + 2 * pad - k;
        return static_cast<long>(span / stride + 1);
    };
    if (k % 2 == 0 || conv_out(H) != static_cast<long>(h) || conv_out(W) != static_cast<long>(wd)) {
        throw ShapeError("transposed_conv2d: kernel " + std::to_string(k) + " with stride " + std::to_string(stride) +
                         " and pad " + std::to_string(pad) + " cannot map " + shape_str(x.shape()) + " to " +
                         std::to_string(H) + "x" + std::to_string(W));
    }
    const std::size_t O = w.dim(0), C = w.dim(1);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != C)) {
        throw ShapeError("transposed_conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(C) + " outputs");
    }
    // Geometry of the forward convolution this operator is the adjoint of.
    detail::ConvGeometry g{x.dim(0), C, H, W, k, stride, pad, h, wd};
    const std::size_t P = h * wd;
    std::vector<T> xrows(O * g.cols());
    detail::batch_to_rows(x.vec().data(), xrows.data(), g.batch, O, P);
    std::vector<T> col(g.rows() * g.cols());
    detail::gemm(true, false, g.rows(), g.cols(), O, w.vec().data(), xrows.data(), col.data(), false);
    std::vector<T> y(g.batch * C * H * W, T(0));
    detail::col2im(g, col.data(), y.data());
    if (bias.defined()) {
        for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                T* plane = y.data() + (b * C + c) * H * W;
                for (std::size_t p = 0; p < H * W; ++p) plane[p] += bias.vec()[c];
            }
    }
    std::vector<BasicTensor<T>> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    return BasicTensor<T>::from_op(
        {g.batch, C, H, W}, std::move(y), "transposed_conv2d", std::move(inputs),
        [g, O, C, P, xrows = std::move(xrows)](detail::Node<T>& out) {
            auto& px = out.parent(0);
            auto& pw = out.parent(1);
            if (out.parents.size() > 2 && out.parent(2).requires_grad) {
                auto& gb = out.parent(2).ensure_grad();
                const std::size_t plane = g.height * g.width;
                for (std::size_t b = 0; b < g.batch; ++b)
                    for (std::size_t c = 0; c < C; ++c) {
                        const T* src = out.grad.data() + (b * C + c) * plane;
                        T acc = 0;
                        for (std::size_t p = 0; p < plane; ++p) acc += src[p];
                        gb[c] += acc;
                    }
            }
            if (!px.requires_grad && !pw.requires_grad) return;
            std::vector<T> col(g.rows() * g.cols());
            detail::im2col(g, out.grad.data(), col.data());
            if (pw.requires_grad) {
                detail::gemm(false, true, O, g.rows(), g.cols(), xrows.data(), col.data(), pw.ensure_grad().data(),
                             true);
            }
            if (px.requires_grad) {
                std::vector<T> drows(O * g.cols());
                detail::gemm_nn(O, g.cols(), g.rows(), pw.data.data(), col.data(), drows.data(), false);
                auto& gx = px.ensure_grad();
                std::vector<T> dx(gx.size());
                detail::rows_to_batch(drows.data(), dx.data(), g.batch, O, P);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dx[i];
            }
        });
}

/// Nearest-neighbour upsampling by 2 along both spatial axes.
template <class T>
BasicTensor<T> nearest_upsample2(const BasicTensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("nearest_upsample2: input must be [B,C,H,W], got " + shape_str(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<T> y(planes * 4 * H * W);
    const auto& src = x.vec();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < 2 * H; ++i)
            for (std::size_t j = 0; j < 2 * W; ++j)
                y[(p * 2 * H + i) * 2 * W + j] = src[(p * H + i / 2) * W + j / 2];
    return BasicTensor<T>::from_op({x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(y), "nearest_upsample2", {x},
                                   [planes, H, W](detail::Node<T>& out) {
                                       auto& g = out.parent(0).ensure_grad();
                                       for (std::size_t p = 0; p < planes; ++p)
                                           for (std::size_t i = 0; i < 2 * H; ++i)
                                               for (std::size_t j = 0; j < 2 * W; ++j)
                                                   g[(p * H + i / 2) * W + j / 2] += out.grad[(p * 2 * H + i) * 2 * W + j];
                                   });
}

inline constexpr double kGroupNormEps = 1e-5;

/// Group normalization over (channels-in-group x spatial) per batch item,
/// followed by a per-channel affine map.
template <class T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::size_t groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(kGroupNormEps)) {
    if (x.rank() < 2) throw ShapeError("group_norm: input rank < 2: " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1);
    if (groups == 0 || C % groups != 0) {
        throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
    }
    if (gamma.numel() != C || beta.numel() != C) {
        throw ShapeError("group_norm: affine parameters must have " + std::to_string(C) + " entries");
    }
    const std::size_t inner = x.numel() / (B * C);
    const std::size_t cpg = C / groups;
    const std::size_t span = cpg * inner;
    const auto& xv = x.vec();
    std::vector<T> xhat(xv.size());
    std::vector<T> inv_std(B * groups);
    std::vector<T> y(xv.size());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (b * C + gi * cpg) * inner;
            T m = 0;
            for (std::size_t i = 0; i < span; ++i) m += xv[base + i];
            m /= static_cast<T>(span);
            T var = 0;
            for (std::size_t i = 0; i < span; ++i) {
                const T d = xv[base + i] - m;
                var += d * d;
            }
            var /= static_cast<T>(span);
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[b * groups + gi] = is;
            for (std::size_t i = 0; i < span; ++i) {
                const std::size_t idx = base + i;
                const std::size_t c = gi * cpg + i / inner;
                xhat[idx] = (xv[idx] - m) * is;
                y[idx] = gamma.vec()[c] * xhat[idx] + beta.vec()[c];
            }
        }
    }
    return BasicTensor<T>::from_op(
        x.shape(), std::move(y), "group_norm", {x, gamma, beta},
        [B, C, groups, cpg, inner, span, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& out) {
            auto& px = out.parent(0);
            auto& pg = out.parent(1);
            auto& pb = out.parent(2);
            const auto& gy = out.grad;
            if (pg.requires_grad || pb.requires_grad) {
                auto& gg = pg.ensure_grad();
                auto& gb = pb.ensure_grad();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t base = (b * C + c) * inner;
                        T sg = 0, sb = 0;
                        for (std::size_t i = 0; i < inner; ++i) {
                            sg += gy[base + i] * xhat[base + i];
                            sb += gy[base + i];
                        }
                        gg[c] += sg;
                        gb[c] += sb;
                    }
            }
            if (!px.requires_grad) return;
            auto& gx = px.ensure_grad();
            const auto& gam = pg.data;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t gi = 0; gi < groups; ++gi) {
                    const std::size_t base = (b * C + gi * cpg) * inner;
                    T mean_d = 0, mean_dx = 0;
                    for (std::size_t i = 0; i < span; ++i) {
                        const T d = gy[base + i] * gam[gi * cpg + i / inner];
                        mean_d += d;
                        mean_dx += d * xhat[base + i];
                    }
                    mean_d /= static_cast<T>(span);
                    mean_dx /= static_cast<T>(span);
                    const T is = inv_std[b * groups + gi];
                    for (std::size_t i = 0; i < span; ++i) {
                        const T d = gy[base + i] * gam[gi * cpg + i / inner];
                        gx[base + i] += is * (d - mean_d - xhat[base + i] * mean_dx);
                    }
                }
        });
}

}  // namespace diffmorph
