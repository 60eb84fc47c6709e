#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffmorph/ops.hpp"
#include "diffmorph/tensor.hpp"
#include "diffmorph/warp.hpp"

namespace diffmorph {

struct LossWeights {
    double lambda = 2.0;      // registration term weight
    double lambda_phi = 1.0;  // smoothness weight inside the registration term
    int ncc_window = 9;

    void validate() const {
        if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
        if (!(lambda_phi >= 0.0)) throw std::invalid_argument("lambda_phi must be >= 0");
        if (ncc_window < 3 || ncc_window % 2 == 0) throw std::invalid_argument("ncc_window must be odd and >= 3");
    }
};

inline constexpr double kNccEps = 1e-5;

/// Mean squared error between predicted and true noise.
template <class T>
BasicTensor<T> diffusion_loss(const BasicTensor<T>& eps_hat, const BasicTensor<T>& eps) {
    require_same_shape(eps_hat, eps, "diffusion_loss");
    auto d = sub(eps_hat, eps);
    return mean(mul(d, d));
}

/// Maps [-1,1] intensities to [0,1].
template <class T>
BasicTensor<T> rescale01(const BasicTensor<T>& x) {
    return shift(scale(x, T(0.5)), T(0.5));
}

namespace detail {

// Sum over a (2r+1)^S window clamped to the grid, separably along each
// spatial axis of every [spatial...] plane.
class BoxFilter {
public:
    BoxFilter(std::vector<std::size_t> ext, std::size_t radius) : ext_(std::move(ext)), r_(radius) {
        vox_ = 1;
        stride_.resize(ext_.size());
        for (std::size_t a = ext_.size(); a-- > 0;) {
            stride_[a] = vox_;
            vox_ *= ext_[a];
        }
    }

    std::size_t voxels() const { return vox_; }

    // In-place box sum over one plane.
    void apply(double* plane) const {
        std::vector<double> line, prefix;
        for (std::size_t a = 0; a < ext_.size(); ++a) {
            const std::size_t n = ext_[a], s = stride_[a];
            line.resize(n);
            prefix.assign(n + 1, 0.0);
            for (std::size_t start = 0; start < vox_; ++start) {
                if ((start / s) % n != 0) continue;  // visit each line once, from its first element
                for (std::size_t i = 0; i < n; ++i) {
                    prefix[i + 1] = prefix[i] + plane[start + i * s];
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t lo = i >= r_ ? i - r_ : 0;
                    const std::size_t hi = std::min(n, i + r_ + 1);
                    line[i] = prefix[hi] - prefix[lo];
                }
                for (std::size_t i = 0; i < n; ++i) plane[start + i * s] = line[i];
            }
        }
    }

    // Number of in-bounds voxels in the window centred at each voxel.
    std::vector<double> counts() const {
        std::vector<double> c(vox_, 1.0);
        apply(c.data());
        return c;
    }

private:
    std::vector<std::size_t> ext_;
    std::vector<std::size_t> stride_;
    std::size_t vox_ = 1;
    std::size_t r_;
};

}  // namespace detail

/// Mean over voxels of the squared local correlation coefficient
/// cross^2 / (var_a * var_b + eps), computed over window^S neighbourhoods
/// (clipped at the border). Inputs are [B, C, spatial...].
template <class T>
BasicTensor<T> local_ncc(const BasicTensor<T>& a, const BasicTensor<T>& b, int window) {
    require_same_shape(a, b, "local_ncc");
    if (window < 1 || window % 2 == 0) throw std::invalid_argument("local_ncc: window must be odd");
    if (a.rank() < 3) throw ShapeError("local_ncc: expected [B,C,spatial...], got " + shape_str(a.shape()));
    std::vector<std::size_t> ext(a.shape().begin() + 2, a.shape().end());
    for (auto e : ext) {
        if (static_cast<std::size_t>(window) > e) {
            throw ShapeError("local_ncc: window " + std::to_string(window) + " larger than image " + shape_str(a.shape()));
        }
    }
    const detail::BoxFilter box(ext, static_cast<std::size_t>(window / 2));
    const std::size_t vox = box.voxels();
    const std::size_t planes = a.numel() / vox;
    const std::vector<double> n = box.counts();

    // Per-centre derivative coefficients, kept for backward.
    std::vector<double> g_a(a.numel()), g_b(a.numel()), g_aa(a.numel()), g_bb(a.numel()), g_ab(a.numel());
    double total = 0.0;
    std::vector<double> sa(vox), sb(vox), saa(vox), sbb(vox), sab(vox);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* av = a.vec().data() + p * vox;
        const T* bv = b.vec().data() + p * vox;
        for (std::size_t i = 0; i < vox; ++i) {
            const double x = av[i], y = bv[i];
            sa[i] = x;
            sb[i] = y;
            saa[i] = x * x;
            sbb[i] = y * y;
            sab[i] = x * y;
        }
        box.apply(sa.data());
        box.apply(sb.data());
        box.apply(saa.data());
        box.apply(sbb.data());
        box.apply(sab.data());
        for (std::size_t i = 0; i < vox; ++i) {
            const double cross = sab[i] - sa[i] * sb[i] / n[i];
            const double va = saa[i] - sa[i] * sa[i] / n[i];
            const double vb = sbb[i] - sb[i] * sb[i] / n[i];
            const double D = va * vb + kNccEps;
            total += cross * cross / D;
            const double d_cross = 2.0 * cross / D;
            const double d_va = -cross * cross * vb / (D * D);
            const double d_vb = -cross * cross * va / (D * D);
            const std::size_t k = p * vox + i;
            g_ab[k] = d_cross;
            g_aa[k] = d_va;
            g_bb[k] = d_vb;
            g_a[k] = d_cross * (-sb[i] / n[i]) + d_va * (-2.0 * sa[i] / n[i]);
            g_b[k] = d_cross * (-sa[i] / n[i]) + d_vb * (-2.0 * sb[i] / n[i]);
        }
    }
    const double count = static_cast<double>(a.numel());
    const T value = static_cast<T>(total / count);
    return BasicTensor<T>::from_op(
        {}, {value}, "local_ncc", {a, b},
        [box, vox, planes, count, g_a = std::move(g_a), g_b = std::move(g_b), g_aa = std::move(g_aa),
         g_bb = std::move(g_bb), g_ab = std::move(g_ab)](detail::Node<T>& out) {
            auto& pa = out.parent(0);
            auto& pb = out.parent(1);
            const double up = static_cast<double>(out.grad[0]) / count;
            std::vector<double> ba(vox), bb(vox), baa(vox), bbb(vox), bab(vox);
            T* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
            T* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
            for (std::size_t p = 0; p < planes; ++p) {
                const std::size_t off = p * vox;
                std::copy_n(g_a.begin() + off, vox, ba.begin());
                std::copy_n(g_b.begin() + off, vox, bb.begin());
                std::copy_n(g_aa.begin() + off, vox, baa.begin());
                std::copy_n(g_bb.begin() + off, vox, bbb.begin());
                std::copy_n(g_ab.begin() + off, vox, bab.begin());
                box.apply(ba.data());
                box.apply(bb.data());
                box.apply(baa.data());
                box.apply(bbb.data());
                box.apply(bab.data());
                for (std::size_t i = 0; i < vox; ++i) {
                    const double x = pa.data[off + i], y = pb.data[off + i];
                    if (ga) ga[off + i] += static_cast<T>(up * (ba[i] + 2.0 * x * baa[i] + y * bab[i]));
                    if (gb) gb[off + i] += static_cast<T>(up * (bb[i] + 2.0 * y * bbb[i] + x * bab[i]));
                }
            }
        });
}

/// -NCC(warp(m01, field), f01) + lambda_phi * smoothness, with m and f given
/// in [-1,1] and rescaled to [0,1] before warping.
template <class T>
BasicTensor<T> registration_loss(const BasicTensor<T>& moving, const BasicTensor<T>& fixed,
                                 const BasicTensor<T>& field, const LossWeights& w) {
    auto warped = warp(rescale01(moving), field);
    auto sim = local_ncc(warped, rescale01(fixed), w.ncc_window);
    auto smooth = field_gradient_energy(field);
    return add(neg(sim), scale(smooth, static_cast<T>(w.lambda_phi)));
}

template <class T>
struct LossTerms {
    BasicTensor<T> total;
    BasicTensor<T> diffusion;
    BasicTensor<T> regist;
    BasicTensor<T> field;
};

/// Joint objective: diffusion loss on eps_hat = G(c, x_t, t) plus lambda times
/// the registration loss of the field M(m, eps_hat). Both terms share eps_hat.
template <class T, class ScoreNetT, class DeformNetT>
LossTerms<T> total_loss(const BasicTensor<T>& moving, const BasicTensor<T>& fixed, const BasicTensor<T>& x_t,
                        const std::vector<int>& t, const BasicTensor<T>& eps, const ScoreNetT& score,
                        const DeformNetT& deform, const LossWeights& w) {
    auto eps_hat = score.forward(moving, fixed, x_t, t);
    auto l_diff = diffusion_loss(eps_hat, eps);
    auto field = deform.forward(moving, eps_hat);
    auto l_reg = registration_loss(moving, fixed, field, w);
    auto total = w.lambda == 0.0 ? l_diff : add(l_diff, scale(l_reg, static_cast<T>(w.lambda)));
    return {total, l_diff, l_reg, field};
}

}  // namespace diffmorph
