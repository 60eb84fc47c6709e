#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "diffmorph/tensor.hpp"

namespace diffmorph {

// A registration field is a displacement tensor [B, S, spatial...] in voxel
// units with S = number of spatial axes. Channel a displaces along spatial
// axis a, so the warped image at x samples the source at x + u(x).

namespace detail {

template <class T>
std::size_t field_rank(const BasicTensor<T>& field, const char* op) {
    if (field.rank() < 3) throw ShapeError(std::string(op) + ": field rank too small: " + shape_str(field.shape()));
    const std::size_t S = field.rank() - 2;
    if (field.dim(1) != S) {
        throw ShapeError(std::string(op) + ": field " + shape_str(field.shape()) + " needs " + std::to_string(S) +
                         " displacement channels");
    }
    return S;
}

template <class T>
void check_warp_shapes(const BasicTensor<T>& image, const BasicTensor<T>& field, const char* op) {
    const std::size_t S = field_rank(field, op);
    if (S != 2 && S != 3) throw ShapeError(std::string(op) + ": only 2-D and 3-D fields are supported");
    bool ok = image.rank() == field.rank() && image.dim(0) == field.dim(0);
    for (std::size_t d = 2; ok && d < image.rank(); ++d) ok = image.dim(d) == field.dim(d);
    if (!ok) {
        throw ShapeError(std::string(op) + ": image " + shape_str(image.shape()) + " and field " +
                         shape_str(field.shape()) + " differ in rank or spatial extent");
    }
}

// Multilinear sampling on an S-dimensional grid with border clamping.
template <class T, std::size_t S>
struct Sampler {
    std::array<std::size_t, S> ext;
    std::array<std::size_t, S> stride;

    explicit Sampler(const Shape& shape) {
        std::size_t s = 1;
        for (std::size_t a = S; a-- > 0;) {
            ext[a] = shape[shape.size() - S + a];
            stride[a] = s;
            s *= ext[a];
        }
    }

    struct Corners {
        std::array<std::size_t, S> lo, hi;
        std::array<T, S> w;       // fractional part along each axis
        std::array<bool, S> inside;  // coordinate not clamped (derivative nonzero)
    };

    Corners locate(const std::array<T, S>& pos) const {
        Corners c;
        for (std::size_t a = 0; a < S; ++a) {
            const T top = static_cast<T>(ext[a] - 1);
            T p = pos[a];
            c.inside[a] = p >= T(0) && p <= top;
            p = p < T(0) ? T(0) : (p > top ? top : p);
            const T fl = std::floor(p);
            c.lo[a] = static_cast<std::size_t>(fl);
            c.hi[a] = c.lo[a] + 1 < ext[a] ? c.lo[a] + 1 : c.lo[a];
            c.w[a] = p - fl;
        }
        return c;
    }

    std::size_t corner_index(const Corners& c, unsigned mask) const {
        std::size_t idx = 0;
        for (std::size_t a = 0; a < S; ++a) idx += ((mask >> a) & 1u ? c.hi[a] : c.lo[a]) * stride[a];
        return idx;
    }

    T corner_weight(const Corners& c, unsigned mask) const {
        T w = T(1);
        for (std::size_t a = 0; a < S; ++a) w *= (mask >> a) & 1u ? c.w[a] : T(1) - c.w[a];
        return w;
    }

    // Weight derivative w.r.t. the coordinate on `axis`.
    T corner_weight_d(const Corners& c, unsigned mask, std::size_t axis) const {
        T w = T(1);
        for (std::size_t a = 0; a < S; ++a) {
            const bool high = (mask >> a) & 1u;
            if (a == axis) w *= high ? T(1) : T(-1);
            else w *= high ? c.w[a] : T(1) - c.w[a];
        }
        return w;
    }
};

template <class T, std::size_t S>
BasicTensor<T> warp_impl(const BasicTensor<T>& image, const BasicTensor<T>& field) {
    const std::size_t B = image.dim(0), C = image.dim(1);
    const Sampler<T, S> sampler(image.shape());
    std::size_t vox = 1;
    for (auto e : sampler.ext) vox *= e;
    const auto& img = image.vec();
    const auto& u = field.vec();
    std::vector<T> out(image.numel());
    for (std::size_t b = 0; b < B; ++b) {
        std::array<std::size_t, S> idx{};
        for (std::size_t v = 0; v < vox; ++v) {
            std::array<T, S> pos;
            for (std::size_t a = 0; a < S; ++a) pos[a] = static_cast<T>(idx[a]) + u[(b * S + a) * vox + v];
            const auto corners = sampler.locate(pos);
            if (auto* tr = detail::branch_trace())
                for (std::size_t a = 0; a < S; ++a) tr->mix(corners.lo[a] * 2 + corners.inside[a]);
            for (std::size_t c = 0; c < C; ++c) {
                const T* plane = img.data() + (b * C + c) * vox;
                T acc = 0;
                for (unsigned m = 0; m < (1u << S); ++m) {
                    acc += sampler.corner_weight(corners, m) * plane[sampler.corner_index(corners, m)];
                }
                out[(b * C + c) * vox + v] = acc;
            }
            for (std::size_t a = S; a-- > 0;) {
                if (++idx[a] < sampler.ext[a]) break;
                idx[a] = 0;
            }
        }
    }
    return BasicTensor<T>::from_op(image.shape(), std::move(out), "warp", {image, field},
                                   [B, C, vox, sampler](Node<T>& node) {
                                       auto& pimg = node.parent(0);
                                       auto& pfield = node.parent(1);
                                       const auto& img = pimg.data;
                                       const auto& u = pfield.data;
                                       T* gimg = pimg.requires_grad ? pimg.ensure_grad().data() : nullptr;
                                       T* gu = pfield.requires_grad ? pfield.ensure_grad().data() : nullptr;
                                       for (std::size_t b = 0; b < B; ++b) {
                                           std::array<std::size_t, S> idx{};
                                           for (std::size_t v = 0; v < vox; ++v) {
                                               std::array<T, S> pos;
                                               for (std::size_t a = 0; a < S; ++a)
                                                   pos[a] = static_cast<T>(idx[a]) + u[(b * S + a) * vox + v];
                                               const auto corners = sampler.locate(pos);
                                               for (std::size_t c = 0; c < C; ++c) {
                                                   const T g = node.grad[(b * C + c) * vox + v];
                                                   if (g == T(0)) continue;
                                                   const T* plane = img.data() + (b * C + c) * vox;
                                                   for (unsigned m = 0; m < (1u << S); ++m) {
                                                       const std::size_t at = sampler.corner_index(corners, m);
                                                       if (gimg) gimg[(b * C + c) * vox + at] += g * sampler.corner_weight(corners, m);
                                                       if (gu) {
                                                           for (std::size_t a = 0; a < S; ++a) {
                                                               if (!corners.inside[a]) continue;
                                                               gu[(b * S + a) * vox + v] +=
                                                                   g * sampler.corner_weight_d(corners, m, a) * plane[at];
                                                           }
                                                       }
                                                   }
                                               }
                                               for (std::size_t a = S; a-- > 0;) {
                                                   if (++idx[a] < sampler.ext[a]) break;
                                                   idx[a] = 0;
                                               }
                                           }
                                       }
                                   });
}

template <class T, std::size_t S>
BasicTensor<T> warp_nearest_impl(const BasicTensor<T>& image, const BasicTensor<T>& field) {
    const std::size_t B = image.dim(0), C = image.dim(1);
    const Sampler<T, S> sampler(image.shape());
    std::size_t vox = 1;
    for (auto e : sampler.ext) vox *= e;
    std::vector<T> out(image.numel());
    for (std::size_t b = 0; b < B; ++b) {
        std::array<std::size_t, S> idx{};
        for (std::size_t v = 0; v < vox; ++v) {
            std::size_t at = 0;
            for (std::size_t a = 0; a < S; ++a) {
                const double p = static_cast<double>(idx[a]) + static_cast<double>(field[(b * S + a) * vox + v]);
                const double top = static_cast<double>(sampler.ext[a] - 1);
                const double r = std::round(p < 0.0 ? 0.0 : (p > top ? top : p));
                at += static_cast<std::size_t>(r) * sampler.stride[a];
            }
            for (std::size_t c = 0; c < C; ++c) out[(b * C + c) * vox + v] = image[(b * C + c) * vox + at];
            for (std::size_t a = S; a-- > 0;) {
                if (++idx[a] < sampler.ext[a]) break;
                idx[a] = 0;
            }
        }
    }
    return BasicTensor<T>(image.shape(), std::move(out));
}

}  // namespace detail

/// Differentiable bi/tri-linear resampling: out(x) = image(x + u(x)), with
/// sample coordinates clamped to the image border.
template <class T>
BasicTensor<T> warp(const BasicTensor<T>& image, const BasicTensor<T>& field) {
    detail::check_warp_shapes(image, field, "warp");
    if (field.rank() == 4) return detail::warp_impl<T, 2>(image, field);
    return detail::warp_impl<T, 3>(image, field);
}

/// Nearest-neighbour variant for label maps; not differentiable.
template <class T>
BasicTensor<T> warp_nearest(const BasicTensor<T>& image, const BasicTensor<T>& field) {
    detail::check_warp_shapes(image, field, "warp_nearest");
    if (field.rank() == 4) return detail::warp_nearest_impl<T, 2>(image, field);
    return detail::warp_nearest_impl<T, 3>(image, field);
}

/// Fraction of interior voxels where det(I + grad u) <= 0, using central
/// differences. Boundary voxels are excluded.
template <class T>
double jacobian_fold_fraction(const BasicTensor<T>& field) {
    const std::size_t S = detail::field_rank(field, "jacobian_fold_fraction");
    if (S != 2 && S != 3) throw ShapeError("jacobian_fold_fraction: only 2-D and 3-D fields are supported");
    std::vector<std::size_t> ext(S), stride(S);
    std::size_t vox = 1;
    for (std::size_t a = S; a-- > 0;) {
        ext[a] = field.dim(2 + a);
        if (ext[a] < 3) {
            throw ShapeError("jacobian_fold_fraction: every spatial extent must be >= 3, got " + shape_str(field.shape()));
        }
        stride[a] = vox;
        vox *= ext[a];
    }
    const auto& u = field.vec();
    std::size_t folds = 0, total = 0;
    for (std::size_t b = 0; b < field.dim(0); ++b) {
        std::vector<std::size_t> idx(S, 1);
        for (;;) {
            std::size_t v = 0;
            for (std::size_t a = 0; a < S; ++a) v += idx[a] * stride[a];
            double J[3][3] = {};
            for (std::size_t c = 0; c < S; ++c) {
                for (std::size_t a = 0; a < S; ++a) {
                    const std::size_t base = (b * S + c) * vox;
                    const double d = (static_cast<double>(u[base + v + stride[a]]) -
                                      static_cast<double>(u[base + v - stride[a]])) * 0.5;
                    J[c][a] = (c == a ? 1.0 : 0.0) + d;
                }
            }
            const double det = S == 2 ? J[0][0] * J[1][1] - J[0][1] * J[1][0]
                                      : J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                                            J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                                            J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
            if (det <= 0.0) ++folds;
            ++total;
            bool wrapped = true;
            for (std::size_t a = S; wrapped && a-- > 0;) {
                wrapped = ++idx[a] == ext[a] - 1;
                if (wrapped) idx[a] = 1;
            }
            if (wrapped) break;
        }
    }
    return static_cast<double>(folds) / static_cast<double>(total);
}

/// Sum over channels and axes of the mean squared forward difference of the
/// field along that axis.
template <class T>
BasicTensor<T> field_gradient_energy(const BasicTensor<T>& field) {
    const std::size_t S = detail::field_rank(field, "field_gradient_energy");
    const std::size_t B = field.dim(0);
    std::vector<std::size_t> ext(S), stride(S);
    std::size_t vox = 1;
    for (std::size_t a = S; a-- > 0;) {
        ext[a] = field.dim(2 + a);
        stride[a] = vox;
        vox *= ext[a];
    }
    const auto& u = field.vec();
    // Per axis: number of valid difference positions per (b, channel).
    std::vector<std::size_t> counts(S);
    for (std::size_t a = 0; a < S; ++a) counts[a] = vox / ext[a] * (ext[a] - 1);

    T energy = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < S; ++c) {
            const std::size_t base = (b * S + c) * vox;
            for (std::size_t a = 0; a < S; ++a) {
                if (counts[a] == 0) continue;
                T acc = 0;
                for (std::size_t v = 0; v < vox; ++v) {
                    if ((v / stride[a]) % ext[a] == ext[a] - 1) continue;
                    const T d = u[base + v + stride[a]] - u[base + v];
                    acc += d * d;
                }
                energy += acc / static_cast<T>(counts[a] * B);
            }
        }
    return BasicTensor<T>::from_op({}, {energy}, "field_gradient_energy", {field},
                                   [visit_counts = counts, ext, stride, vox, B, S](detail::Node<T>& node) {
                                       auto& pf = node.parent(0);
                                       auto& g = pf.ensure_grad();
                                       const auto& u = pf.data;
                                       const T up = node.grad[0];
                                       for (std::size_t b = 0; b < B; ++b)
                                           for (std::size_t c = 0; c < S; ++c) {
                                               const std::size_t base = (b * S + c) * vox;
                                               for (std::size_t a = 0; a < S; ++a) {
                                                   if (visit_counts[a] == 0) continue;
                                                   const T norm = T(1) / static_cast<T>(visit_counts[a] * B);
                                                   for (std::size_t v = 0; v < vox; ++v) {
                                                       if ((v / stride[a]) % ext[a] == ext[a] - 1) continue;
                                                       const std::size_t i0 = base + v, i1 = base + v + stride[a];
                                                       const T d = T(2) * (u[i1] - u[i0]) * norm * up;
                                                       g[i1] += d;
                                                       g[i0] -= d;
                                                   }
                                               }
                                           }
                                   });
}

}  // namespace diffmorph
