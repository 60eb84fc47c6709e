#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffmorph/io.hpp"
#include "diffmorph/tensor.hpp"
#include "diffmorph/warp.hpp"

namespace diffmorph {

/// One (moving, fixed) pair. Images and masks are [1,H,W]; the field is
/// [2,H,W] and maps m toward f under warp().
struct PairSample {
    Tensor m;
    Tensor f;
    std::optional<Tensor> gt_field;
    std::optional<Tensor> mask_m;
    std::optional<Tensor> mask_f;
};

struct SynthParams {
    std::size_t size = 32;
    double blur = 4.0;     // Gaussian sigma of the displacement noise, voxels
    double max_mag = 3.0;  // peak displacement magnitude, voxels
};

class SynthError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline Tensor add_batch_axis(const Tensor& t) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    return Tensor(std::move(s), t.vec());
}

inline Tensor drop_batch_axis(const Tensor& t) {
    Shape s(t.shape().begin() + 1, t.shape().end());
    return Tensor(std::move(s), t.vec());
}

// Separable Gaussian blur of one HxW plane with clamped borders.
inline void gaussian_blur(std::vector<double>& plane, std::size_t H, std::size_t W, double sigma) {
    if (sigma <= 0.0) return;
    const long r = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double norm = 0.0;
    for (long i = -r; i <= r; ++i) {
        k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        norm += k[static_cast<std::size_t>(i + r)];
    }
    for (auto& v : k) v /= norm;
    std::vector<double> tmp(plane.size());
    const long h = static_cast<long>(H), w = static_cast<long>(W);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            double acc = 0.0;
            for (long i = -r; i <= r; ++i) {
                const long xx = std::clamp(x + i, 0L, w - 1);
                acc += k[static_cast<std::size_t>(i + r)] * plane[static_cast<std::size_t>(y * w + xx)];
            }
            tmp[static_cast<std::size_t>(y * w + x)] = acc;
        }
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            double acc = 0.0;
            for (long i = -r; i <= r; ++i) {
                const long yy = std::clamp(y + i, 0L, h - 1);
                acc += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(yy * w + x)];
            }
            plane[static_cast<std::size_t>(y * w + x)] = acc;
        }
}

// 2-4 soft ellipses, summed and clipped to [0,1].
template <class Rng>
Tensor render_blobs(Rng& rng, std::size_t size, double margin) {
    std::uniform_int_distribution<int> count(2, 4);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double n = static_cast<double>(size);
    std::vector<double> img(size * size, 0.0);
    const int blobs = count(rng);
    // blobs stay clear of the border by the displacement margin: anything the
    // clamped warp pushes off the image cannot be pulled back by the inverse
    const double room = std::max(1.0, 0.5 * (n - 1.0) - margin);
    for (int k = 0; k < blobs; ++k) {
        const double ry = std::min(room, n * (0.10 + 0.18 * u01(rng)));
        const double rx = std::min(room, n * (0.10 + 0.18 * u01(rng)));
        const double lo = std::max(ry, rx) + margin, hi = n - 1.0 - lo;
        const double cy = hi > lo ? lo + (hi - lo) * u01(rng) : 0.5 * (n - 1.0);
        const double cx = hi > lo ? lo + (hi - lo) * u01(rng) : 0.5 * (n - 1.0);
        const double theta = std::numbers::pi * u01(rng);
        const double level = 0.6 + 0.4 * u01(rng);
        const double c = std::cos(theta), s = std::sin(theta);
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
                const double a = (c * dy + s * dx) / ry, b = (-s * dy + c * dx) / rx;
                const double r = std::sqrt(a * a + b * b);
                // edge softness of roughly one voxel
                img[y * size + x] += level / (1.0 + std::exp((r - 1.0) * std::min(rx, ry) * 2.0));
            }
    }
    std::vector<float> out(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
    return Tensor({1, size, size}, std::move(out));
}

// Blurred white noise, rescaled so the largest vector norm equals max_mag.
template <class Rng>
Tensor random_field(Rng& rng, std::size_t size, double blur, double max_mag) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t vox = size * size;
    std::vector<double> comp[2];
    for (auto& c : comp) {
        c.resize(vox);
        for (auto& v : c) v = gauss(rng);
        gaussian_blur(c, size, size, blur);
    }
    double peak = 0.0;
    for (std::size_t i = 0; i < vox; ++i) peak = std::max(peak, std::hypot(comp[0][i], comp[1][i]));
    const double s = peak > 0.0 ? max_mag / peak : 0.0;
    std::vector<float> out(2 * vox);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < vox; ++i) out[c * vox + i] = static_cast<float>(comp[c][i] * s);
    return Tensor({2, size, size}, std::move(out));
}

// Field g with warp(warp(x, v), g) ~ x, i.e. g(x) = -v(x + g(x)).
inline Tensor invert_field(const Tensor& v, int iterations = 5) {
    const Tensor vb = add_batch_axis(v);
    Tensor g = Tensor::zeros(vb.shape());
    for (int it = 0; it < iterations; ++it) {
        auto sampled = warp(vb, g);
        std::vector<float> next(sampled.numel());
        for (std::size_t i = 0; i < next.size(); ++i) next[i] = -sampled[i];
        g = Tensor(vb.shape(), std::move(next));
    }
    return drop_batch_axis(g);
}

inline Tensor to_signed(const Tensor& x01) {
    std::vector<float> out(x01.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x01[i] * 2.0f - 1.0f, -1.0f, 1.0f);
    return Tensor(x01.shape(), std::move(out));
}

inline Tensor threshold(const Tensor& x, float level) {
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > level ? 1.0f : 0.0f;
    return Tensor(x.shape(), std::move(out));
}

}  // namespace detail

/// Random blob image f, a fold-free smooth displacement v, m = f warped by v,
/// and the approximate inverse of v as ground truth.
template <class Rng>
PairSample synth_pair(Rng& rng, const SynthParams& p = {}) {
    if (p.size < 16) throw std::invalid_argument("synth_pair: size must be >= 16");
    if (!(p.blur >= 0.0) || !(p.max_mag >= 0.0)) throw std::invalid_argument("synth_pair: blur and max_mag must be >= 0");
    NoGradGuard no_grad;
    // one voxel of soft edge plus one of bilinear support beyond the largest shift
    const Tensor base = detail::render_blobs(rng, p.size, p.max_mag + 2.0);
    for (int attempt = 0; attempt < 100; ++attempt) {
        const Tensor v = detail::random_field(rng, p.size, p.blur, p.max_mag);
        const Tensor vb = detail::add_batch_axis(v);
        if (jacobian_fold_fraction(vb) != 0.0) continue;
        const Tensor gt = detail::invert_field(v);
        if (jacobian_fold_fraction(detail::add_batch_axis(gt)) != 0.0) continue;
        const Tensor base_b = detail::add_batch_axis(base);
        const Tensor moved = detail::drop_batch_axis(warp(base_b, vb));
        const Tensor mask_f = detail::threshold(base, 0.5f);
        const Tensor mask_m = detail::drop_batch_axis(warp_nearest(detail::add_batch_axis(mask_f), vb));
        return PairSample{detail::to_signed(moved), detail::to_signed(base), gt, mask_m, mask_f};
    }
    throw SynthError("synth_pair: no fold-free field after 100 draws (max_mag " + std::to_string(p.max_mag) +
                     " too large for blur " + std::to_string(p.blur) + ")");
}

struct AugmentFlags {
    bool hflip = true;
    bool vflip = true;
    bool rot90 = true;
};

namespace detail {

// new(y, x) = old(src(y, x)) for every channel of a [C,H,W] tensor.
template <class Map>
Tensor remap(const Tensor& t, std::size_t H2, std::size_t W2, Map src) {
    const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
    std::vector<float> out(C * H2 * W2);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H2; ++y)
            for (std::size_t x = 0; x < W2; ++x) {
                const auto [sy, sx] = src(y, x);
                out[(c * H2 + y) * W2 + x] = t[(c * H + sy) * W + sx];
            }
    return Tensor({C, H2, W2}, std::move(out));
}

inline Tensor negate_channel(Tensor t, std::size_t c) {
    const std::size_t plane = t.dim(1) * t.dim(2);
    std::vector<float> out = t.vec();
    for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) out[i] = -out[i];
    return Tensor(t.shape(), std::move(out));
}

inline Tensor swap_channels(const Tensor& t) {
    const std::size_t plane = t.dim(1) * t.dim(2);
    std::vector<float> out(t.numel());
    std::copy_n(t.vec().begin() + static_cast<long>(plane), plane, out.begin());
    std::copy_n(t.vec().begin(), plane, out.begin() + static_cast<long>(plane));
    return Tensor(t.shape(), std::move(out));
}

}  // namespace detail

/// Mirror along x (axis 1 of the image plane).
inline PairSample flip_horizontal(const PairSample& s) {
    auto map = [&](const Tensor& t) {
        const std::size_t W = t.dim(2);
        return detail::remap(t, t.dim(1), W, [W](std::size_t y, std::size_t x) { return std::pair{y, W - 1 - x}; });
    };
    PairSample out{map(s.m), map(s.f), {}, {}, {}};
    if (s.gt_field) out.gt_field = detail::negate_channel(map(*s.gt_field), 1);
    if (s.mask_m) out.mask_m = map(*s.mask_m);
    if (s.mask_f) out.mask_f = map(*s.mask_f);
    return out;
}

/// Mirror along y.
inline PairSample flip_vertical(const PairSample& s) {
    auto map = [&](const Tensor& t) {
        const std::size_t H = t.dim(1);
        return detail::remap(t, H, t.dim(2), [H](std::size_t y, std::size_t x) { return std::pair{H - 1 - y, x}; });
    };
    PairSample out{map(s.m), map(s.f), {}, {}, {}};
    if (s.gt_field) out.gt_field = detail::negate_channel(map(*s.gt_field), 0);
    if (s.mask_m) out.mask_m = map(*s.mask_m);
    if (s.mask_f) out.mask_f = map(*s.mask_f);
    return out;
}

/// Quarter turn: new(y, x) = old(x, W-1-y). Field components become
/// (-u1, u0) at the rotated location.
inline PairSample rotate90(const PairSample& s) {
    auto map = [&](const Tensor& t) {
        const std::size_t W = t.dim(2);
        return detail::remap(t, W, t.dim(1), [W](std::size_t y, std::size_t x) { return std::pair{x, W - 1 - y}; });
    };
    PairSample out{map(s.m), map(s.f), {}, {}, {}};
    if (s.gt_field) out.gt_field = detail::negate_channel(detail::swap_channels(map(*s.gt_field)), 0);
    if (s.mask_m) out.mask_m = map(*s.mask_m);
    if (s.mask_f) out.mask_f = map(*s.mask_f);
    return out;
}

/// Random joint flips and quarter turns of every member of the pair.
template <class Rng>
PairSample augment(const PairSample& s, Rng& rng, const AugmentFlags& flags) {
    std::uniform_int_distribution<int> coin(0, 1), quarter(0, 3);
    const bool h = flags.hflip && coin(rng);
    const bool v = flags.vflip && coin(rng);
    const int r = flags.rot90 ? quarter(rng) : 0;
    PairSample out = s;
    if (h) out = flip_horizontal(out);
    if (v) out = flip_vertical(out);
    for (int i = 0; i < r; ++i) out = rotate90(out);
    return out;
}

/// Checks the PairSample invariants; returns an empty string when valid.
inline std::string check_sample(const PairSample& s) {
    auto in_range = [](const Tensor& t) {
        return std::all_of(t.vec().begin(), t.vec().end(), [](float v) { return v >= -1.0f && v <= 1.0f; });
    };
    auto binary = [](const Tensor& t) {
        return std::all_of(t.vec().begin(), t.vec().end(), [](float v) { return v == 0.0f || v == 1.0f; });
    };
    if (s.m.rank() != 3 || s.m.shape() != s.f.shape()) return "m and f must share one [C,H,W] shape";
    if (!in_range(s.m) || !in_range(s.f)) return "intensity outside [-1,1]";
    const Shape spatial(s.m.shape().begin() + 1, s.m.shape().end());
    auto same_spatial = [&](const Tensor& t) { return t.rank() == 3 && Shape(t.shape().begin() + 1, t.shape().end()) == spatial; };
    if (s.gt_field && (!same_spatial(*s.gt_field) || s.gt_field->dim(0) != 2)) return "gt_field shape mismatch";
    for (const auto* mask : {&s.mask_m, &s.mask_f}) {
        if (!*mask) continue;
        if (!same_spatial(**mask)) return "mask shape mismatch";
        if (!binary(**mask)) return "mask not binary";
    }
    return {};
}

// ---------------------------------------------------------------------------
// Dataset directory: pairs/NNNN.{m,f,field,maskm,maskf}.dmt plus manifest.txt

inline std::string pair_id(std::size_t index) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%04zu", index);
    return buf;
}

inline void save_pair(const std::filesystem::path& dir, const std::string& id, const PairSample& s) {
    const auto pairs = dir / "pairs";
    save_tensor(pairs / (id + ".m.dmt"), s.m);
    save_tensor(pairs / (id + ".f.dmt"), s.f);
    if (s.gt_field) save_field(pairs / (id + ".field.dmt"), *s.gt_field);
    if (s.mask_m) save_tensor(pairs / (id + ".maskm.dmt"), *s.mask_m);
    if (s.mask_f) save_tensor(pairs / (id + ".maskf.dmt"), *s.mask_f);
}

inline PairSample load_pair(const std::filesystem::path& dir, const std::string& id) {
    const auto pairs = dir / "pairs";
    PairSample s{load_tensor(pairs / (id + ".m.dmt")), load_tensor(pairs / (id + ".f.dmt")), {}, {}, {}};
    auto optional = [&](const char* suffix) -> std::optional<Tensor> {
        const auto p = pairs / (id + suffix);
        if (!std::filesystem::exists(p)) return std::nullopt;
        return load_tensor(p);
    };
    s.gt_field = optional(".field.dmt");
    s.mask_m = optional(".maskm.dmt");
    s.mask_f = optional(".maskf.dmt");
    if (auto err = check_sample(s); !err.empty()) throw FormatError(id + ": " + err);
    return s;
}

/// Writes `count` pairs drawn from one seeded generator.
inline void write_synthetic_dataset(const std::filesystem::path& dir, std::size_t count, std::uint64_t seed,
                                    const SynthParams& p) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "pairs", ec);
    if (ec) throw IoError("cannot create " + (dir / "pairs").string() + ": " + ec.message());
    std::mt19937_64 rng(seed);
    std::ostringstream manifest;
    manifest << "# diffmorph synthetic pairs\n"
             << "# seed = " << seed << "\n# size = " << p.size << "\n# blur = " << p.blur
             << "\n# max_mag = " << p.max_mag << "\n# count = " << count << "\n";
    for (std::size_t i = 0; i < count; ++i) {
        const std::string id = pair_id(i);
        save_pair(dir, id, synth_pair(rng, p));
        manifest << id << "\n";
    }
    std::ofstream os(dir / "manifest.txt", std::ios::binary);
    os << manifest.str();
    if (!os) throw IoError("cannot write " + (dir / "manifest.txt").string());
}

/// Pair ids listed in manifest.txt, in file order.
inline std::vector<std::string> read_manifest(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.txt");
    if (!is) throw IoError("cannot open " + (dir / "manifest.txt").string());
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        ids.push_back(line);
    }
    return ids;
}

inline std::vector<PairSample> load_dataset(const std::filesystem::path& dir) {
    std::vector<PairSample> out;
    for (const auto& id : read_manifest(dir)) out.push_back(load_pair(dir, id));
    return out;
}

}  // namespace diffmorph
