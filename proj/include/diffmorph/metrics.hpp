#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffmorph/data.hpp"
#include "diffmorph/tensor.hpp"
#include "diffmorph/warp.hpp"

namespace diffmorph {

inline constexpr std::size_t kSsimWindow = 8;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// ||a - b||^2 / ||b||^2
inline double nmse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "nmse");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        num += d * d;
        den += static_cast<double>(b[i]) * b[i];
    }
    if (den == 0.0) throw std::domain_error("nmse: reference image has zero norm");
    return num / den;
}

/// 10 log10(peak^2 / MSE); +infinity when the images are equal.
inline double psnr(const Tensor& a, const Tensor& b, double peak = 1.0) {
    require_same_shape(a, b, "psnr");
    double se = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

/// Mean SSIM over every 8x8 window (stride 1) of every plane formed by the
/// last two axes. Inputs are expected in [0,1].
inline double ssim(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "ssim");
    if (a.rank() < 2) throw ShapeError("ssim: need at least 2 axes, got " + shape_str(a.shape()));
    const std::size_t H = a.dim(a.rank() - 2), W = a.dim(a.rank() - 1);
    if (H < kSsimWindow || W < kSsimWindow) {
        throw ShapeError("ssim: image " + shape_str(a.shape()) + " smaller than the 8x8 window");
    }
    const std::size_t planes = a.numel() / (H * W);
    const double n = static_cast<double>(kSsimWindow * kSsimWindow);
    double total = 0.0;
    std::size_t windows = 0;
    for (std::size_t p = 0; p < planes; ++p) {
        const float* x = a.vec().data() + p * H * W;
        const float* y = b.vec().data() + p * H * W;
        for (std::size_t i = 0; i + kSsimWindow <= H; ++i)
            for (std::size_t j = 0; j + kSsimWindow <= W; ++j) {
                double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
                for (std::size_t u = 0; u < kSsimWindow; ++u)
                    for (std::size_t v = 0; v < kSsimWindow; ++v) {
                        const double xv = x[(i + u) * W + j + v], yv = y[(i + u) * W + j + v];
                        sx += xv;
                        sy += yv;
                        sxx += xv * xv;
                        syy += yv * yv;
                        sxy += xv * yv;
                    }
                const double mx = sx / n, my = sy / n;
                const double vx = sxx / n - mx * mx, vy = syy / n - my * my, cxy = sxy / n - mx * my;
                total += ((2 * mx * my + kSsimC1) * (2 * cxy + kSsimC2)) /
                         ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
                ++windows;
            }
    }
    return total / static_cast<double>(windows);
}

/// 2|A & B| / (|A| + |B|) for binary masks; 1 when both are empty.
inline double dice(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dice");
    double inter = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const float x = a[i], y = b[i];
        if ((x != 0.0f && x != 1.0f) || (y != 0.0f && y != 1.0f)) {
            throw std::domain_error("dice: masks must be binary");
        }
        inter += x * y;
        sa += x;
        sb += y;
    }
    if (sa + sb == 0.0) return 1.0;
    return 2.0 * inter / (sa + sb);
}

struct MetricReport {
    double nmse = 0.0;
    double ssim = 0.0;
    double psnr_db = 0.0;
    std::optional<double> dice;
    double fold_pct = 0.0;
};

inline const char* kReportHeader = "pair,nmse,ssim,psnr_db,dice,fold_pct";
inline constexpr std::size_t kReportColumns = 5;

/// Scores a predicted field [2,H,W] (or [1,2,H,W]) on one pair: the moving
/// image and mask are warped by it and compared with the fixed ones. Images
/// are compared after mapping to [0,1].
inline MetricReport evaluate_pair(const PairSample& s, const Tensor& field) {
    NoGradGuard no_grad;
    const Tensor fb = field.rank() == 3 ? detail::add_batch_axis(field) : field;
    auto to01 = [](const Tensor& x) {
        std::vector<float> out(x.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * 0.5f + 0.5f;
        return Tensor(x.shape(), std::move(out));
    };
    const Tensor warped = detail::drop_batch_axis(warp(detail::add_batch_axis(to01(s.m)), fb));
    const Tensor fixed = to01(s.f);
    MetricReport r;
    r.nmse = nmse(warped, fixed);
    r.ssim = ssim(warped, fixed);
    r.psnr_db = psnr(warped, fixed, 1.0);
    if (s.mask_m && s.mask_f) {
        const Tensor mw = detail::drop_batch_axis(warp_nearest(detail::add_batch_axis(*s.mask_m), fb));
        r.dice = dice(mw, *s.mask_f);
    }
    r.fold_pct = 100.0 * jacobian_fold_fraction(fb);
    return r;
}

inline std::string format_metric(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

/// The five metric cells of one report, comma separated.
inline std::string report_cells(const MetricReport& r) {
    return format_metric(r.nmse) + "," + format_metric(r.ssim) + "," + format_metric(r.psnr_db) + "," +
           (r.dice ? format_metric(*r.dice) : std::string()) + "," + format_metric(r.fold_pct);
}

struct ColumnStats {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double std = std::numeric_limits<double>::quiet_NaN();
    std::size_t count = 0;
};

/// Two-pass mean and sample standard deviation (n - 1). Values that are not
/// finite propagate into the mean.
inline ColumnStats column_stats(const std::vector<double>& values) {
    ColumnStats s;
    s.count = values.size();
    if (values.empty()) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    if (values.size() < 2) {
        s.std = 0.0;
        return s;
    }
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    return s;
}

/// Per-column "mean (std)" cells for a set of reports; dice over the reports
/// that have it.
inline std::string summary_cells(const std::vector<MetricReport>& reports) {
    std::vector<double> cols[kReportColumns];
    for (const auto& r : reports) {
        cols[0].push_back(r.nmse);
        cols[1].push_back(r.ssim);
        cols[2].push_back(r.psnr_db);
        if (r.dice) cols[3].push_back(*r.dice);
        cols[4].push_back(r.fold_pct);
    }
    std::string out;
    for (std::size_t c = 0; c < kReportColumns; ++c) {
        if (c) out += ",";
        if (cols[c].empty()) continue;
        const auto s = column_stats(cols[c]);
        out += format_metric(s.mean) + " (" + format_metric(s.std) + ")";
    }
    return out;
}

}  // namespace diffmorph
