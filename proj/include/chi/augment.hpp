#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "chi/rng.hpp"
#include "chi/tensor.hpp"

namespace chi {

enum class Modality { kPoint2d, kRaster32 };
enum class AugStrength { kNone, kWeak, kStrong };

constexpr std::size_t kRasterSide = 32;
constexpr std::size_t kRasterSize = kRasterSide * kRasterSide;

inline const char* modality_name(Modality m) {
    return m == Modality::kPoint2d ? "point2d" : "raster32";
}

inline const char* strength_name(AugStrength s) {
    switch (s) {
        case AugStrength::kNone: return "none";
        case AugStrength::kWeak: return "weak";
        case AugStrength::kStrong: return "strong";
    }
    return "?";
}

// A stochastic transformation family. All ranges are defaults from
// make_policy and may be overridden through the experiment config.
struct AugPolicy {
    Modality modality = Modality::kPoint2d;
    AugStrength strength = AugStrength::kNone;

    // point2d
    double noise_sigma = 0.0;
    double rotation_range = 0.0;  // radians, drawn U(-range, +range)
    double drop_prob = 0.0;       // zero one coordinate with this probability
    double rot_center_x = 0.0;    // rotation pivot (data centroid)
    double rot_center_y = 0.0;

    // raster32
    double flip_prob = 0.0;
    int translate_extent = 0;  // integer shift U{-e..e} per axis, zero padded
    int cutout_side = 0;
    double contrast_lo = 1.0;
    double contrast_hi = 1.0;
};

inline AugPolicy make_policy(Modality modality, AugStrength strength) {
    AugPolicy p;
    p.modality = modality;
    p.strength = strength;
    if (strength == AugStrength::kNone) return p;
    if (modality == Modality::kPoint2d) {
        if (strength == AugStrength::kWeak) {
            p.noise_sigma = 0.05;
        } else {
            p.noise_sigma = 0.1;
            p.rotation_range = 15.0 * std::numbers::pi / 180.0;
            p.drop_prob = 0.2;
        }
    } else {
        p.flip_prob = 0.5;
        p.translate_extent = 2;
        if (strength == AugStrength::kStrong) {
            p.cutout_side = 8;
            p.contrast_lo = 0.5;
            p.contrast_hi = 1.5;
        }
    }
    return p;
}

namespace detail {

inline void augment_point(std::vector<double>& v, const AugPolicy& p, RngStream& rng) {
    if (p.noise_sigma > 0.0) {
        v[0] += p.noise_sigma * rng.next_gaussian();
        v[1] += p.noise_sigma * rng.next_gaussian();
    }
    if (p.strength != AugStrength::kStrong) return;
    if (p.rotation_range > 0.0) {
        const double angle = rng.next_uniform(-p.rotation_range, p.rotation_range);
        const double c = std::cos(angle), s = std::sin(angle);
        const double dx = v[0] - p.rot_center_x, dy = v[1] - p.rot_center_y;
        v[0] = p.rot_center_x + c * dx - s * dy;
        v[1] = p.rot_center_y + s * dx + c * dy;
    }
    if (rng.next_uniform() < p.drop_prob) v[rng.next_below(2)] = 0.0;
}

inline void augment_raster(std::vector<double>& v, const AugPolicy& p, RngStream& rng) {
    const std::size_t n = kRasterSide;
    if (rng.next_uniform() < p.flip_prob) {
        for (std::size_t r = 0; r < n; ++r)
            std::reverse(v.begin() + r * n, v.begin() + (r + 1) * n);
    }
    if (p.translate_extent > 0) {
        const int e = p.translate_extent;
        const int dx = int(rng.next_below(std::uint64_t(2 * e + 1))) - e;
        const int dy = int(rng.next_below(std::uint64_t(2 * e + 1))) - e;
        if (dx != 0 || dy != 0) {
            std::vector<double> shifted(v.size(), 0.0);
            for (int r = 0; r < int(n); ++r) {
                const int sr = r - dy;
                if (sr < 0 || sr >= int(n)) continue;
                for (int c = 0; c < int(n); ++c) {
                    const int sc = c - dx;
                    if (sc >= 0 && sc < int(n)) shifted[r * n + c] = v[sr * n + sc];
                }
            }
            v = std::move(shifted);
        }
    }
    if (p.strength != AugStrength::kStrong) return;
    if (p.cutout_side > 0) {
        const std::size_t side = std::size_t(p.cutout_side);
        const std::size_t r0 = rng.next_below(n - side + 1);
        const std::size_t c0 = rng.next_below(n - side + 1);
        for (std::size_t r = r0; r < r0 + side; ++r)
            std::fill(v.begin() + r * n + c0, v.begin() + r * n + c0 + side, 0.0);
    }
    const double factor = rng.next_uniform(p.contrast_lo, p.contrast_hi);
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    for (double& x : v) x = std::clamp(mean + factor * (x - mean), 0.0, 1.0);
}

}  // namespace detail

// One stochastic view of a sample. Shape preserved; deterministic given the
// stream state. Raster values stay in [0, 1].
inline std::vector<double> augment(const std::vector<double>& x, const AugPolicy& p,
                                   RngStream& rng) {
    const std::size_t want = p.modality == Modality::kPoint2d ? 2 : kRasterSize;
    if (x.size() != want)
        throw ShapeError(std::string("augment: ") + modality_name(p.modality) +
                         " policy applied to sample of size " + std::to_string(x.size()));
    std::vector<double> v = x;
    if (p.strength == AugStrength::kNone) return v;
    if (p.modality == Modality::kPoint2d)
        detail::augment_point(v, p, rng);
    else
        detail::augment_raster(v, p, rng);
    return v;
}

// Two independent views of the same sample; the draws use disjoint stream
// substates (sequential counters), so the views are independent.
inline std::pair<std::vector<double>, std::vector<double>> sample_pair(
    const std::vector<double>& x, const AugPolicy& p1, const AugPolicy& p2, RngStream& rng) {
    auto v1 = augment(x, p1, rng);
    auto v2 = augment(x, p2, rng);
    return {std::move(v1), std::move(v2)};
}

}  // namespace chi
