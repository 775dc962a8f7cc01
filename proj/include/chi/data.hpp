#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "chi/augment.hpp"
#include "chi/network.hpp"
#include "chi/rng.hpp"
#include "chi/tensor.hpp"

namespace chi {

struct Sample {
    std::vector<double> input;
    std::vector<double> target;  // regression values in [0, 1]; empty for classification
    int label = -1;              // class index; -1 for regression
    std::size_t id = 0;
};

struct Dataset {
    std::vector<Sample> samples;
    Modality modality = Modality::kPoint2d;
    Task task = Task::kClassification;
    std::size_t n_classes = 0;
    std::size_t target_dim = 0;
    std::vector<std::string> factor_names;
    std::string generator;
};

// Labeled set L, unlabeled set U (targets retained for diagnostics but never
// handed to objectives), held-out test set.
struct DatasetSplit {
    std::vector<Sample> labeled;
    std::vector<Sample> unlabeled;
    std::vector<Sample> test;
    double label_ratio = 1.0;

    Modality modality = Modality::kPoint2d;
    Task task = Task::kClassification;
    std::size_t n_classes = 0;
    std::size_t target_dim = 0;
    std::vector<std::string> factor_names;
};

// ---- two moons --------------------------------------------------------------

// Classical two-moons: the upper moon is a unit-radius half circle about the
// origin, the lower moon is its point reflection shifted to the circle
// centred at (1, 0.5), so the crescents interlock without touching. Class 0
// is the upper moon.
inline Dataset gen_two_moons(std::size_t n, double noise_sigma, std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("gen_two_moons: need at least 2 samples");
    Dataset ds;
    ds.modality = Modality::kPoint2d;
    ds.task = Task::kClassification;
    ds.n_classes = 2;
    ds.generator = "two_moons";
    RngStream rng(seed, "two_moons");
    ds.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = int(i % 2);
        const double t = rng.next_uniform(0.0, std::numbers::pi);
        double x = std::cos(t);
        double y = std::sin(t);
        if (label == 1) {
            x = 1.0 - x;
            y = 0.5 - y;
        }
        x += noise_sigma * rng.next_gaussian();
        y += noise_sigma * rng.next_gaussian();
        Sample s;
        s.input = {x, y};
        s.label = label;
        s.id = i;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---- factor shapes ------------------------------------------------------------

enum class ShapeKind { kSquare, kEllipse, kHeart };

namespace detail {

// Heart implicit curve (x^2 + y^2 - 1)^3 - x^2 y^3 <= 0, vertically centred so
// the lit bounding box sits on the requested position.
inline bool inside_shape(ShapeKind kind, double dx, double dy, double radius) {
    const double gx = dx / radius;
    const double gy = dy / radius;
    switch (kind) {
        case ShapeKind::kSquare:
            return std::fabs(gx) <= 1.0 && std::fabs(gy) <= 1.0;
        case ShapeKind::kEllipse: {
            const double ey = gy / 0.6;
            return gx * gx + ey * ey <= 1.0;
        }
        case ShapeKind::kHeart: {
            const double hx = gx;
            const double hy = -gy + 0.112;
            const double q = hx * hx + hy * hy - 1.0;
            return q * q * q - hx * hx * hy * hy * hy <= 0.0;
        }
    }
    return false;
}

}  // namespace detail

// Renders a 32x32 binary raster of one shape; pure in its factor arguments.
// `scale` in [0.5, 1], position in [0, 1]^2 (pixel centre cx = pos_x * 31).
inline std::vector<double> render_shape(ShapeKind kind, double scale, double pos_x, double pos_y) {
    const double cx = pos_x * double(kRasterSide - 1);
    const double cy = pos_y * double(kRasterSide - 1);
    const double radius = scale * 8.0;
    std::vector<double> raster(kRasterSize, 0.0);
    for (std::size_t r = 0; r < kRasterSide; ++r)
        for (std::size_t c = 0; c < kRasterSide; ++c)
            if (detail::inside_shape(kind, double(c) - cx, double(r) - cy, radius))
                raster[r * kRasterSide + c] = 1.0;
    return raster;
}

// dSprites-like factor regression corpus: shape is a nuisance factor, the
// regression targets are (scale, position X, position Y), each drawn from its
// discrete grid and normalized to [0, 1]. Scale maps [0.5, 1] -> [0, 1].
inline Dataset gen_factor_shapes(std::size_t count, std::uint64_t seed) {
    if (count < 1) throw std::invalid_argument("gen_factor_shapes: need at least 1 sample");
    Dataset ds;
    ds.modality = Modality::kRaster32;
    ds.task = Task::kRegression;
    ds.target_dim = 3;
    ds.factor_names = {"scale", "pos_x", "pos_y"};
    ds.generator = "factor_shapes";
    RngStream rng(seed, "factor_shapes");
    ds.samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto kind = ShapeKind(rng.next_below(3));
        const double scale = 0.5 + 0.1 * double(rng.next_below(6));    // 6 values in [0.5, 1]
        const double pos_x = double(rng.next_below(32)) / 31.0;        // 32 values in [0, 1]
        const double pos_y = double(rng.next_below(32)) / 31.0;
        Sample s;
        s.input = render_shape(kind, scale, pos_x, pos_y);
        s.target = {(scale - 0.5) / 0.5, pos_x, pos_y};
        s.id = i;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---- splitting ----------------------------------------------------------------

struct SplitRequest {
    std::optional<double> ratio;            // labeled fraction of the train pool
    std::optional<std::size_t> count;       // absolute labeled count
    std::optional<std::size_t> per_class;   // labeled per class (implies stratify)
    double test_fraction = 0.2;             // held out before splitting
    bool stratify = false;
};

namespace detail {

inline void shuffle_indices(std::vector<std::size_t>& idx, RngStream& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.next_below(i)]);
}

}  // namespace detail

// Holds out the test set first, then draws the labeled set uniformly without
// replacement from the train pool (exact per-class counts when stratified).
inline DatasetSplit split_labeled(const Dataset& ds, const SplitRequest& req,
                                  std::uint64_t seed) {
    const std::size_t n = ds.samples.size();
    if (req.test_fraction < 0.0 || req.test_fraction >= 1.0)
        throw std::invalid_argument("split_labeled: test fraction must lie in [0, 1)");
    RngStream rng(seed, "split");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    detail::shuffle_indices(order, rng);

    const std::size_t n_test = std::size_t(std::floor(req.test_fraction * double(n)));
    std::vector<std::size_t> test_idx(order.begin(), order.begin() + n_test);
    std::vector<std::size_t> pool(order.begin() + n_test, order.end());
    if (pool.empty()) throw std::invalid_argument("split_labeled: empty train pool");

    const bool stratified = req.stratify || req.per_class.has_value();
    if (stratified && ds.task != Task::kClassification)
        throw std::invalid_argument("split_labeled: stratified split needs class labels");

    std::vector<std::size_t> labeled_idx;
    std::vector<std::size_t> unlabeled_idx;
    if (stratified) {
        std::vector<std::vector<std::size_t>> by_class(ds.n_classes);
        for (std::size_t i : pool) by_class[std::size_t(ds.samples[i].label)].push_back(i);
        std::size_t want_per_class = 0;
        if (req.per_class)
            want_per_class = *req.per_class;
        else if (req.count)
            want_per_class = *req.count / std::max<std::size_t>(ds.n_classes, 1);
        else if (req.ratio)
            want_per_class =
                std::size_t(std::llround(*req.ratio * double(pool.size()) / double(ds.n_classes)));
        else
            throw std::invalid_argument("split_labeled: no labeled count, ratio or per-class given");
        for (auto& cls : by_class) {
            if (cls.size() < want_per_class)
                throw std::invalid_argument("split_labeled: class has only " +
                                            std::to_string(cls.size()) + " samples, need " +
                                            std::to_string(want_per_class));
            detail::shuffle_indices(cls, rng);
            labeled_idx.insert(labeled_idx.end(), cls.begin(), cls.begin() + want_per_class);
            unlabeled_idx.insert(unlabeled_idx.end(), cls.begin() + want_per_class, cls.end());
        }
    } else {
        std::size_t n_labeled = 0;
        if (req.count)
            n_labeled = *req.count;
        else if (req.ratio)
            n_labeled = std::size_t(std::llround(*req.ratio * double(pool.size())));
        else
            throw std::invalid_argument("split_labeled: no labeled count or ratio given");
        if (n_labeled > pool.size())
            throw std::invalid_argument("split_labeled: requested " + std::to_string(n_labeled) +
                                        " labeled samples from a pool of " +
                                        std::to_string(pool.size()));
        detail::shuffle_indices(pool, rng);
        labeled_idx.assign(pool.begin(), pool.begin() + n_labeled);
        unlabeled_idx.assign(pool.begin() + n_labeled, pool.end());
    }
    if (labeled_idx.empty()) throw std::invalid_argument("split_labeled: labeled set is empty");

    DatasetSplit split;
    split.modality = ds.modality;
    split.task = ds.task;
    split.n_classes = ds.n_classes;
    split.target_dim = ds.target_dim;
    split.factor_names = ds.factor_names;
    for (std::size_t i : labeled_idx) split.labeled.push_back(ds.samples[i]);
    for (std::size_t i : unlabeled_idx) split.unlabeled.push_back(ds.samples[i]);
    for (std::size_t i : test_idx) split.test.push_back(ds.samples[i]);
    split.label_ratio =
        double(split.labeled.size()) / double(split.labeled.size() + split.unlabeled.size());
    return split;
}

// Input centroid, used as the rotation pivot for point augmentation.
inline std::pair<double, double> input_centroid(const DatasetSplit& split) {
    double sx = 0.0, sy = 0.0;
    std::size_t n = 0;
    auto visit = [&](const std::vector<Sample>& part) {
        for (const Sample& s : part) {
            sx += s.input[0];
            sy += s.input[1];
            ++n;
        }
    };
    visit(split.labeled);
    visit(split.unlabeled);
    if (n == 0) return {0.0, 0.0};
    return {sx / double(n), sy / double(n)};
}

}  // namespace chi
