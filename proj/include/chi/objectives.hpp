#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "chi/augment.hpp"
#include "chi/network.hpp"
#include "chi/tape.hpp"
#include "chi/tensor.hpp"

namespace chi {

enum class RegressionDistance { kL1, kL2 };

struct LossKind {
    Task task = Task::kRegression;
    RegressionDistance distance = RegressionDistance::kL1;
};

enum class Method {
    kLabelOnly,
    kPiModel,
    kMeanTeacher,
    kPseudoLabel,
    kEntropyMin,
    kChi,
    kChiNoMinimax,
    kChiNoAug,
};

inline const char* method_name(Method m) {
    switch (m) {
        case Method::kLabelOnly: return "label-only";
        case Method::kPiModel: return "pi-model";
        case Method::kMeanTeacher: return "mean-teacher";
        case Method::kPseudoLabel: return "pseudo-label";
        case Method::kEntropyMin: return "entropy-min";
        case Method::kChi: return "chi";
        case Method::kChiNoMinimax: return "chi-no-minimax";
        case Method::kChiNoAug: return "chi-no-aug";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    for (Method m : {Method::kLabelOnly, Method::kPiModel, Method::kMeanTeacher,
                     Method::kPseudoLabel, Method::kEntropyMin, Method::kChi,
                     Method::kChiNoMinimax, Method::kChiNoAug})
        if (s == method_name(m)) return m;
    throw std::invalid_argument("unknown method '" + s + "'");
}

inline bool method_uses_unlabeled(Method m) { return m != Method::kLabelOnly; }

// Raw (pre-augmentation) batches. Unlabeled batches carry inputs only;
// hidden targets never reach an objective.
struct LabeledBatch {
    Tensor x;  // [B, D]
    Tensor y;  // [B, K] regression targets or one-hot rows
};

struct UnlabeledBatch {
    Tensor x;  // [B, D]
};

// Scalar loss on the tape plus the detached term values for logging.
struct ObjectiveResult {
    Tensor total;
    double sup = 0.0;
    double unsup = 0.0;
};

namespace detail {

inline void check_simplex(const char* who, const Tensor& p) {
    if (p.shape.size() != 2) throw ShapeError(std::string(who) + ": expected [batch, classes]");
    const std::size_t cols = p.shape[1];
    for (std::size_t r = 0; r < p.shape[0]; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = p.values[r * cols + c];
            if (v < -1e-6)
                throw std::invalid_argument(std::string(who) + ": negative probability");
            sum += v;
        }
        if (!std::isfinite(sum))
            throw NumericError(std::string(who) + ": non-finite prediction in row " +
                               std::to_string(r));
        if (std::fabs(sum - 1.0) > 1e-6)
            throw std::invalid_argument(std::string(who) + ": row " + std::to_string(r) +
                                        " sums to " + std::to_string(sum) + ", not a simplex");
    }
}

inline std::size_t batch_of(const Tensor& t) {
    if (t.shape.size() != 2) throw ShapeError("loss: expected [batch, dim] predictions");
    return t.shape[0];
}

}  // namespace detail

// ---- elementary losses --------------------------------------------------------

// Regression distance: mean over the batch, summed over output dimensions
// (factors are separate tasks that add up).
inline Tensor regression_distance(Tape& tape, const Tensor& a, const Tensor& b,
                                  RegressionDistance distance) {
    if (!same_shape(a, b))
        throw ShapeError("regression loss: shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    const std::size_t batch = detail::batch_of(a);
    Tensor diff = tape.sub(a, b);
    Tensor per = distance == RegressionDistance::kL1 ? tape.abs(diff) : tape.square(diff);
    return tape.scale(tape.sum(per), 1.0 / double(batch));
}

// Cross-entropy of simplex predictions against one-hot targets, batch mean.
inline Tensor cross_entropy(Tape& tape, const Tensor& pred, const Tensor& onehot) {
    detail::check_simplex("cross_entropy", pred);
    if (!same_shape(pred, onehot))
        throw ShapeError("cross_entropy: shape mismatch " + shape_str(pred.shape) + " vs " +
                         shape_str(onehot.shape));
    const std::size_t batch = detail::batch_of(pred);
    Tensor picked = tape.mul(tape.log(pred), onehot);
    return tape.scale(tape.sum(picked), -1.0 / double(batch));
}

// KL(p||q) + KL(q||p), probabilities clamped at 1e-12 inside log, batch mean.
// Written as sum (p - q) (log p - log q), which is symmetric term by term and
// non-negative by monotonicity of log.
inline Tensor symmetric_kl(Tape& tape, const Tensor& p, const Tensor& q) {
    detail::check_simplex("symmetric_kl", p);
    detail::check_simplex("symmetric_kl", q);
    if (!same_shape(p, q))
        throw ShapeError("symmetric_kl: shape mismatch " + shape_str(p.shape) + " vs " +
                         shape_str(q.shape));
    const std::size_t batch = detail::batch_of(p);
    Tensor diff = tape.sub(p, q);
    Tensor logdiff = tape.sub(tape.log(p), tape.log(q));
    return tape.scale(tape.sum(tape.mul(diff, logdiff)), 1.0 / double(batch));
}

// Per-head supervised loss of one prediction against the target.
inline Tensor head_supervised(Tape& tape, const Tensor& pred, const Tensor& y,
                              const LossKind& kind) {
    return kind.task == Task::kRegression ? regression_distance(tape, pred, y, kind.distance)
                                          : cross_entropy(tape, pred, y);
}

// Dual-head supervised loss: l_s(y1, y) + l_s(y2, y), batch mean per term.
inline Tensor supervised_loss(Tape& tape, const Tensor& y1_hat, const Tensor& y2_hat,
                              const Tensor& y, const LossKind& kind) {
    return tape.add(head_supervised(tape, y1_hat, y, kind),
                    head_supervised(tape, y2_hat, y, kind));
}

// Unsupervised consistency between two predictions: L1/L2 for regression,
// symmetric KL for classification. Zero when the predictions agree.
inline Tensor consistency_loss(Tape& tape, const Tensor& y1_hat, const Tensor& y2_hat,
                               const LossKind& kind) {
    return kind.task == Task::kRegression
               ? regression_distance(tape, y1_hat, y2_hat, kind.distance)
               : symmetric_kl(tape, y1_hat, y2_hat);
}

// ---- view assembly --------------------------------------------------------------

// Row-wise augmentation of a batch matrix into two independent views.
inline std::pair<Tensor, Tensor> augment_views(const Tensor& x, const AugPolicy& p1,
                                               const AugPolicy& p2, RngStream& rng) {
    const std::size_t batch = x.shape.at(0);
    const std::size_t dim = x.shape.at(1);
    Tensor v1 = Tensor::zeros(x.shape);
    Tensor v2 = Tensor::zeros(x.shape);
    std::vector<double> row(dim);
    for (std::size_t r = 0; r < batch; ++r) {
        std::copy_n(x.values.data() + r * dim, dim, row.data());
        auto [a, b] = sample_pair(row, p1, p2, rng);
        std::copy_n(a.data(), dim, v1.values.data() + r * dim);
        std::copy_n(b.data(), dim, v2.values.data() + r * dim);
    }
    return {v1, v2};
}

// ---- chi-model --------------------------------------------------------------------

// Single-pass minimax loss. Supervised term: dual-head loss on augmented
// labeled views. Unsupervised term: consistency between the heads on
// augmented unlabeled views, with a gradient-reversal node between the shared
// features and each head. Total is L_s - eta * L_u, so one backward delivers
//   heads:     grad(L_s) - eta * grad(L_u)          (maximize inconsistency)
//   extractor: grad(L_s) + eta * lambda * grad(L_u) (minimize inconsistency)
// With `minimax` off the reversal is dropped and the sign flips to +, which
// is the w/o-minimax ablation. `rng_unlabeled`, when given, feeds the
// unlabeled views from a separate stream.
inline ObjectiveResult chi_training_loss(Tape& tape, const ModelBundle& bound,
                                         const LabeledBatch& labeled,
                                         const UnlabeledBatch& unlabeled, const AugPolicy& p1,
                                         const AugPolicy& p2, double eta, double grl_lambda,
                                         const LossKind& kind, RngStream& rng,
                                         bool minimax = true, RngStream* rng_unlabeled = nullptr) {
    if (eta < 0.0) throw std::invalid_argument("chi_training_loss: eta must be non-negative");
    if (grl_lambda < 0.0)
        throw std::invalid_argument("chi_training_loss: grl lambda must be non-negative");

    auto [lx1, lx2] = augment_views(labeled.x, p1, p2, rng);
    auto [ly1, ly2] = forward_pair(tape, bound, lx1, lx2);
    Tensor sup = supervised_loss(tape, ly1, ly2, labeled.y, kind);

    ObjectiveResult out;
    out.sup = sup.item();
    if (eta == 0.0) {
        out.total = sup;
        return out;
    }
    if (unlabeled.x.shape.empty() || unlabeled.x.shape[0] == 0)
        throw std::invalid_argument("chi_training_loss: empty unlabeled batch with eta > 0");

    auto [ux1, ux2] = augment_views(unlabeled.x, p1, p2, rng_unlabeled ? *rng_unlabeled : rng);
    Tensor f1 = extract_features(tape, bound, ux1);
    Tensor f2 = extract_features(tape, bound, ux2);
    if (minimax) {
        f1 = tape.grad_reverse(f1, grl_lambda);
        f2 = tape.grad_reverse(f2, grl_lambda);
    }
    Tensor u1 = head_forward(tape, bound.head1, f1);
    Tensor u2 = head_forward(tape, bound.head2, f2);
    Tensor unsup = consistency_loss(tape, u1, u2, kind);
    out.unsup = unsup.item();
    out.total = tape.add(sup, tape.scale(unsup, minimax ? -eta : eta));
    return out;
}

// ---- baselines ---------------------------------------------------------------------

// Pi-model: one head, two (weak) views, consistency minimized by everyone.
// Dropout, when enabled, draws an independent mask per branch.
inline ObjectiveResult pi_model_loss(Tape& tape, const ModelBundle& bound,
                                     const LabeledBatch& labeled, const UnlabeledBatch& unlabeled,
                                     const AugPolicy& p1, const AugPolicy& p2, double eta,
                                     const LossKind& kind, RngStream& rng,
                                     double dropout_rate = 0.0,
                                     RngStream* rng_unlabeled = nullptr) {
    if (eta < 0.0) throw std::invalid_argument("pi_model_loss: eta must be non-negative");
    Dropout drop{dropout_rate, &rng};

    auto [lx1, lx2] = augment_views(labeled.x, p1, p2, rng);
    (void)lx2;
    Tensor ly = head_forward(tape, bound.head1, extract_features(tape, bound, lx1, drop), drop);
    Tensor sup = head_supervised(tape, ly, labeled.y, kind);

    ObjectiveResult out;
    out.sup = sup.item();
    if (eta == 0.0) {
        out.total = sup;
        return out;
    }
    if (unlabeled.x.shape.empty() || unlabeled.x.shape[0] == 0)
        throw std::invalid_argument("pi_model_loss: empty unlabeled batch with eta > 0");

    RngStream& urng = rng_unlabeled ? *rng_unlabeled : rng;
    Dropout udrop{dropout_rate, &urng};
    auto [ux1, ux2] = augment_views(unlabeled.x, p1, p2, urng);
    Tensor u1 = head_forward(tape, bound.head1, extract_features(tape, bound, ux1, udrop), udrop);
    Tensor u2 = head_forward(tape, bound.head1, extract_features(tape, bound, ux2, udrop), udrop);
    Tensor unsup = consistency_loss(tape, u1, u2, kind);
    out.unsup = unsup.item();
    out.total = tape.add(sup, tape.scale(unsup, eta));
    return out;
}

// Mean Teacher: the student is regularized toward the EMA twin's prediction.
// The teacher forward runs on its own record, so no gradient reaches the twin.
inline ObjectiveResult mean_teacher_loss(Tape& tape, const ModelBundle& bound,
                                         const EmaTwin& twin, const LabeledBatch& labeled,
                                         const UnlabeledBatch& unlabeled, const AugPolicy& p1,
                                         const AugPolicy& p2, double eta, const LossKind& kind,
                                         RngStream& rng, RngStream* rng_unlabeled = nullptr) {
    if (eta < 0.0) throw std::invalid_argument("mean_teacher_loss: eta must be non-negative");

    auto [lx1, lx2] = augment_views(labeled.x, p1, p2, rng);
    (void)lx2;
    Tensor ly = head_forward(tape, bound.head1, extract_features(tape, bound, lx1));
    Tensor sup = head_supervised(tape, ly, labeled.y, kind);

    ObjectiveResult out;
    out.sup = sup.item();
    if (eta == 0.0) {
        out.total = sup;
        return out;
    }
    if (unlabeled.x.shape.empty() || unlabeled.x.shape[0] == 0)
        throw std::invalid_argument("mean_teacher_loss: empty unlabeled batch with eta > 0");

    auto [ux1, ux2] = augment_views(unlabeled.x, p1, p2, rng_unlabeled ? *rng_unlabeled : rng);
    Tensor student = head_forward(tape, bound.head1, extract_features(tape, bound, ux1));
    Tape teacher_tape;
    ModelBundle teacher = bind(teacher_tape, twin.shadow);
    Tensor teacher_pred =
        head_forward(teacher_tape, teacher.head1, extract_features(teacher_tape, teacher, ux2))
            .detached();
    Tensor unsup = consistency_loss(tape, student, teacher_pred, kind);
    out.unsup = unsup.item();
    out.total = tape.add(sup, tape.scale(unsup, eta));
    return out;
}

// Pseudo-labeling (classification only): unlabeled samples whose max
// predicted probability clears the threshold train against their argmax class
// (ties break toward the lower index); no gradient flows through the label.
inline ObjectiveResult pseudo_label_loss(Tape& tape, const ModelBundle& bound,
                                         const LabeledBatch& labeled,
                                         const UnlabeledBatch& unlabeled, double threshold,
                                         const LossKind& kind, const AugPolicy& p1,
                                         const AugPolicy& p2, RngStream& rng,
                                         RngStream* rng_unlabeled = nullptr) {
    if (kind.task != Task::kClassification)
        throw std::invalid_argument("pseudo_label_loss: defined for classification only");
    if (threshold <= 0.0 || threshold > 1.0)
        throw std::invalid_argument("pseudo_label_loss: threshold must lie in (0, 1]");

    auto [lx1, lx2] = augment_views(labeled.x, p1, p2, rng);
    (void)lx2;
    Tensor ly = head_forward(tape, bound.head1, extract_features(tape, bound, lx1));
    Tensor sup = head_supervised(tape, ly, labeled.y, kind);

    ObjectiveResult out;
    out.sup = sup.item();
    if (unlabeled.x.shape.empty() || unlabeled.x.shape[0] == 0) {
        out.total = sup;
        return out;
    }

    auto [ux1, ux2] = augment_views(unlabeled.x, p1, p2, rng_unlabeled ? *rng_unlabeled : rng);
    (void)ux2;
    Tensor pred = head_forward(tape, bound.head1, extract_features(tape, bound, ux1));
    const std::size_t batch = pred.shape[0], classes = pred.shape[1];
    Tensor selected = Tensor::zeros(pred.shape);  // one-hot rows for confident samples
    for (std::size_t r = 0; r < batch; ++r) {
        std::size_t best = 0;
        double best_p = pred.values[r * classes];
        for (std::size_t c = 1; c < classes; ++c)
            if (pred.values[r * classes + c] > best_p) {
                best_p = pred.values[r * classes + c];
                best = c;
            }
        if (best_p >= threshold) selected.values[r * classes + best] = 1.0;
    }
    Tensor picked = tape.mul(tape.log(pred), selected);
    Tensor unsup = tape.scale(tape.sum(picked), -1.0 / double(batch));
    out.unsup = unsup.item();
    out.total = tape.add(sup, unsup);
    return out;
}

// Entropy minimization (classification only): adds eta * E[-sum p log p] on
// clean unlabeled predictions; no augmentation anywhere.
inline ObjectiveResult entropy_min_loss(Tape& tape, const ModelBundle& bound,
                                        const LabeledBatch& labeled,
                                        const UnlabeledBatch& unlabeled, double eta,
                                        const LossKind& kind) {
    if (kind.task != Task::kClassification)
        throw std::invalid_argument("entropy_min_loss: defined for classification only");
    if (eta < 0.0) throw std::invalid_argument("entropy_min_loss: eta must be non-negative");

    Tensor ly = head_forward(tape, bound.head1, extract_features(tape, bound, labeled.x));
    Tensor sup = head_supervised(tape, ly, labeled.y, kind);

    ObjectiveResult out;
    out.sup = sup.item();
    if (eta == 0.0 || unlabeled.x.shape.empty() || unlabeled.x.shape[0] == 0) {
        out.total = sup;
        return out;
    }
    Tensor pred = head_forward(tape, bound.head1, extract_features(tape, bound, unlabeled.x));
    const std::size_t batch = pred.shape[0];
    Tensor ent = tape.scale(tape.sum(tape.mul(pred, tape.log(pred))), -1.0 / double(batch));
    out.unsup = ent.item();
    out.total = tape.add(sup, tape.scale(ent, eta));
    return out;
}

// Supervised-only training of the full dual-head bundle (the chi pipeline
// with the unlabeled term removed).
inline ObjectiveResult label_only_loss(Tape& tape, const ModelBundle& bound,
                                       const LabeledBatch& labeled, const AugPolicy& p1,
                                       const AugPolicy& p2, const LossKind& kind,
                                       RngStream& rng) {
    auto [lx1, lx2] = augment_views(labeled.x, p1, p2, rng);
    auto [y1, y2] = forward_pair(tape, bound, lx1, lx2);
    Tensor sup = supervised_loss(tape, y1, y2, labeled.y, kind);
    ObjectiveResult out;
    out.sup = sup.item();
    out.total = sup;
    return out;
}

}  // namespace chi
