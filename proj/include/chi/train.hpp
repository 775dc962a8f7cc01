#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chi/augment.hpp"
#include "chi/data.hpp"
#include "chi/metrics.hpp"
#include "chi/network.hpp"
#include "chi/objectives.hpp"
#include "chi/rng.hpp"
#include "chi/tape.hpp"

namespace chi {

struct TrainConfig {
    Method method = Method::kChi;
    double eta = 0.1;
    double grl_lambda = 1.0;
    double learning_rate = 0.03;
    double head_lr_multiplier = 10.0;
    double momentum = 0.95;
    double ema_alpha = 0.99;
    std::size_t epochs = 100;
    std::size_t labeled_batch = 10;
    std::size_t unlabeled_batch = 50;
    std::uint64_t master_seed = 1;
    LossKind loss;
    AugPolicy policy1;
    AugPolicy policy2;
    bool warmup = false;        // linear eta ramp over the first fifth of epochs
    double clip_norm = 0.0;     // global-norm gradient clip, 0 = off
    double pseudo_threshold = 0.95;
    double dropout = 0.0;       // pi-model only
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss_sup = 0.0;
    double loss_unsup = 0.0;
    double disagreement = 0.0;
    MetricsReport test;
};

struct History {
    std::vector<EpochRecord> epochs;
};

// ---- optimizer ---------------------------------------------------------------

// Heavy-ball SGD: v <- mu v + g; p <- p - lr v. Head parameters use
// lr * head_lr_multiplier, mirroring the fine-tuning recipe.
inline void sgd_momentum_step(ModelBundle& bundle, const GradientMap& grads, GradientMap& velocity,
                              double lr, double head_lr_multiplier, double momentum) {
    visit_params(bundle, [&](const std::string& name, Tensor& p) {
        auto [it, fresh] = velocity.try_emplace(name, Tensor::zeros(p.shape));
        Tensor& v = it->second;
        if (!same_shape(v, p)) throw ShapeError("sgd step: velocity shape mismatch for " + name);
        const auto git = grads.find(name);
        const double group_lr = is_head_param(name) ? lr * head_lr_multiplier : lr;
        for (std::size_t i = 0; i < p.values.size(); ++i) {
            const double g = git == grads.end() ? 0.0 : git->second.values[i];
            v.values[i] = momentum * v.values[i] + g;
            p.values[i] -= group_lr * v.values[i];
        }
        (void)fresh;
    });
}

inline void clip_gradients(GradientMap& grads, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (double v : g.values) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads)
        for (double& v : g.values) v *= scale;
}

// ---- evaluation -----------------------------------------------------------------

inline Tensor stack_inputs(const std::vector<Sample>& samples) {
    if (samples.empty()) throw std::invalid_argument("stack_inputs: empty sample list");
    const std::size_t dim = samples[0].input.size();
    Tensor x = Tensor::zeros({samples.size(), dim});
    for (std::size_t r = 0; r < samples.size(); ++r)
        std::copy_n(samples[r].input.data(), dim, x.values.data() + r * dim);
    return x;
}

inline Tensor stack_targets(const std::vector<Sample>& samples, Task task,
                            std::size_t target_dim, std::size_t n_classes) {
    if (task == Task::kRegression) {
        Tensor y = Tensor::zeros({samples.size(), target_dim});
        for (std::size_t r = 0; r < samples.size(); ++r)
            std::copy_n(samples[r].target.data(), target_dim, y.values.data() + r * target_dim);
        return y;
    }
    Tensor y = Tensor::zeros({samples.size(), n_classes});
    for (std::size_t r = 0; r < samples.size(); ++r)
        y.values[r * n_classes + std::size_t(samples[r].label)] = 1.0;
    return y;
}

// Test metrics from head-mean predictions on clean inputs.
inline MetricsReport evaluate(const ModelBundle& bundle, const std::vector<Sample>& samples,
                              Task task) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty sample list");
    MetricsReport report;
    report.task = task;
    Tensor pred = forward_inference(bundle, stack_inputs(samples));
    const std::size_t dim = pred.shape[1];
    if (task == Task::kClassification) {
        std::size_t wrong = 0;
        for (std::size_t r = 0; r < samples.size(); ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < dim; ++c)
                if (pred.values[r * dim + c] > pred.values[r * dim + best]) best = c;
            if (int(best) != samples[r].label) ++wrong;
        }
        report.error_rate = double(wrong) / double(samples.size());
        return report;
    }
    report.mae_per_factor.assign(dim, 0.0);
    std::vector<double> per_sample(samples.size(), 0.0);
    for (std::size_t r = 0; r < samples.size(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dim; ++c) {
            const double e = std::fabs(pred.values[r * dim + c] - samples[r].target[c]);
            report.mae_per_factor[c] += e;
            acc += e;
        }
        per_sample[r] = acc / double(dim);
    }
    for (double& m : report.mae_per_factor) m /= double(samples.size());
    report.mae = arithmetic_mean(report.mae_per_factor);
    report.gm = geometric_mean_error(per_sample);
    return report;
}

// Mean consistency-loss value between the two heads on clean inputs; the
// degeneration diagnostic.
inline double head_disagreement(const ModelBundle& bundle, const std::vector<Sample>& samples,
                                const LossKind& kind) {
    if (samples.empty()) throw std::invalid_argument("head_disagreement: empty sample list");
    Tape tape;
    ModelBundle bound = bind(tape, bundle);
    Tensor features = extract_features(tape, bound, stack_inputs(samples));
    Tensor y1 = head_forward(tape, bound.head1, features);
    Tensor y2 = head_forward(tape, bound.head2, features);
    return consistency_loss(tape, y1, y2, kind).item();
}

// ---- diagnostics -----------------------------------------------------------------

struct Rect {
    double x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
};

struct BoundaryGrid {
    std::size_t resolution = 0;
    Rect bounds;
    std::vector<double> xs, ys;  // lattice coordinates per grid point, row-major
    Tensor predictions;          // [resolution^2, output_dim]
};

// resolution x resolution lattice of clean-input predictions over the
// rectangle, row-major, endpoints included.
inline BoundaryGrid decision_boundary_grid(const ModelBundle& bundle, const Rect& bounds,
                                           std::size_t resolution) {
    if (bundle.input_width() != 2)
        throw std::invalid_argument("decision_boundary_grid: model input is not 2-D");
    if (resolution < 2)
        throw std::invalid_argument("decision_boundary_grid: resolution must be at least 2");
    BoundaryGrid grid;
    grid.resolution = resolution;
    grid.bounds = bounds;
    Tensor x = Tensor::zeros({resolution * resolution, 2});
    for (std::size_t j = 0; j < resolution; ++j) {
        const double y = bounds.y0 + (bounds.y1 - bounds.y0) * double(j) / double(resolution - 1);
        for (std::size_t i = 0; i < resolution; ++i) {
            const double px = bounds.x0 + (bounds.x1 - bounds.x0) * double(i) / double(resolution - 1);
            x.values[(j * resolution + i) * 2] = px;
            x.values[(j * resolution + i) * 2 + 1] = y;
            grid.xs.push_back(px);
            grid.ys.push_back(y);
        }
    }
    grid.predictions = forward_inference(bundle, x);
    return grid;
}

struct FeatureDump {
    std::size_t feature_width = 0;
    // one row per sample: features..., target..., tag
    std::vector<std::vector<double>> rows;
};

// tag: 1 labeled, 0 unlabeled, 2 test.
inline void append_features(FeatureDump& dump, const ModelBundle& bundle,
                            const std::vector<Sample>& samples, double tag) {
    if (samples.empty()) return;
    Tape tape;
    ModelBundle bound = bind(tape, bundle);
    Tensor features = extract_features(tape, bound, stack_inputs(samples));
    const std::size_t width = features.shape[1];
    dump.feature_width = width;
    for (std::size_t r = 0; r < samples.size(); ++r) {
        std::vector<double> row(features.values.begin() + r * width,
                                features.values.begin() + (r + 1) * width);
        if (samples[r].label >= 0)
            row.push_back(double(samples[r].label));
        else
            row.insert(row.end(), samples[r].target.begin(), samples[r].target.end());
        row.push_back(tag);
        dump.rows.push_back(std::move(row));
    }
}

inline FeatureDump dump_features(const ModelBundle& bundle, const DatasetSplit& split) {
    FeatureDump dump;
    append_features(dump, bundle, split.labeled, 1.0);
    append_features(dump, bundle, split.unlabeled, 0.0);
    append_features(dump, bundle, split.test, 2.0);
    return dump;
}

// ---- samplers -----------------------------------------------------------------------

// Cyclic shuffled index sampler. Reshuffles whenever the pass completes; the
// stream counter taken before the current shuffle makes restore exact.
class BatchSampler {
public:
    BatchSampler() = default;

    BatchSampler(std::size_t n, std::uint64_t seed, std::string_view stream_name)
        : indices_(n), stream_(seed, stream_name) {
        reshuffle();
    }

    std::vector<std::size_t> next(std::size_t batch) {
        std::vector<std::size_t> out;
        out.reserve(batch);
        for (std::size_t k = 0; k < batch; ++k) {
            if (cursor_ == indices_.size()) reshuffle();
            out.push_back(indices_[cursor_++]);
        }
        return out;
    }

    std::uint64_t shuffle_counter() const { return counter_at_shuffle_; }
    std::size_t cursor() const { return cursor_; }

    void restore(std::uint64_t counter_at_shuffle, std::size_t cursor) {
        stream_.set_counter(counter_at_shuffle);
        reshuffle();
        cursor_ = cursor;
    }

private:
    // Restarts from the identity permutation so the result is a pure function
    // of the stream counter; restore() replays it from a saved counter.
    void reshuffle() {
        counter_at_shuffle_ = stream_.counter();
        for (std::size_t i = 0; i < indices_.size(); ++i) indices_[i] = i;
        for (std::size_t i = indices_.size(); i > 1; --i)
            std::swap(indices_[i - 1], indices_[stream_.next_below(i)]);
        cursor_ = 0;
    }

    std::vector<std::size_t> indices_;
    RngStream stream_;
    std::size_t cursor_ = 0;
    std::uint64_t counter_at_shuffle_ = 0;
};

// ---- trainer -----------------------------------------------------------------------

struct TrainerState {
    std::size_t epoch = 0;
    std::uint64_t aug_labeled_counter = 0;
    std::uint64_t aug_unlabeled_counter = 0;
    std::uint64_t labeled_shuffle_counter = 0;
    std::size_t labeled_cursor = 0;
    std::uint64_t unlabeled_shuffle_counter = 0;
    std::size_t unlabeled_cursor = 0;
};

class Trainer {
public:
    Trainer(TrainConfig config, ModelBundle bundle, const DatasetSplit& split)
        : config_(std::move(config)), bundle_(std::move(bundle)), split_(&split) {
        validate();
        labeled_sampler_ = BatchSampler(split.labeled.size(), config_.master_seed, "shuffle.labeled");
        if (!split.unlabeled.empty())
            unlabeled_sampler_ =
                BatchSampler(split.unlabeled.size(), config_.master_seed, "shuffle.unlabeled");
        aug_labeled_ = RngStream(config_.master_seed, "aug.labeled");
        aug_unlabeled_ = RngStream(config_.master_seed, "aug.unlabeled");
        if (config_.method == Method::kMeanTeacher)
            twin_ = make_ema_twin(bundle_, config_.ema_alpha);
    }

    const ModelBundle& bundle() const { return bundle_; }
    const History& history() const { return history_; }
    const EmaTwin* twin() const { return twin_ ? &*twin_ : nullptr; }
    std::size_t epoch() const { return epoch_; }
    const TrainConfig& config() const { return config_; }

    std::size_t steps_per_epoch() const {
        const bool paced_by_unlabeled =
            method_uses_unlabeled(config_.method) && !split_->unlabeled.empty();
        const std::size_t n = paced_by_unlabeled ? split_->unlabeled.size() : split_->labeled.size();
        const std::size_t b = paced_by_unlabeled
                                  ? std::min(config_.unlabeled_batch, split_->unlabeled.size())
                                  : std::min(config_.labeled_batch, split_->labeled.size());
        return (n + b - 1) / b;
    }

    // Runs one epoch (a full pass over the pacing set) and appends a record.
    void run_epoch() {
        const std::size_t steps = steps_per_epoch();
        double sup_acc = 0.0, unsup_acc = 0.0;
        for (std::size_t s = 0; s < steps; ++s) {
            auto [sup, unsup] = step();
            sup_acc += sup;
            unsup_acc += unsup;
        }
        EpochRecord rec;
        rec.epoch = epoch_;
        rec.loss_sup = sup_acc / double(steps);
        rec.loss_unsup = unsup_acc / double(steps);
        rec.disagreement =
            split_->unlabeled.empty() ? 0.0
                                      : head_disagreement(bundle_, split_->unlabeled, config_.loss);
        rec.test = evaluate(bundle_, split_->test, split_->task);
        history_.epochs.push_back(std::move(rec));
        ++epoch_;
    }

    void run_to(std::size_t target_epochs) {
        while (epoch_ < target_epochs) run_epoch();
    }

    TrainerState state() const {
        TrainerState st;
        st.epoch = epoch_;
        st.aug_labeled_counter = aug_labeled_.counter();
        st.aug_unlabeled_counter = aug_unlabeled_.counter();
        st.labeled_shuffle_counter = labeled_sampler_.shuffle_counter();
        st.labeled_cursor = labeled_sampler_.cursor();
        st.unlabeled_shuffle_counter = unlabeled_sampler_.shuffle_counter();
        st.unlabeled_cursor = unlabeled_sampler_.cursor();
        return st;
    }

    GradientMap& velocity() { return velocity_; }
    const GradientMap& velocity() const { return velocity_; }
    ModelBundle& mutable_bundle() { return bundle_; }
    EmaTwin* mutable_twin() { return twin_ ? &*twin_ : nullptr; }

    void restore_state(const TrainerState& st) {
        epoch_ = st.epoch;
        aug_labeled_.set_counter(st.aug_labeled_counter);
        aug_unlabeled_.set_counter(st.aug_unlabeled_counter);
        labeled_sampler_.restore(st.labeled_shuffle_counter, st.labeled_cursor);
        if (!split_->unlabeled.empty())
            unlabeled_sampler_.restore(st.unlabeled_shuffle_counter, st.unlabeled_cursor);
    }

private:
    void validate() const {
        if (split_->labeled.empty()) throw std::invalid_argument("train: no labeled data");
        if (split_->test.empty()) throw std::invalid_argument("train: no test data");
        if (config_.momentum < 0.0 || config_.momentum >= 1.0)
            throw std::invalid_argument("train: momentum must lie in [0, 1)");
        if (config_.eta < 0.0) throw std::invalid_argument("train: eta must be non-negative");
        if (config_.labeled_batch == 0 || config_.unlabeled_batch == 0)
            throw std::invalid_argument("train: batch sizes must be positive");
        if (config_.loss.task == Task::kRegression &&
            (config_.method == Method::kPseudoLabel || config_.method == Method::kEntropyMin))
            throw std::invalid_argument(std::string("train: ") + method_name(config_.method) +
                                        " is classification-only");
        if (config_.loss.task != split_->task)
            throw std::invalid_argument("train: loss kind does not match the dataset task");
    }

    double effective_eta() const {
        if (!config_.warmup) return config_.eta;
        const std::size_t ramp = std::max<std::size_t>(1, config_.epochs / 5);
        const double f = std::min(1.0, double(epoch_ + 1) / double(ramp));
        return config_.eta * f;
    }

    LabeledBatch draw_labeled() {
        auto idx = labeled_sampler_.next(std::min(config_.labeled_batch, split_->labeled.size()));
        std::vector<Sample> rows;
        rows.reserve(idx.size());
        for (std::size_t i : idx) rows.push_back(split_->labeled[i]);
        LabeledBatch batch;
        batch.x = stack_inputs(rows);
        batch.y = stack_targets(rows, split_->task, split_->target_dim, split_->n_classes);
        return batch;
    }

    UnlabeledBatch draw_unlabeled() {
        UnlabeledBatch batch;
        if (split_->unlabeled.empty()) return batch;
        auto idx =
            unlabeled_sampler_.next(std::min(config_.unlabeled_batch, split_->unlabeled.size()));
        std::vector<Sample> rows;
        rows.reserve(idx.size());
        for (std::size_t i : idx) rows.push_back(split_->unlabeled[i]);
        batch.x = stack_inputs(rows);
        return batch;
    }

    std::pair<double, double> step() {
        Tape tape;
        ModelBundle bound = bind(tape, bundle_);
        LabeledBatch labeled = draw_labeled();
        const bool wants_unlabeled =
            method_uses_unlabeled(config_.method) && !split_->unlabeled.empty();
        UnlabeledBatch unlabeled;
        if (wants_unlabeled) unlabeled = draw_unlabeled();
        // With no unlabeled data every method degrades to its supervised part.
        const double eta = wants_unlabeled ? effective_eta() : 0.0;

        ObjectiveResult result;
        switch (config_.method) {
            case Method::kLabelOnly:
                result = label_only_loss(tape, bound, labeled, config_.policy1, config_.policy2,
                                         config_.loss, aug_labeled_);
                break;
            case Method::kChi:
            case Method::kChiNoMinimax:
            case Method::kChiNoAug:
                result = chi_training_loss(tape, bound, labeled, unlabeled, config_.policy1,
                                           config_.policy2, eta, config_.grl_lambda, config_.loss,
                                           aug_labeled_, config_.method != Method::kChiNoMinimax,
                                           &aug_unlabeled_);
                break;
            case Method::kPiModel:
                result = pi_model_loss(tape, bound, labeled, unlabeled, config_.policy1,
                                       config_.policy2, eta, config_.loss, aug_labeled_,
                                       config_.dropout, &aug_unlabeled_);
                break;
            case Method::kMeanTeacher:
                result = eta == 0.0
                             ? pi_model_loss(tape, bound, labeled, unlabeled, config_.policy1,
                                             config_.policy2, 0.0, config_.loss, aug_labeled_)
                             : mean_teacher_loss(tape, bound, *twin_, labeled, unlabeled,
                                                 config_.policy1, config_.policy2, eta,
                                                 config_.loss, aug_labeled_, &aug_unlabeled_);
                break;
            case Method::kPseudoLabel:
                if (!wants_unlabeled) unlabeled.x = Tensor();
                result = pseudo_label_loss(tape, bound, labeled, unlabeled,
                                           config_.pseudo_threshold, config_.loss, config_.policy1,
                                           config_.policy2, aug_labeled_, &aug_unlabeled_);
                break;
            case Method::kEntropyMin:
                result = entropy_min_loss(tape, bound, labeled, unlabeled, eta, config_.loss);
                break;
        }
        if (!std::isfinite(result.total.item()))
            throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch_));

        tape.backward(result.total);
        GradientMap grads = collect_gradients(tape, bound);
        clip_gradients(grads, config_.clip_norm);
        sgd_momentum_step(bundle_, grads, velocity_, config_.learning_rate,
                          config_.head_lr_multiplier, config_.momentum);
        if (twin_) ema_update(*twin_, bundle_);
        return {result.sup, result.unsup};
    }

    TrainConfig config_;
    ModelBundle bundle_;
    const DatasetSplit* split_;
    BatchSampler labeled_sampler_;
    BatchSampler unlabeled_sampler_;
    RngStream aug_labeled_;
    RngStream aug_unlabeled_;
    std::optional<EmaTwin> twin_;
    GradientMap velocity_;
    History history_;
    std::size_t epoch_ = 0;
};

// Convenience wrapper: build, train to config.epochs, return bundle and history.
inline std::pair<ModelBundle, History> train(const TrainConfig& config, ModelBundle bundle,
                                             const DatasetSplit& split) {
    Trainer trainer(config, std::move(bundle), split);
    trainer.run_to(config.epochs);
    return {trainer.bundle(), trainer.history()};
}

}  // namespace chi
