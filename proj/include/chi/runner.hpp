#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "chi/checkpoint.hpp"
#include "chi/config.hpp"
#include "chi/csv.hpp"
#include "chi/data.hpp"
#include "chi/train.hpp"

namespace chi {

// ---- dataset materialization ---------------------------------------------------

inline Dataset generate_dataset(const DatasetConfig& cfg, std::uint64_t master_seed) {
    if (cfg.generator == "two_moons")
        return gen_two_moons(cfg.count, cfg.noise_sigma, master_seed);
    if (cfg.generator == "factor_shapes") return gen_factor_shapes(cfg.count, master_seed);
    throw ConfigError("dataset: unknown generator '" + cfg.generator + "'");
}

inline ArrayFile dataset_to_file(const Dataset& ds) {
    ArrayFile file;
    file.meta.emplace_back("kind", "dataset");
    file.meta.emplace_back("generator", ds.generator);
    file.meta.emplace_back("modality", modality_name(ds.modality));
    file.meta.emplace_back("task", ds.task == Task::kClassification ? "classification" : "regression");
    file.meta.emplace_back("count", std::to_string(ds.samples.size()));
    file.meta.emplace_back("classes", std::to_string(ds.n_classes));
    file.meta.emplace_back("target_dim", std::to_string(ds.target_dim));
    std::string factors;
    for (std::size_t i = 0; i < ds.factor_names.size(); ++i)
        factors += (i ? "," : "") + ds.factor_names[i];
    if (!factors.empty()) file.meta.emplace_back("factors", factors);

    const std::size_t n = ds.samples.size();
    const std::size_t dim = ds.samples[0].input.size();
    ArrayEntry inputs{"inputs", {n, dim}, {}};
    inputs.data.reserve(n * dim);
    for (const Sample& s : ds.samples)
        inputs.data.insert(inputs.data.end(), s.input.begin(), s.input.end());
    file.arrays.push_back(std::move(inputs));

    if (ds.task == Task::kRegression) {
        ArrayEntry targets{"targets", {n, ds.target_dim}, {}};
        targets.data.reserve(n * ds.target_dim);
        for (const Sample& s : ds.samples)
            targets.data.insert(targets.data.end(), s.target.begin(), s.target.end());
        file.arrays.push_back(std::move(targets));
    } else {
        ArrayEntry labels{"labels", {n}, {}};
        for (const Sample& s : ds.samples) labels.data.push_back(double(s.label));
        file.arrays.push_back(std::move(labels));
    }
    ArrayEntry ids{"ids", {n}, {}};
    for (const Sample& s : ds.samples) ids.data.push_back(double(s.id));
    file.arrays.push_back(std::move(ids));
    return file;
}

inline Dataset dataset_from_file(const ArrayFile& file) {
    Dataset ds;
    ds.generator = file.meta_value("generator");
    ds.modality = file.meta_value("modality") == std::string(modality_name(Modality::kPoint2d))
                      ? Modality::kPoint2d
                      : Modality::kRaster32;
    ds.task = file.meta_value("task") == "classification" ? Task::kClassification
                                                          : Task::kRegression;
    ds.n_classes = std::stoull(file.meta_value("classes"));
    ds.target_dim = std::stoull(file.meta_value("target_dim"));
    for (const auto& [k, v] : file.meta)
        if (k == "factors") {
            std::istringstream fs(v);
            std::string name;
            while (std::getline(fs, name, ',')) ds.factor_names.push_back(name);
        }
    const ArrayEntry* inputs = file.find("inputs");
    const ArrayEntry* ids = file.find("ids");
    if (!inputs || !ids) throw IoError("dataset file: missing inputs/ids arrays");
    const std::size_t n = inputs->shape.at(0);
    const std::size_t dim = inputs->shape.at(1);
    const ArrayEntry* targets = file.find("targets");
    const ArrayEntry* labels = file.find("labels");
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        s.input.assign(inputs->data.begin() + i * dim, inputs->data.begin() + (i + 1) * dim);
        if (targets)
            s.target.assign(targets->data.begin() + i * ds.target_dim,
                            targets->data.begin() + (i + 1) * ds.target_dim);
        if (labels) s.label = int(labels->data[i]);
        s.id = std::size_t(ids->data[i]);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

inline Dataset materialize_dataset(const ExperimentConfig& cfg) {
    if (!cfg.dataset.file.empty())
        return dataset_from_file(read_array_file(cfg.dataset.file, kDatasetMagic));
    return generate_dataset(cfg.dataset, cfg.train.master_seed);
}

// ---- model and policy resolution --------------------------------------------------

struct ResolvedArch {
    std::vector<LayerSpec> extractor;
    std::vector<LayerSpec> head;
    std::size_t n_factors = 1;
};

inline ResolvedArch resolve_arch(const ModelConfig& model, const Dataset& ds) {
    std::vector<std::size_t> widths = model.extractor_widths;
    std::vector<std::size_t> head_hidden = model.head_hidden;
    if (widths.empty())
        widths = ds.modality == Modality::kPoint2d ? std::vector<std::size_t>{2, 32, 32}
                                                   : std::vector<std::size_t>{1024, 128, 64};
    if (head_hidden.empty())
        head_hidden = ds.modality == Modality::kPoint2d ? std::vector<std::size_t>{16}
                                                        : std::vector<std::size_t>{32};
    ResolvedArch arch;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
        arch.extractor.push_back(LayerSpec{widths[i], widths[i + 1], model.extractor_activation});
    std::size_t in = widths.back();
    for (std::size_t w : head_hidden) {
        arch.head.push_back(LayerSpec{in, w, Activation::kRelu});
        in = w;
    }
    if (ds.task == Task::kClassification) {
        arch.head.push_back(LayerSpec{in, ds.n_classes, Activation::kSoftmax});
        arch.n_factors = 1;
    } else {
        arch.head.push_back(LayerSpec{in, 1, Activation::kSigmoid});
        arch.n_factors = ds.target_dim;
    }
    return arch;
}

inline ModelBundle build_model(const ExperimentConfig& cfg, const Dataset& ds) {
    const ResolvedArch arch = resolve_arch(cfg.model, ds);
    return build_bundle(arch.extractor, arch.head,
                        ds.task == Task::kClassification ? Task::kClassification
                                                         : Task::kRegression,
                        arch.n_factors, mix_seed(cfg.train.master_seed, cfg.model.seed_theta),
                        mix_seed(cfg.train.master_seed, cfg.model.seed_h1),
                        mix_seed(cfg.train.master_seed, cfg.model.seed_h2));
}

inline AugPolicy resolve_policy(const ExperimentConfig& cfg, const std::string& strength,
                                const DatasetSplit& split) {
    AugPolicy p = make_policy(split.modality, parse_strength(strength));
    if (cfg.aug_sigma) p.noise_sigma = *cfg.aug_sigma;
    if (cfg.aug_rotation_deg && p.strength == AugStrength::kStrong)
        p.rotation_range = *cfg.aug_rotation_deg * std::numbers::pi / 180.0;
    if (cfg.aug_drop_prob) p.drop_prob = *cfg.aug_drop_prob;
    if (cfg.aug_flip_prob) p.flip_prob = *cfg.aug_flip_prob;
    if (cfg.aug_translate) p.translate_extent = *cfg.aug_translate;
    if (cfg.aug_cutout) p.cutout_side = *cfg.aug_cutout;
    if (cfg.aug_contrast_lo) p.contrast_lo = *cfg.aug_contrast_lo;
    if (cfg.aug_contrast_hi) p.contrast_hi = *cfg.aug_contrast_hi;
    if (split.modality == Modality::kPoint2d) {
        auto [cx, cy] = input_centroid(split);
        p.rot_center_x = cx;
        p.rot_center_y = cy;
    }
    return p;
}

// Train config with policies resolved against the actual split.
inline TrainConfig resolve_train_config(const ExperimentConfig& cfg, const DatasetSplit& split) {
    TrainConfig train = cfg.train;
    train.loss.task = split.task;
    train.policy1 = resolve_policy(cfg, cfg.aug1, split);
    train.policy2 = resolve_policy(cfg, cfg.aug2, split);
    return train;
}

// ---- checkpointing the trainer -----------------------------------------------------

inline ArrayFile trainer_to_checkpoint(const Trainer& trainer, const std::string& config_text) {
    ArrayFile file;
    const TrainerState st = trainer.state();
    file.meta.emplace_back("kind", "checkpoint");
    file.meta.emplace_back("epoch", std::to_string(st.epoch));
    file.meta.emplace_back("rng.aug.labeled", std::to_string(st.aug_labeled_counter));
    file.meta.emplace_back("rng.aug.unlabeled", std::to_string(st.aug_unlabeled_counter));
    file.meta.emplace_back("rng.shuffle.labeled", std::to_string(st.labeled_shuffle_counter));
    file.meta.emplace_back("cursor.labeled", std::to_string(st.labeled_cursor));
    file.meta.emplace_back("rng.shuffle.unlabeled", std::to_string(st.unlabeled_shuffle_counter));
    file.meta.emplace_back("cursor.unlabeled", std::to_string(st.unlabeled_cursor));
    file.text = config_text;

    visit_params(trainer.bundle(), [&](const std::string& name, const Tensor& t) {
        file.arrays.push_back(ArrayEntry{name, t.shape, t.values});
    });
    for (const auto& [name, v] : trainer.velocity())
        file.arrays.push_back(ArrayEntry{"vel." + name, v.shape, v.values});
    if (const EmaTwin* twin = trainer.twin())
        visit_params(twin->shadow, [&](const std::string& name, const Tensor& t) {
            file.arrays.push_back(ArrayEntry{"ema." + name, t.shape, t.values});
        });
    return file;
}

inline void restore_trainer(Trainer& trainer, const ArrayFile& file) {
    TrainerState st;
    st.epoch = std::stoull(file.meta_value("epoch"));
    st.aug_labeled_counter = std::stoull(file.meta_value("rng.aug.labeled"));
    st.aug_unlabeled_counter = std::stoull(file.meta_value("rng.aug.unlabeled"));
    st.labeled_shuffle_counter = std::stoull(file.meta_value("rng.shuffle.labeled"));
    st.labeled_cursor = std::stoull(file.meta_value("cursor.labeled"));
    st.unlabeled_shuffle_counter = std::stoull(file.meta_value("rng.shuffle.unlabeled"));
    st.unlabeled_cursor = std::stoull(file.meta_value("cursor.unlabeled"));

    visit_params(trainer.mutable_bundle(), [&](const std::string& name, Tensor& t) {
        const ArrayEntry* a = file.find(name);
        if (!a) throw IoError("checkpoint: missing array '" + name + "'");
        if (a->shape != t.shape)
            throw IoError("checkpoint: shape mismatch for '" + name + "'");
        t.values = a->data;
    });
    trainer.velocity().clear();
    for (const ArrayEntry& a : file.arrays)
        if (a.name.rfind("vel.", 0) == 0)
            trainer.velocity().emplace(a.name.substr(4), Tensor(a.shape, a.data));
    if (EmaTwin* twin = trainer.mutable_twin())
        visit_params(twin->shadow, [&](const std::string& name, Tensor& t) {
            const ArrayEntry* a = file.find("ema." + name);
            if (!a) throw IoError("checkpoint: missing array 'ema." + name + "'");
            t.values = a->data;
        });
    trainer.restore_state(st);
}

// Overwrites bundle parameters from checkpoint arrays (velocity and EMA
// entries are ignored); used by the boundary/feature tools.
inline void load_params(ModelBundle& bundle, const ArrayFile& file) {
    visit_params(bundle, [&](const std::string& name, Tensor& t) {
        const ArrayEntry* a = file.find(name);
        if (!a) throw IoError("checkpoint: missing array '" + name + "'");
        if (a->shape != t.shape) throw IoError("checkpoint: shape mismatch for '" + name + "'");
        t.values = a->data;
    });
}

// ---- artifact writers ----------------------------------------------------------------

namespace detail {

inline std::vector<std::string> metric_columns(const DatasetSplit& split) {
    if (split.task == Task::kClassification) return {"error_rate"};
    std::vector<std::string> cols = {"mae", "gm"};
    for (const std::string& f : split.factor_names) cols.push_back("mae_" + f);
    return cols;
}

inline std::vector<std::string> metric_cells(const MetricsReport& m) {
    if (m.task == Task::kClassification) return {format_double(m.error_rate)};
    std::vector<std::string> cells = {format_double(m.mae), format_double(m.gm)};
    for (double v : m.mae_per_factor) cells.push_back(format_double(v));
    return cells;
}

}  // namespace detail

inline void write_history_csv(const std::filesystem::path& path, const History& history,
                              const DatasetSplit& split) {
    CsvWriter csv(path);
    std::vector<std::string> cols = {"epoch", "loss_sup", "loss_unsup", "head_disagreement"};
    for (const std::string& c : detail::metric_columns(split)) cols.push_back(c);
    csv.header(cols);
    for (const EpochRecord& rec : history.epochs) {
        std::vector<std::string> cells = {std::to_string(rec.epoch), format_double(rec.loss_sup),
                                          format_double(rec.loss_unsup),
                                          format_double(rec.disagreement)};
        for (const std::string& c : detail::metric_cells(rec.test)) cells.push_back(c);
        csv.line(cells);
    }
}

inline void write_metrics_csv(const std::filesystem::path& path,
                              const std::vector<std::pair<std::size_t, MetricsReport>>& rows,
                              const DatasetSplit& split) {
    CsvWriter csv(path);
    std::vector<std::string> cols = {"epoch"};
    for (const std::string& c : detail::metric_columns(split)) cols.push_back(c);
    csv.header(cols);
    for (const auto& [epoch, report] : rows) {
        std::vector<std::string> cells = {std::to_string(epoch)};
        for (const std::string& c : detail::metric_cells(report)) cells.push_back(c);
        csv.line(cells);
    }
}

inline void write_boundary_csv(const std::filesystem::path& path, const BoundaryGrid& grid) {
    CsvWriter csv(path);
    std::vector<std::string> cols = {"x", "y"};
    for (std::size_t c = 0; c < grid.predictions.shape[1]; ++c)
        cols.push_back("pred_" + std::to_string(c));
    csv.header(cols);
    const std::size_t dim = grid.predictions.shape[1];
    for (std::size_t i = 0; i < grid.xs.size(); ++i) {
        std::vector<std::string> cells = {format_double(grid.xs[i]), format_double(grid.ys[i])};
        for (std::size_t c = 0; c < dim; ++c)
            cells.push_back(format_double(grid.predictions.values[i * dim + c]));
        csv.line(cells);
    }
}

// P5 grayscale of one prediction channel (class-1 probability for binary
// classification, first output otherwise).
inline void write_boundary_pgm(const std::filesystem::path& path, const BoundaryGrid& grid) {
    const std::size_t dim = grid.predictions.shape[1];
    const std::size_t channel = dim == 2 ? 1 : 0;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("pgm: cannot write '" + path.string() + "'");
    out << "P5\n" << grid.resolution << " " << grid.resolution << "\n255\n";
    for (std::size_t i = 0; i < grid.resolution * grid.resolution; ++i) {
        const double v = grid.predictions.values[i * dim + channel];
        const int level = std::clamp(int(v * 255.0 + 0.5), 0, 255);
        out.put(char(level));
    }
}

inline void write_features_csv(const std::filesystem::path& path, const FeatureDump& dump,
                               const DatasetSplit& split) {
    CsvWriter csv(path);
    std::vector<std::string> cols;
    for (std::size_t i = 0; i < dump.feature_width; ++i) cols.push_back("f" + std::to_string(i));
    if (split.task == Task::kClassification)
        cols.push_back("label");
    else
        for (const std::string& f : split.factor_names) cols.push_back(f);
    cols.push_back("partition");
    csv.header(cols);
    for (const auto& row : dump.rows) {
        std::vector<std::string> cells;
        cells.reserve(row.size());
        for (double v : row) cells.push_back(format_double(v));
        csv.line(cells);
    }
}

// ---- run -------------------------------------------------------------------------------

inline std::filesystem::path resolve_output_dir(const OutputConfig& output) {
    if (const char* env = std::getenv("CHI_OUT_DIR"); env && *env)
        return std::filesystem::path(env);
    return std::filesystem::path(output.dir);
}

struct RunResult {
    MetricsReport final_metrics;
    History history;
    std::filesystem::path out_dir;
};

// generate -> split -> train -> evaluate, writing the declared artifacts.
// `resume_from` continues a checkpointed run to `cfg.train.epochs`.
inline RunResult run_experiment(const ExperimentConfig& cfg, std::ostream& log,
                                const std::optional<std::filesystem::path>& resume_from = {}) {
    Dataset ds = materialize_dataset(cfg);
    DatasetSplit split = split_labeled(ds, cfg.dataset.split, cfg.train.master_seed);
    if (split.task == Task::kRegression && cfg.train.method == Method::kPseudoLabel)
        throw ConfigError("train: pseudo-label is classification-only");
    if (split.task == Task::kRegression && cfg.train.method == Method::kEntropyMin)
        throw ConfigError("train: entropy-min is classification-only");

    TrainConfig train_cfg = resolve_train_config(cfg, split);
    Trainer trainer(train_cfg, build_model(cfg, ds), split);
    if (resume_from) restore_trainer(trainer, read_array_file(*resume_from, kCheckpointMagic));

    const std::filesystem::path out_dir = resolve_output_dir(cfg.output);
    std::filesystem::create_directories(out_dir);

    std::vector<std::pair<std::size_t, MetricsReport>> metric_rows;
    while (trainer.epoch() < train_cfg.epochs) {
        trainer.run_epoch();
        const EpochRecord& rec = trainer.history().epochs.back();
        const bool at_checkpoint = cfg.output.checkpoint_every > 0 &&
                                   trainer.epoch() % cfg.output.checkpoint_every == 0 &&
                                   trainer.epoch() < train_cfg.epochs;
        if (at_checkpoint) {
            const auto path = out_dir / ("epoch_" + std::to_string(trainer.epoch()) + ".ckpt");
            write_array_file(path, kCheckpointMagic, trainer_to_checkpoint(trainer, cfg.text));
            metric_rows.emplace_back(trainer.epoch(), rec.test);
        }
    }

    MetricsReport final_metrics = evaluate(trainer.bundle(), split.test, split.task);
    metric_rows.emplace_back(trainer.epoch(), final_metrics);

    if (cfg.output.history)
        write_history_csv(out_dir / "history.csv", trainer.history(), split);
    if (cfg.output.metrics) write_metrics_csv(out_dir / "metrics.csv", metric_rows, split);
    if (cfg.output.checkpoint_final)
        write_array_file(out_dir / "final.ckpt", kCheckpointMagic,
                         trainer_to_checkpoint(trainer, cfg.text));
    if (cfg.output.boundary) {
        if (split.modality != Modality::kPoint2d)
            throw ConfigError("output: boundary grids need a 2-D input model");
        Rect bounds{-1.5, 2.5, -1.0, 1.5};
        BoundaryGrid grid =
            decision_boundary_grid(trainer.bundle(), bounds, cfg.output.boundary_resolution);
        write_boundary_csv(out_dir / "boundary.csv", grid);
        if (cfg.output.boundary_raster) write_boundary_pgm(out_dir / "boundary.pgm", grid);
    }
    if (cfg.output.features)
        write_features_csv(out_dir / "features.csv", dump_features(trainer.bundle(), split), split);

    log << "method=" << method_name(train_cfg.method) << " epochs=" << trainer.epoch()
        << " label_ratio=" << split.label_ratio;
    if (split.task == Task::kClassification)
        log << " error_rate=" << final_metrics.error_rate << "\n";
    else
        log << " mae=" << final_metrics.mae << " gm=" << final_metrics.gm << "\n";

    return RunResult{final_metrics, trainer.history(), out_dir};
}

// ---- sweep -----------------------------------------------------------------------------

struct SweepCell {
    std::string method;
    double ratio = 0.0;
    std::vector<MetricsReport> per_seed;
};

// One row per (method, ratio): mean and population standard deviation over
// seeds for every metric column.
inline std::vector<SweepCell> run_sweep(const ExperimentConfig& base, std::ostream& log) {
    if (base.sweep.methods.empty() || base.sweep.ratios.empty() || base.sweep.seeds.empty())
        throw ConfigError("sweep: methods, ratios and seeds must all be non-empty");
    for (double r : base.sweep.ratios)
        if (r <= 0.0 || r > 1.0) throw ConfigError("sweep: ratios must lie in (0, 1]");

    std::vector<SweepCell> cells;
    for (const std::string& method : base.sweep.methods) {
        for (double ratio : base.sweep.ratios) {
            SweepCell cell;
            cell.method = method;
            cell.ratio = ratio;
            for (std::uint64_t seed : base.sweep.seeds) {
                ExperimentConfig cfg = base;
                cfg.train.method = parse_method(method);
                const auto defaults = default_strengths(cfg.train.method);
                cfg.aug1 = defaults.first;
                cfg.aug2 = defaults.second;
                cfg.dataset.split.ratio = ratio;
                cfg.dataset.split.count.reset();
                cfg.dataset.split.per_class.reset();
                cfg.train.master_seed = seed;

                Dataset ds = materialize_dataset(cfg);
                DatasetSplit split = split_labeled(ds, cfg.dataset.split, seed);
                TrainConfig train_cfg = resolve_train_config(cfg, split);
                Trainer trainer(train_cfg, build_model(cfg, ds), split);
                trainer.run_to(train_cfg.epochs);
                cell.per_seed.push_back(evaluate(trainer.bundle(), split.test, split.task));
                log << "sweep " << method << " ratio=" << ratio << " seed=" << seed << " done\n";
            }
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

inline void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepCell>& cells,
                            Task task) {
    CsvWriter csv(path);
    std::vector<std::string> metric_names =
        task == Task::kClassification ? std::vector<std::string>{"error_rate"}
                                      : std::vector<std::string>{"mae", "gm"};
    std::vector<std::string> cols = {"method", "ratio", "seeds"};
    for (const std::string& m : metric_names) {
        cols.push_back(m + "_mean");
        cols.push_back(m + "_std");
    }
    csv.header(cols);
    for (const SweepCell& cell : cells) {
        std::vector<std::string> cells_out = {cell.method, format_double(cell.ratio),
                                              std::to_string(cell.per_seed.size())};
        for (const std::string& m : metric_names) {
            std::vector<double> values;
            for (const MetricsReport& r : cell.per_seed)
                values.push_back(m == "error_rate" ? r.error_rate : (m == "mae" ? r.mae : r.gm));
            double mean = 0.0;
            for (double v : values) mean += v;
            mean /= double(values.size());
            double var = 0.0;
            for (double v : values) var += (v - mean) * (v - mean);
            var /= double(values.size());  // population std, mirroring the "+-" tables
            cells_out.push_back(format_double(mean));
            cells_out.push_back(format_double(std::sqrt(var)));
        }
        csv.line(cells_out);
    }
}

}  // namespace chi
