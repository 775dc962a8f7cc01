#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "chi/augment.hpp"
#include "chi/data.hpp"
#include "chi/network.hpp"
#include "chi/objectives.hpp"
#include "chi/train.hpp"

namespace chi {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---- sectioned key-value parser ------------------------------------------------
//
// Format:
//   # comment
//   [section]
//   key = value
//
// Every key is consumed by a typed getter; leftovers are rejected by name and
// line so sweep configs stay diffable and typo-safe.

class KeyValueConfig {
public:
    static KeyValueConfig parse(const std::string& text, const std::string& origin) {
        KeyValueConfig cfg;
        cfg.origin_ = origin;
        std::istringstream in(text);
        std::string line;
        std::string section;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            if (t.front() == '[') {
                if (t.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(line_no) +
                                      ": malformed section header '" + t + "'");
                section = trim(t.substr(1, t.size() - 2));
                if (section.empty())
                    throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty section name");
                continue;
            }
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(line_no) +
                                  ": expected 'key = value', got '" + t + "'");
            std::string key = trim(t.substr(0, eq));
            std::string value = trim(t.substr(eq + 1));
            if (key.empty())
                throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
            if (section.empty())
                throw ConfigError(origin + ":" + std::to_string(line_no) + ": key '" + key +
                                  "' outside any [section]");
            Entry e{value, line_no, false};
            if (!cfg.entries_[section].emplace(key, e).second)
                throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" +
                                  section + "." + key + "'");
            continue;
        }
        return cfg;
    }

    static KeyValueConfig parse_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("config: cannot open '" + path + "'");
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse(buf.str(), path);
    }

    // CLI overrides in the form section.key=value replace config values.
    void override_key(const std::string& spec) {
        const auto eq = spec.find('=');
        const auto dot = spec.find('.');
        if (eq == std::string::npos || dot == std::string::npos || dot > eq)
            throw ConfigError("override '" + spec + "' is not of the form section.key=value");
        const std::string section = trim(spec.substr(0, dot));
        const std::string key = trim(spec.substr(dot + 1, eq - dot - 1));
        const std::string value = trim(spec.substr(eq + 1));
        entries_[section][key] = Entry{value, 0, false};
    }

    bool has(const std::string& section, const std::string& key) const {
        auto s = entries_.find(section);
        return s != entries_.end() && s->second.count(key) > 0;
    }

    std::string get_string(const std::string& section, const std::string& key,
                           std::optional<std::string> fallback = {}) const {
        auto s = entries_.find(section);
        if (s != entries_.end()) {
            auto k = s->second.find(key);
            if (k != s->second.end()) {
                k->second.consumed = true;
                return k->second.value;
            }
        }
        if (fallback) return *fallback;
        throw ConfigError(origin_ + ": missing required key '" + section + "." + key + "'");
    }

    double get_double(const std::string& section, const std::string& key,
                      std::optional<double> fallback = {}) const {
        if (!has(section, key)) {
            if (fallback) return *fallback;
            throw ConfigError(origin_ + ": missing required key '" + section + "." + key + "'");
        }
        const std::string raw = get_string(section, key);
        try {
            std::size_t used = 0;
            const double v = std::stod(raw, &used);
            if (used != raw.size()) throw std::invalid_argument(raw);
            return v;
        } catch (const std::exception&) {
            throw ConfigError(where(section, key) + ": '" + raw + "' is not a number");
        }
    }

    std::int64_t get_int(const std::string& section, const std::string& key,
                         std::optional<std::int64_t> fallback = {}) const {
        if (!has(section, key)) {
            if (fallback) return *fallback;
            throw ConfigError(origin_ + ": missing required key '" + section + "." + key + "'");
        }
        const std::string raw = get_string(section, key);
        try {
            std::size_t used = 0;
            const long long v = std::stoll(raw, &used);
            if (used != raw.size()) throw std::invalid_argument(raw);
            return v;
        } catch (const std::exception&) {
            throw ConfigError(where(section, key) + ": '" + raw + "' is not an integer");
        }
    }

    bool get_bool(const std::string& section, const std::string& key,
                  std::optional<bool> fallback = {}) const {
        if (!has(section, key)) {
            if (fallback) return *fallback;
            throw ConfigError(origin_ + ": missing required key '" + section + "." + key + "'");
        }
        const std::string raw = get_string(section, key);
        if (raw == "true" || raw == "on" || raw == "1") return true;
        if (raw == "false" || raw == "off" || raw == "0") return false;
        throw ConfigError(where(section, key) + ": '" + raw + "' is not a boolean");
    }

    std::vector<std::string> get_list(const std::string& section, const std::string& key,
                                      std::optional<std::string> fallback = {}) const {
        const std::string raw = get_string(section, key, std::move(fallback));
        std::vector<std::string> out;
        std::string item;
        std::istringstream in(raw);
        while (std::getline(in, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    // Call after all getters: any unconsumed key is an error.
    void reject_unknown() const {
        for (const auto& [section, keys] : entries_)
            for (const auto& [key, entry] : keys)
                if (!entry.consumed)
                    throw ConfigError(origin_ + ":" + std::to_string(entry.line) +
                                      ": unknown key '" + section + "." + key + "'");
    }

    // Canonical text form (sections and keys sorted); snapshot format for
    // checkpoints after CLI overrides have been applied.
    std::string to_text() const {
        std::ostringstream out;
        bool first = true;
        for (const auto& [section, keys] : entries_) {
            if (!first) out << "\n";
            first = false;
            out << "[" << section << "]\n";
            for (const auto& [key, entry] : keys) out << key << " = " << entry.value << "\n";
        }
        return out.str();
    }

    std::string where(const std::string& section, const std::string& key) const {
        auto s = entries_.find(section);
        if (s != entries_.end()) {
            auto k = s->second.find(key);
            if (k != s->second.end())
                return origin_ + ":" + std::to_string(k->second.line);
        }
        return origin_;
    }

private:
    struct Entry {
        std::string value;
        std::size_t line = 0;
        mutable bool consumed = false;
    };

    static std::string trim(const std::string& s) {
        std::size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        std::size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    std::string origin_;
    std::map<std::string, std::map<std::string, Entry>> entries_;
};

// ---- experiment config -----------------------------------------------------------

struct DatasetConfig {
    std::string generator;  // two_moons | factor_shapes
    std::string file;       // load a previously exported dataset instead
    std::size_t count = 700;
    double noise_sigma = 0.1;
    SplitRequest split;
};

struct ModelConfig {
    std::vector<std::size_t> extractor_widths;  // input width first; empty = per-generator default
    Activation extractor_activation = Activation::kRelu;
    std::vector<std::size_t> head_hidden;
    std::uint64_t seed_theta = 1;
    std::uint64_t seed_h1 = 2;
    std::uint64_t seed_h2 = 3;
};

struct OutputConfig {
    std::string dir = "out";
    bool history = true;
    bool metrics = true;
    bool boundary = false;
    std::size_t boundary_resolution = 100;
    bool boundary_raster = false;
    bool features = false;
    bool checkpoint_final = true;
    std::size_t checkpoint_every = 0;  // epochs; 0 = final only
};

struct SweepConfig {
    std::vector<std::string> methods;
    std::vector<double> ratios;
    std::vector<std::uint64_t> seeds;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    ModelConfig model;
    TrainConfig train;
    OutputConfig output;
    SweepConfig sweep;
    // augmentation strengths by name; resolved to policies once the modality
    // is known
    std::string aug1 = "strong";
    std::string aug2 = "strong";
    std::optional<double> aug_sigma;
    std::optional<double> aug_rotation_deg;
    std::optional<double> aug_drop_prob;
    std::optional<double> aug_flip_prob;
    std::optional<int> aug_translate;
    std::optional<int> aug_cutout;
    std::optional<double> aug_contrast_lo;
    std::optional<double> aug_contrast_hi;
    std::string text;  // verbatim snapshot for checkpoints
};

inline AugStrength parse_strength(const std::string& s) {
    if (s == "none") return AugStrength::kNone;
    if (s == "weak") return AugStrength::kWeak;
    if (s == "strong") return AugStrength::kStrong;
    throw ConfigError("unknown augmentation strength '" + s + "'");
}

inline Activation parse_activation(const std::string& s) {
    for (Activation a : {Activation::kIdentity, Activation::kRelu, Activation::kTanh,
                         Activation::kSigmoid, Activation::kSoftmax})
        if (s == activation_name(a)) return a;
    throw ConfigError("unknown activation '" + s + "'");
}

namespace detail {

inline std::vector<std::size_t> parse_widths(const KeyValueConfig& kv, const std::string& section,
                                             const std::string& key) {
    std::vector<std::size_t> out;
    for (const std::string& tok : kv.get_list(section, key)) {
        try {
            out.push_back(std::size_t(std::stoull(tok)));
        } catch (const std::exception&) {
            throw ConfigError(kv.where(section, key) + ": '" + tok + "' is not a width");
        }
    }
    return out;
}

}  // namespace detail

// Default augmentation strengths per method: the chi-model trains on strong
// views, the no-augmentation ablation on identity views, the baselines on
// weak views.
inline std::pair<std::string, std::string> default_strengths(Method m) {
    switch (m) {
        case Method::kChi:
        case Method::kChiNoMinimax: return {"strong", "strong"};
        case Method::kChiNoAug:
        case Method::kEntropyMin: return {"none", "none"};
        default: return {"weak", "weak"};
    }
}

inline ExperimentConfig parse_experiment_config(const KeyValueConfig& kv, std::string text) {
    ExperimentConfig cfg;
    cfg.text = std::move(text);

    // [dataset]
    cfg.dataset.file = kv.get_string("dataset", "file", std::string{});
    cfg.dataset.generator =
        kv.get_string("dataset", "generator", cfg.dataset.file.empty() ? std::optional<std::string>{}
                                                                       : std::optional<std::string>{""});
    cfg.dataset.count = std::size_t(kv.get_int("dataset", "count", 700));
    cfg.dataset.noise_sigma = kv.get_double("dataset", "noise_sigma", 0.1);
    cfg.dataset.split.test_fraction = kv.get_double("dataset", "test_fraction", 0.2);
    if (kv.has("dataset", "labeled_ratio"))
        cfg.dataset.split.ratio = kv.get_double("dataset", "labeled_ratio");
    if (kv.has("dataset", "labeled_count"))
        cfg.dataset.split.count = std::size_t(kv.get_int("dataset", "labeled_count"));
    if (kv.has("dataset", "labeled_per_class"))
        cfg.dataset.split.per_class = std::size_t(kv.get_int("dataset", "labeled_per_class"));
    cfg.dataset.split.stratify = kv.get_bool("dataset", "stratify", false);
    if (!cfg.dataset.split.ratio && !cfg.dataset.split.count && !cfg.dataset.split.per_class)
        throw ConfigError(
            "dataset: one of labeled_ratio, labeled_count, labeled_per_class is required");

    // [model]
    if (kv.has("model", "extractor"))
        cfg.model.extractor_widths = detail::parse_widths(kv, "model", "extractor");
    cfg.model.extractor_activation =
        parse_activation(kv.get_string("model", "extractor_activation", std::string("relu")));
    if (kv.has("model", "head_hidden"))
        cfg.model.head_hidden = detail::parse_widths(kv, "model", "head_hidden");
    cfg.model.seed_theta = std::uint64_t(kv.get_int("model", "seed_theta", 1));
    cfg.model.seed_h1 = std::uint64_t(kv.get_int("model", "seed_h1", 2));
    cfg.model.seed_h2 = std::uint64_t(kv.get_int("model", "seed_h2", 3));

    // [train]
    cfg.train.method = parse_method(kv.get_string("train", "method", std::string("chi")));
    cfg.train.eta = kv.get_double("train", "eta", 0.1);
    cfg.train.grl_lambda = kv.get_double("train", "grl_lambda", 1.0);
    cfg.train.learning_rate = kv.get_double("train", "learning_rate", 0.03);
    cfg.train.head_lr_multiplier = kv.get_double("train", "head_lr_multiplier", 10.0);
    cfg.train.momentum = kv.get_double("train", "momentum", 0.95);
    cfg.train.ema_alpha = kv.get_double("train", "ema_alpha", 0.99);
    cfg.train.epochs = std::size_t(kv.get_int("train", "epochs", 100));
    cfg.train.labeled_batch = std::size_t(kv.get_int("train", "labeled_batch", 10));
    cfg.train.unlabeled_batch = std::size_t(kv.get_int("train", "unlabeled_batch", 50));
    cfg.train.master_seed = std::uint64_t(kv.get_int("train", "master_seed", 1));
    cfg.train.warmup = kv.get_bool("train", "warmup", false);
    cfg.train.clip_norm = kv.get_double("train", "clip_norm", 0.0);
    cfg.train.pseudo_threshold = kv.get_double("train", "pseudo_threshold", 0.95);
    cfg.train.dropout = kv.get_double("train", "dropout", 0.0);
    const std::string distance = kv.get_string("train", "regression_distance", std::string("l1"));
    if (distance == "l1")
        cfg.train.loss.distance = RegressionDistance::kL1;
    else if (distance == "l2")
        cfg.train.loss.distance = RegressionDistance::kL2;
    else
        throw ConfigError(kv.where("train", "regression_distance") + ": '" + distance +
                          "' is not l1 or l2");
    const auto defaults = default_strengths(cfg.train.method);
    cfg.aug1 = kv.get_string("train", "aug1", defaults.first);
    cfg.aug2 = kv.get_string("train", "aug2", defaults.second);
    if (kv.has("train", "aug_sigma")) cfg.aug_sigma = kv.get_double("train", "aug_sigma");
    if (kv.has("train", "aug_rotation_deg"))
        cfg.aug_rotation_deg = kv.get_double("train", "aug_rotation_deg");
    if (kv.has("train", "aug_drop_prob"))
        cfg.aug_drop_prob = kv.get_double("train", "aug_drop_prob");
    if (kv.has("train", "aug_flip_prob"))
        cfg.aug_flip_prob = kv.get_double("train", "aug_flip_prob");
    if (kv.has("train", "aug_translate"))
        cfg.aug_translate = int(kv.get_int("train", "aug_translate"));
    if (kv.has("train", "aug_cutout")) cfg.aug_cutout = int(kv.get_int("train", "aug_cutout"));
    if (kv.has("train", "aug_contrast_lo"))
        cfg.aug_contrast_lo = kv.get_double("train", "aug_contrast_lo");
    if (kv.has("train", "aug_contrast_hi"))
        cfg.aug_contrast_hi = kv.get_double("train", "aug_contrast_hi");

    // [output]
    cfg.output.dir = kv.get_string("output", "dir", std::string("out"));
    cfg.output.history = kv.get_bool("output", "history", true);
    cfg.output.metrics = kv.get_bool("output", "metrics", true);
    cfg.output.boundary = kv.get_bool("output", "boundary", false);
    cfg.output.boundary_resolution =
        std::size_t(kv.get_int("output", "boundary_resolution", 100));
    cfg.output.boundary_raster = kv.get_bool("output", "boundary_raster", false);
    cfg.output.features = kv.get_bool("output", "features", false);
    cfg.output.checkpoint_final = kv.get_bool("output", "checkpoint_final", true);
    cfg.output.checkpoint_every = std::size_t(kv.get_int("output", "checkpoint_every", 0));

    // [sweep]
    if (kv.has("sweep", "methods")) cfg.sweep.methods = kv.get_list("sweep", "methods");
    if (kv.has("sweep", "ratios")) {
        for (const std::string& tok : kv.get_list("sweep", "ratios")) {
            try {
                cfg.sweep.ratios.push_back(std::stod(tok));
            } catch (const std::exception&) {
                throw ConfigError(kv.where("sweep", "ratios") + ": '" + tok + "' is not a ratio");
            }
        }
    }
    if (kv.has("sweep", "seeds")) {
        for (const std::string& tok : kv.get_list("sweep", "seeds")) {
            try {
                cfg.sweep.seeds.push_back(std::stoull(tok));
            } catch (const std::exception&) {
                throw ConfigError(kv.where("sweep", "seeds") + ": '" + tok + "' is not a seed");
            }
        }
    }

    kv.reject_unknown();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_experiment_config(KeyValueConfig::parse(buf.str(), path), buf.str());
}

}  // namespace chi
