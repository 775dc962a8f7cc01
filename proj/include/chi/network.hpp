#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "chi/rng.hpp"
#include "chi/tape.hpp"
#include "chi/tensor.hpp"

namespace chi {

enum class Activation { kIdentity, kRelu, kTanh, kSigmoid, kSoftmax };
enum class Task { kRegression, kClassification };

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::kIdentity: return "identity";
        case Activation::kRelu: return "relu";
        case Activation::kTanh: return "tanh";
        case Activation::kSigmoid: return "sigmoid";
        case Activation::kSoftmax: return "softmax";
    }
    return "?";
}

struct LayerSpec {
    std::size_t in = 0;
    std::size_t out = 0;
    Activation act = Activation::kIdentity;
};

struct DenseLayer {
    Tensor w;  // [in, out]
    Tensor b;  // [out]
};

struct Mlp {
    std::vector<LayerSpec> spec;
    std::vector<DenseLayer> layers;

    std::size_t input_width() const { return spec.front().in; }
    std::size_t output_width() const { return spec.back().out; }
};

// Optional per-forward dropout (used only by the pi-model baseline; the
// minimax game replaces it for the chi-model). `include_output` marks the
// mlp's own output as a hidden representation of the enclosing network, so
// the extractor's final features are masked too.
struct Dropout {
    double rate = 0.0;
    RngStream* rng = nullptr;
    bool include_output = false;
};

// Glorot-uniform weights, zero biases. Pure function of (specs, seed).
inline Mlp build_mlp(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
    if (specs.empty()) throw std::invalid_argument("build_mlp: empty layer list");
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].in == 0 || specs[i].out == 0)
            throw std::invalid_argument("build_mlp: layer widths must be positive");
        if (i + 1 < specs.size() && specs[i].out != specs[i + 1].in)
            throw ShapeError("build_mlp: layer " + std::to_string(i) + " output width " +
                             std::to_string(specs[i].out) + " does not feed layer " +
                             std::to_string(i + 1));
    }
    Mlp mlp;
    mlp.spec = specs;
    RngStream rng(seed, "init");
    for (const auto& s : specs) {
        const double bound = std::sqrt(6.0 / double(s.in + s.out));
        Tensor w = Tensor::zeros({s.in, s.out});
        for (double& v : w.values) v = rng.next_uniform(-bound, bound);
        mlp.layers.push_back(DenseLayer{std::move(w), Tensor::zeros({s.out})});
    }
    return mlp;
}

inline Tensor apply_activation(Tape& tape, Activation act, const Tensor& x) {
    switch (act) {
        case Activation::kIdentity: return x;
        case Activation::kRelu: return tape.relu(x);
        case Activation::kTanh: return tape.tanh(x);
        case Activation::kSigmoid: return tape.sigmoid(x);
        case Activation::kSoftmax: return tape.softmax(x);
    }
    throw std::invalid_argument("apply_activation: unknown activation");
}

// x: [batch, in]. Dropout masks (inverted scaling) are drawn fresh per call
// and applied after hidden activations, never after the output layer.
inline Tensor mlp_forward(Tape& tape, const Mlp& mlp, const Tensor& x, const Dropout& drop = {}) {
    if (x.shape.size() != 2 || x.shape[1] != mlp.input_width())
        throw ShapeError("mlp_forward: input " + shape_str(x.shape) + " does not match width " +
                         std::to_string(mlp.input_width()));
    Tensor h = x;
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
        h = tape.add(tape.matmul(h, mlp.layers[i].w), mlp.layers[i].b);
        h = apply_activation(tape, mlp.spec[i].act, h);
        const bool hidden = i + 1 < mlp.layers.size() || drop.include_output;
        if (hidden && drop.rate > 0.0 && drop.rng) {
            Tensor mask = Tensor::zeros(h.shape);
            const double keep = 1.0 - drop.rate;
            for (double& m : mask.values)
                m = drop.rng->next_uniform() < keep ? 1.0 / keep : 0.0;
            h = tape.mul(h, mask);
        }
    }
    return h;
}

// ---- model bundle ---------------------------------------------------------

// Shared extractor plus two task heads. Each head is a list of per-factor
// parts whose outputs are concatenated; classification uses a single part.
struct ModelBundle {
    Mlp extractor;
    std::vector<Mlp> head1;
    std::vector<Mlp> head2;
    Task task = Task::kRegression;
    std::size_t output_dim = 1;

    std::size_t feature_width() const { return extractor.output_width(); }
    std::size_t input_width() const { return extractor.input_width(); }
};

namespace detail {

inline void check_head_spec(const std::vector<LayerSpec>& head_spec, Task task) {
    for (std::size_t i = 0; i + 1 < head_spec.size(); ++i)
        if (head_spec[i].act == Activation::kSoftmax)
            throw std::invalid_argument("head spec: softmax only allowed as the final activation");
    const Activation last = head_spec.back().act;
    if (task == Task::kRegression && last != Activation::kSigmoid)
        throw std::invalid_argument("head spec: regression heads must end in sigmoid");
    if (task == Task::kClassification && last != Activation::kSoftmax)
        throw std::invalid_argument("head spec: classification heads must end in softmax");
}

}  // namespace detail

// `head_spec` describes one head part; regression replicates it per factor
// (n_factors of them), classification keeps a single part whose final width
// is the class count. Head seeds must differ so the two heads never start
// parameter-identical.
inline ModelBundle build_bundle(const std::vector<LayerSpec>& extractor_spec,
                                const std::vector<LayerSpec>& head_spec, Task task,
                                std::size_t n_factors, std::uint64_t seed_theta,
                                std::uint64_t seed_h1, std::uint64_t seed_h2) {
    if (seed_h1 == seed_h2)
        throw std::invalid_argument("build_bundle: head seeds must differ");
    if (extractor_spec.empty() || head_spec.empty())
        throw std::invalid_argument("build_bundle: empty spec");
    if (extractor_spec.back().out != head_spec.front().in)
        throw ShapeError("build_bundle: extractor output width " +
                         std::to_string(extractor_spec.back().out) +
                         " does not match head input width " +
                         std::to_string(head_spec.front().in));
    for (const auto& s : extractor_spec)
        if (s.act == Activation::kSoftmax)
            throw std::invalid_argument("build_bundle: softmax not allowed in the extractor");
    detail::check_head_spec(head_spec, task);
    if (task == Task::kClassification && n_factors != 1)
        throw std::invalid_argument("build_bundle: classification uses a single head part");
    if (n_factors == 0) throw std::invalid_argument("build_bundle: n_factors must be positive");

    ModelBundle m;
    m.task = task;
    m.extractor = build_mlp(extractor_spec, seed_theta);
    for (std::size_t f = 0; f < n_factors; ++f) {
        m.head1.push_back(build_mlp(head_spec, mix_seed(seed_h1, f)));
        m.head2.push_back(build_mlp(head_spec, mix_seed(seed_h2, f)));
    }
    m.output_dim = task == Task::kClassification ? head_spec.back().out
                                                 : n_factors * head_spec.back().out;
    return m;
}

// ---- parameter traversal ---------------------------------------------------

// Visits every parameter tensor with a stable name: theta.<layer>.{w,b},
// phi1.<factor>.<layer>.{w,b}, phi2....
template <class Fn>
void visit_params(ModelBundle& m, Fn&& fn) {
    auto walk = [&](Mlp& mlp, const std::string& prefix) {
        for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
            fn(prefix + "." + std::to_string(l) + ".w", mlp.layers[l].w);
            fn(prefix + "." + std::to_string(l) + ".b", mlp.layers[l].b);
        }
    };
    walk(m.extractor, "theta");
    for (std::size_t f = 0; f < m.head1.size(); ++f) walk(m.head1[f], "phi1." + std::to_string(f));
    for (std::size_t f = 0; f < m.head2.size(); ++f) walk(m.head2[f], "phi2." + std::to_string(f));
}

template <class Fn>
void visit_params(const ModelBundle& m, Fn&& fn) {
    visit_params(const_cast<ModelBundle&>(m),
                 [&](const std::string& name, Tensor& t) { fn(name, std::as_const(t)); });
}

inline bool is_head_param(const std::string& name) { return name.rfind("phi", 0) == 0; }

// Registers every parameter as a leaf on `tape`; the returned bundle's
// tensors carry node handles, the original stays detached.
inline ModelBundle bind(Tape& tape, const ModelBundle& m) {
    ModelBundle bound = m;
    visit_params(bound, [&](const std::string&, Tensor& t) { t = tape.leaf(t); });
    return bound;
}

inline GradientMap collect_gradients(const Tape& tape, const ModelBundle& bound) {
    GradientMap grads;
    visit_params(bound, [&](const std::string& name, const Tensor& t) {
        grads.emplace(name, tape.grad(t));
    });
    return grads;
}

// ---- forward passes ---------------------------------------------------------

inline Tensor extract_features(Tape& tape, const ModelBundle& m, const Tensor& x,
                               const Dropout& drop = {}) {
    Dropout d = drop;
    d.include_output = true;
    return mlp_forward(tape, m.extractor, x, d);
}

inline Tensor head_forward(Tape& tape, const std::vector<Mlp>& head, const Tensor& features,
                           const Dropout& drop = {}) {
    if (head.size() == 1) return mlp_forward(tape, head[0], features, drop);
    std::vector<Tensor> parts;
    parts.reserve(head.size());
    for (const Mlp& part : head) parts.push_back(mlp_forward(tape, part, features, drop));
    return tape.concat(parts);
}

// Dual-branch forward: branch k runs head k on the shared extractor output of
// view k. x1/x2 are already-augmented views of the same batch.
inline std::pair<Tensor, Tensor> forward_pair(Tape& tape, const ModelBundle& m, const Tensor& x1,
                                              const Tensor& x2) {
    if (x1.shape.empty() || x2.shape.empty() || x1.shape[0] != x2.shape[0])
        throw ShapeError("forward_pair: batch mismatch " + shape_str(x1.shape) + " vs " +
                         shape_str(x2.shape));
    Tensor y1 = head_forward(tape, m.head1, extract_features(tape, m, x1));
    Tensor y2 = head_forward(tape, m.head2, extract_features(tape, m, x2));
    return {y1, y2};
}

// Test-time prediction: mean of the two heads on the clean input, symmetric
// in the heads.
inline Tensor forward_inference(const ModelBundle& m, const Tensor& x) {
    Tape tape;
    ModelBundle bound = bind(tape, m);
    Tensor features = extract_features(tape, bound, x);
    Tensor y1 = head_forward(tape, bound.head1, features);
    Tensor y2 = head_forward(tape, bound.head2, features);
    return tape.scale(tape.add(y1, y2), 0.5).detached();
}

// ---- EMA twin ---------------------------------------------------------------

struct EmaTwin {
    ModelBundle shadow;
    double alpha = 0.99;
};

inline EmaTwin make_ema_twin(const ModelBundle& m, double alpha) {
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("make_ema_twin: alpha must lie in [0, 1]");
    return EmaTwin{m, alpha};
}

// shadow = alpha * shadow + (1 - alpha) * current, per coordinate. Applied
// after each optimizer step.
inline void ema_update(EmaTwin& twin, const ModelBundle& current) {
    const double alpha = twin.alpha;
    std::vector<const Tensor*> src;
    visit_params(current, [&](const std::string&, const Tensor& t) { src.push_back(&t); });
    std::size_t k = 0;
    visit_params(twin.shadow, [&](const std::string& name, Tensor& t) {
        const Tensor& p = *src[k++];
        if (!same_shape(t, p))
            throw ShapeError("ema_update: shape mismatch for " + name);
        for (std::size_t i = 0; i < t.values.size(); ++i)
            t.values[i] = alpha * t.values[i] + (1.0 - alpha) * p.values[i];
    });
}

}  // namespace chi
