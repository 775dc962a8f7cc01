#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "chi/tensor.hpp"

namespace chi {

// Gradients keyed by parameter name. std::map keeps iteration order stable.
using GradientMap = std::map<std::string, Tensor>;

enum class Prim {
    kLeaf,
    kMatMul,
    kAdd,
    kSub,
    kMul,
    kScale,
    kRelu,
    kTanh,
    kSigmoid,
    kSoftmax,
    kLog,
    kExp,
    kSum,
    kMean,
    kAbs,
    kSquare,
    kConcat,
    kGradReverse,
};

inline const char* prim_name(Prim p) {
    switch (p) {
        case Prim::kLeaf: return "leaf";
        case Prim::kMatMul: return "matmul";
        case Prim::kAdd: return "add";
        case Prim::kSub: return "sub";
        case Prim::kMul: return "mul";
        case Prim::kScale: return "scale";
        case Prim::kRelu: return "relu";
        case Prim::kTanh: return "tanh";
        case Prim::kSigmoid: return "sigmoid";
        case Prim::kSoftmax: return "softmax";
        case Prim::kLog: return "log";
        case Prim::kExp: return "exp";
        case Prim::kSum: return "sum";
        case Prim::kMean: return "mean";
        case Prim::kAbs: return "abs";
        case Prim::kSquare: return "square";
        case Prim::kConcat: return "concat";
        case Prim::kGradReverse: return "grad_reverse";
    }
    return "?";
}

// log() clamps its argument here so symmetric KL stays finite.
constexpr double kLogClamp = 1e-12;

// Reverse-mode computation record. Nodes are appended in evaluation order, so
// the sequence is topological by construction; backward() walks it once in
// reverse. Records are rebuilt per training step (define-by-run).
class Tape {
public:
    Tape() : id_(next_id_.fetch_add(1, std::memory_order_relaxed) + 1) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }

    // Registers a gradient-carrying leaf (a parameter or input we may
    // differentiate with respect to).
    Tensor leaf(const Tensor& value) {
        return emplace(Prim::kLeaf, {}, value.shape, value.values, {});
    }

    // ---- elementwise and matrix primitives -------------------------------

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
            throw ShapeError(mismatch("matmul", a, b));
        const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
        std::vector<double> out(m * n, 0.0);
        const double* av = a.values.data();
        const double* bv = b.values.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = av[i * k + p];
                const double* brow = bv + p * n;
                double* orow = out.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
            }
        const int ia = node_of(a), ib = node_of(b);
        return emplace(Prim::kMatMul, {ia, ib}, {m, n}, std::move(out),
                       [ia, ib, m, k, n, av2 = a.values, bv2 = b.values](Tape& t, const std::vector<double>& g) {
                           if (ia >= 0) {
                               auto& da = t.grad_buf(ia);
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) {
                                       const double gij = g[i * n + j];
                                       for (std::size_t p = 0; p < k; ++p)
                                           da[i * k + p] += gij * bv2[p * n + j];
                                   }
                           }
                           if (ib >= 0) {
                               auto& db = t.grad_buf(ib);
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                       const double aip = av2[i * k + p];
                                       for (std::size_t j = 0; j < n; ++j)
                                           db[p * n + j] += aip * g[i * n + j];
                                   }
                           }
                       });
    }

    // Same-shape elementwise add, or matrix + row vector (bias broadcast).
    Tensor add(const Tensor& a, const Tensor& b) {
        if (same_shape(a, b)) {
            std::vector<double> out(a.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] + b.values[i];
            const int ia = node_of(a), ib = node_of(b);
            return emplace(Prim::kAdd, {ia, ib}, a.shape, std::move(out),
                           [ia, ib](Tape& t, const std::vector<double>& g) {
                               if (ia >= 0) accumulate(t.grad_buf(ia), g, 1.0);
                               if (ib >= 0) accumulate(t.grad_buf(ib), g, 1.0);
                           });
        }
        if (a.shape.size() == 2 && b.shape.size() == 1 && a.shape[1] == b.shape[0]) {
            const std::size_t rows = a.shape[0], cols = a.shape[1];
            std::vector<double> out(a.size());
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    out[r * cols + c] = a.values[r * cols + c] + b.values[c];
            const int ia = node_of(a), ib = node_of(b);
            return emplace(Prim::kAdd, {ia, ib}, a.shape, std::move(out),
                           [ia, ib, rows, cols](Tape& t, const std::vector<double>& g) {
                               if (ia >= 0) accumulate(t.grad_buf(ia), g, 1.0);
                               if (ib >= 0) {
                                   auto& db = t.grad_buf(ib);
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t c = 0; c < cols; ++c) db[c] += g[r * cols + c];
                               }
                           });
        }
        throw ShapeError(mismatch("add", a, b));
    }

    Tensor sub(const Tensor& a, const Tensor& b) {
        if (!same_shape(a, b)) throw ShapeError(mismatch("sub", a, b));
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] - b.values[i];
        const int ia = node_of(a), ib = node_of(b);
        return emplace(Prim::kSub, {ia, ib}, a.shape, std::move(out),
                       [ia, ib](Tape& t, const std::vector<double>& g) {
                           if (ia >= 0) accumulate(t.grad_buf(ia), g, 1.0);
                           if (ib >= 0) accumulate(t.grad_buf(ib), g, -1.0);
                       });
    }

    Tensor mul(const Tensor& a, const Tensor& b) {
        if (!same_shape(a, b)) throw ShapeError(mismatch("mul", a, b));
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] * b.values[i];
        const int ia = node_of(a), ib = node_of(b);
        return emplace(Prim::kMul, {ia, ib}, a.shape, std::move(out),
                       [ia, ib, av = a.values, bv = b.values](Tape& t, const std::vector<double>& g) {
                           if (ia >= 0) {
                               auto& da = t.grad_buf(ia);
                               for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
                           }
                           if (ib >= 0) {
                               auto& db = t.grad_buf(ib);
                               for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
                           }
                       });
    }

    Tensor scale(const Tensor& a, double c) {
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] * c;
        const int ia = node_of(a);
        return emplace(Prim::kScale, {ia}, a.shape, std::move(out),
                       [ia, c](Tape& t, const std::vector<double>& g) {
                           if (ia >= 0) accumulate(t.grad_buf(ia), g, c);
                       });
    }

    Tensor relu(const Tensor& a) {
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] > 0.0 ? a.values[i] : 0.0;
        const int ia = node_of(a);
        return emplace(Prim::kRelu, {ia}, a.shape, std::move(out),
                       [ia, xv = a.values](Tape& t, const std::vector<double>& g) {
                           if (ia < 0) return;
                           auto& da = t.grad_buf(ia);
                           for (std::size_t i = 0; i < g.size(); ++i)
                               if (xv[i] > 0.0) da[i] += g[i];
                       });
    }

    Tensor tanh(const Tensor& a) {
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.values[i]);
        const int ia = node_of(a);
        return emplace(Prim::kTanh, {ia}, a.shape, std::vector<double>(out),
                       [ia, yv = out](Tape& t, const std::vector<double>& g) {
                           if (ia < 0) return;
                           auto& da = t.grad_buf(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (1.0 - yv[i] * yv[i]);
                       });
    }

    Tensor sigmoid(const Tensor& a) {
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a.values[i]));
        const int ia = node_of(a);
        return emplace(Prim::kSigmoid, {ia}, a.shape, std::vector<double>(out),
                       [ia, yv = out](Tape& t, const std::vector<double>& g) {
                           if (ia < 0) return;
                           auto& da = t.grad_buf(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * yv[i] * (1.0 - yv[i]);
                       });
    }

    // Softmax over the last axis, max-subtracted for stability.
    Tensor softmax(const Tensor& a) {
        if (a.shape.empty()) throw ShapeError("softmax: rank-0 input");
        const std::size_t cols = a.shape.back();
        const std::size_t rows = a.size() / cols;
        std::vector<double> out(a.size());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* x = a.values.data() + r * cols;
            double* y = out.data() + r * cols;
            double mx = x[0];
            for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
            double z = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                y[c] = std::exp(x[c] - mx);
                z += y[c];
            }
            for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
        }
        const int ia = node_of(a);
        return emplace(Prim::kSoftmax, {ia}, a.shape, std::vector<double>(out),
                       [ia, rows, cols, yv = out](Tape& t, const std::vector<double>& g) {
                           if (ia < 0) return;
                           auto& da = t.grad_buf(ia);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* y = yv.data() + r * cols;
                               const double* gr = g.data() + r * cols;
                               double dot = 0.0;
                               for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
                               for (std::size_t c = 0; c < cols; ++c)
                                   da[r * cols + c] += y[c] * (gr[c] - dot);
                           }
                       });
    }

    Tensor log(const Tensor& a) {
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = std::log(std::max(a.values[i], kLogClamp));
        const int ia = node_of(a);
        return emplace(Prim::kLog, {ia}, a.shape, std::move(out),
                       [ia, xv = a.values](Tape& t, const std::vector<double>& g) {
                           if (ia < 0) return;
                           auto& da = t.grad_buf(ia);
                           for (std::size_t i = 0; i < g.size(); ++i)
                               if (xv[i] >= kLogClamp) da[i] += g[i] / xv[i];
                       });
    }

    Tensor exp(const Tensor& a) {
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values[i]);
        const int ia = node_of(a);
        return emplace(Prim::kExp, {ia}, a.shape, std::vector<double>(out),
                       [ia, yv = out](Tape& t, const std::vector<double>& g) {
                           if (ia < 0) return;
                           auto& da = t.grad_buf(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * yv[i];
                       });
    }

    Tensor abs(const Tensor& a) {
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a.values[i]);
        const int ia = node_of(a);
        return emplace(Prim::kAbs, {ia}, a.shape, std::move(out),
                       [ia, xv = a.values](Tape& t, const std::vector<double>& g) {
                           if (ia < 0) return;
                           auto& da = t.grad_buf(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               if (xv[i] > 0.0) da[i] += g[i];
                               else if (xv[i] < 0.0) da[i] -= g[i];
                           }
                       });
    }

    Tensor square(const Tensor& a) {
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] * a.values[i];
        const int ia = node_of(a);
        return emplace(Prim::kSquare, {ia}, a.shape, std::move(out),
                       [ia, xv = a.values](Tape& t, const std::vector<double>& g) {
                           if (ia < 0) return;
                           auto& da = t.grad_buf(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * 2.0 * xv[i];
                       });
    }

    Tensor sum(const Tensor& a) {
        double s = 0.0;
        for (double v : a.values) s += v;
        const int ia = node_of(a);
        return emplace(Prim::kSum, {ia}, Shape{}, {s},
                       [ia](Tape& t, const std::vector<double>& g) {
                           if (ia >= 0) {
                               auto& da = t.grad_buf(ia);
                               for (double& d : da) d += g[0];
                           }
                       });
    }

    Tensor mean(const Tensor& a) {
        if (a.size() == 0) throw ShapeError("mean: empty tensor");
        double s = 0.0;
        for (double v : a.values) s += v;
        const double inv = 1.0 / double(a.size());
        const int ia = node_of(a);
        return emplace(Prim::kMean, {ia}, Shape{}, {s * inv},
                       [ia, inv](Tape& t, const std::vector<double>& g) {
                           if (ia >= 0) {
                               auto& da = t.grad_buf(ia);
                               for (double& d : da) d += g[0] * inv;
                           }
                       });
    }

    // Concatenation along the last axis; leading extents must agree.
    Tensor concat(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw ShapeError("concat: no inputs");
        const Shape& lead = parts[0].shape;
        if (lead.empty()) throw ShapeError("concat: rank-0 input");
        std::size_t total_cols = 0;
        std::vector<std::size_t> cols(parts.size());
        for (std::size_t p = 0; p < parts.size(); ++p) {
            const Shape& s = parts[p].shape;
            if (s.size() != lead.size() ||
                !std::equal(s.begin(), s.end() - 1, lead.begin(), lead.end() - 1))
                throw ShapeError(mismatch("concat", parts[0], parts[p]));
            cols[p] = s.back();
            total_cols += s.back();
        }
        const std::size_t rows = parts[0].size() / cols[0];
        Shape out_shape = lead;
        out_shape.back() = total_cols;
        std::vector<double> out(rows * total_cols);
        std::vector<int> ids(parts.size());
        for (std::size_t p = 0, off = 0; p < parts.size(); off += cols[p], ++p) {
            ids[p] = node_of(parts[p]);
            for (std::size_t r = 0; r < rows; ++r)
                std::copy_n(parts[p].values.data() + r * cols[p], cols[p],
                            out.data() + r * total_cols + off);
        }
        return emplace(Prim::kConcat, std::vector<int>(ids), std::move(out_shape), std::move(out),
                       [ids, cols, rows, total_cols](Tape& t, const std::vector<double>& g) {
                           for (std::size_t p = 0, off = 0; p < ids.size(); off += cols[p], ++p) {
                               if (ids[p] < 0) continue;
                               auto& dp = t.grad_buf(ids[p]);
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t c = 0; c < cols[p]; ++c)
                                       dp[r * cols[p] + c] += g[r * total_cols + off + c];
                           }
                       });
    }

    // Identity forward; multiplies the upstream gradient by -lambda on the
    // way back. This is what turns one backward pass into the minimax update.
    Tensor grad_reverse(const Tensor& a, double lambda) {
        if (lambda < 0.0)
            throw std::invalid_argument("grad_reverse: lambda must be non-negative, got " +
                                        std::to_string(lambda));
        const int ia = node_of(a);
        return emplace(Prim::kGradReverse, {ia}, a.shape, a.values,
                       [ia, lambda](Tape& t, const std::vector<double>& g) {
                           if (ia >= 0) accumulate(t.grad_buf(ia), g, -lambda);
                       });
    }

    // Generic dispatcher; `attr` carries the scalar for kScale/kGradReverse.
    Tensor apply_primitive(Prim kind, const std::vector<Tensor>& inputs, double attr = 0.0) {
        auto want = [&](std::size_t n) {
            if (inputs.size() != n)
                throw ShapeError(std::string(prim_name(kind)) + ": expected " + std::to_string(n) +
                                 " inputs, got " + std::to_string(inputs.size()));
        };
        switch (kind) {
            case Prim::kMatMul: want(2); return matmul(inputs[0], inputs[1]);
            case Prim::kAdd: want(2); return add(inputs[0], inputs[1]);
            case Prim::kSub: want(2); return sub(inputs[0], inputs[1]);
            case Prim::kMul: want(2); return mul(inputs[0], inputs[1]);
            case Prim::kScale: want(1); return scale(inputs[0], attr);
            case Prim::kRelu: want(1); return relu(inputs[0]);
            case Prim::kTanh: want(1); return tanh(inputs[0]);
            case Prim::kSigmoid: want(1); return sigmoid(inputs[0]);
            case Prim::kSoftmax: want(1); return softmax(inputs[0]);
            case Prim::kLog: want(1); return log(inputs[0]);
            case Prim::kExp: want(1); return exp(inputs[0]);
            case Prim::kSum: want(1); return sum(inputs[0]);
            case Prim::kMean: want(1); return mean(inputs[0]);
            case Prim::kAbs: want(1); return abs(inputs[0]);
            case Prim::kSquare: want(1); return square(inputs[0]);
            case Prim::kConcat: return concat(inputs);
            case Prim::kGradReverse: want(1); return grad_reverse(inputs[0], attr);
            case Prim::kLeaf: want(1); return leaf(inputs[0]);
        }
        throw std::invalid_argument("apply_primitive: unknown kind");
    }

    // ---- backward ---------------------------------------------------------

    // Seeds d(loss)/d(loss) = 1 and pulls gradients through every recorded
    // node exactly once, in reverse order. Repeated uses of a node sum their
    // contributions (multivariate chain rule). Callable repeatedly.
    void backward(const Tensor& loss) {
        check_owned("backward", loss);
        if (numel(nodes_[loss.node].shape) != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(nodes_[loss.node].shape));
        grads_.assign(nodes_.size(), {});
        grad_buf(loss.node)[0] = 1.0;
        for (int i = loss.node; i >= 0; --i) {
            if (grads_[i].empty() || !nodes_[i].pull) continue;
            nodes_[i].pull(*this, grads_[i]);
        }
        ran_backward_ = true;
    }

    bool has_grad(const Tensor& t) const {
        check_owned("has_grad", t);
        return ran_backward_ && !grads_[t.node].empty();
    }

    // Gradient of the last backward() loss w.r.t. `t`; zeros when `t` was not
    // reached.
    Tensor grad(const Tensor& t) const {
        check_owned("grad", t);
        if (!ran_backward_) throw std::logic_error("grad: backward() has not run");
        if (grads_[t.node].empty()) return Tensor::zeros(t.shape);
        return Tensor(t.shape, grads_[t.node]);
    }

private:
    using PullFn = std::function<void(Tape&, const std::vector<double>&)>;

    struct Node {
        Prim kind;
        std::vector<int> inputs;
        Shape shape;
        PullFn pull;
    };

    static void accumulate(std::vector<double>& dst, const std::vector<double>& src, double c) {
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] += c * src[i];
    }

    static std::string mismatch(const char* prim, const Tensor& a, const Tensor& b) {
        return std::string(prim) + ": shape mismatch " + shape_str(a.shape) + " vs " +
               shape_str(b.shape);
    }

    int node_of(const Tensor& t) const {
        if (t.node == kDetached) return kDetached;
        if (t.record != id_)
            throw std::logic_error("tape: tensor belongs to a different computation record");
        return t.node;
    }

    void check_owned(const char* what, const Tensor& t) const {
        if (t.node == kDetached || t.record != id_ || t.node >= int(nodes_.size()))
            throw std::logic_error(std::string(what) + ": tensor is not on this record");
    }

    std::vector<double>& grad_buf(int node) {
        if (grads_[node].empty()) grads_[node].assign(numel(nodes_[node].shape), 0.0);
        return grads_[node];
    }

    Tensor emplace(Prim kind, std::vector<int> inputs, Shape shape, std::vector<double> values,
                   PullFn pull) {
        nodes_.push_back(Node{kind, std::move(inputs), shape, std::move(pull)});
        Tensor t(std::move(shape), std::move(values));
        t.node = int(nodes_.size()) - 1;
        t.record = id_;
        return t;
    }

    std::uint64_t id_;
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool ran_backward_ = false;

    inline static std::atomic<std::uint64_t> next_id_{0};
};

// Central-difference gradient oracle: (f(p+eps) - f(p-eps)) / (2 eps) per
// coordinate. `f` must be deterministic for fixed parameters (freeze any RNG
// per evaluation).
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

inline GradientMap finite_diff_gradient(const std::function<double(const NamedParams&)>& f,
                                        NamedParams params, double epsilon) {
    GradientMap out;
    for (auto& [name, tensor] : params) out.emplace(name, Tensor::zeros(tensor.shape));
    for (auto& [name, tensor] : params) {
        Tensor& g = out.at(name);
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            const double saved = tensor.values[i];
            tensor.values[i] = saved + epsilon;
            const double hi = f(params);
            tensor.values[i] = saved - epsilon;
            const double lo = f(params);
            tensor.values[i] = saved;
            g.values[i] = (hi - lo) / (2.0 * epsilon);
        }
    }
    return out;
}

}  // namespace chi
