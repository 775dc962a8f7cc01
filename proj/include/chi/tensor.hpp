#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace chi {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    out += "]";
    return out;
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when training produces non-finite values. The CLI maps it to a
// distinct exit code.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr int kDetached = -1;

// Dense row-major tensor of doubles. `node`/`record` tie a tensor to the
// computation record that produced it; value-only tensors stay detached and
// never receive gradients.
struct Tensor {
    Shape shape;
    std::vector<double> values;
    int node = kDetached;
    std::uint64_t record = 0;

    Tensor() = default;

    Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
        if (numel(shape) != values.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    }

    static Tensor zeros(Shape s) {
        std::vector<double> v(numel(s), 0.0);
        return Tensor(std::move(s), std::move(v));
    }

    static Tensor full(Shape s, double x) {
        std::vector<double> v(numel(s), x);
        return Tensor(std::move(s), std::move(v));
    }

    static Tensor scalar(double x) { return Tensor(Shape{}, std::vector<double>{x}); }

    static Tensor row(std::vector<double> v) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v));
    }

    std::size_t size() const { return values.size(); }

    bool is_scalar() const { return values.size() == 1; }

    double item() const {
        if (!is_scalar())
            throw ShapeError("tensor: item() on non-scalar shape " + shape_str(shape));
        return values[0];
    }

    Tensor detached() const {
        Tensor t;
        t.shape = shape;
        t.values = values;
        return t;
    }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace chi
