#include <doctest.h>

#include "chi/tape.hpp"
#include "chi/tensor.hpp"

#include "../common/gradcheck.hpp"

using namespace chi;

TEST_CASE("tensor shape bookkeeping") {
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
    Tensor t = Tensor::zeros({2, 3});
    CHECK(t.size() == 6);
    CHECK(Tensor::scalar(4.0).item() == 4.0);
    CHECK_THROWS_AS(t.item(), ShapeError);
}

TEST_CASE("primitive forward values") {
    Tape tape;
    SUBCASE("sigmoid midpoint") {
        Tensor y = tape.sigmoid(tape.leaf(Tensor::row({0.0})));
        CHECK(y.values[0] == doctest::Approx(0.5));
    }
    SUBCASE("relu definition") {
        Tensor y = tape.relu(tape.leaf(Tensor::row({-1.0, 2.0})));
        CHECK(y.values[0] == 0.0);
        CHECK(y.values[1] == 2.0);
    }
    SUBCASE("matmul identity") {
        Tensor eye({2, 2}, {1.0, 0.0, 0.0, 1.0});
        Tensor a({2, 2}, {3.0, -1.0, 2.5, 7.0});
        Tensor y = tape.matmul(tape.leaf(eye), tape.leaf(a));
        CHECK(y.values == a.values);
    }
    SUBCASE("softmax rows normalize") {
        Tensor y = tape.softmax(tape.leaf(Tensor({2, 3}, {1.0, 2.0, 3.0, -5.0, 0.0, 5.0})));
        for (std::size_t r = 0; r < 2; ++r) {
            double s = y.values[r * 3] + y.values[r * 3 + 1] + y.values[r * 3 + 2];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    SUBCASE("log clamps instead of diverging") {
        Tensor y = tape.log(tape.leaf(Tensor::row({0.0})));
        CHECK(std::isfinite(y.values[0]));
        CHECK(y.values[0] == doctest::Approx(std::log(1e-12)));
    }
}

TEST_CASE("shape errors name the primitive and both shapes") {
    Tape tape;
    Tensor a = tape.leaf(Tensor::zeros({2, 3}));
    Tensor b = tape.leaf(Tensor::zeros({4, 5}));
    try {
        tape.matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,5]") != std::string::npos);
    }
}

TEST_CASE("backward basics") {
    SUBCASE("power rule: loss = x^2 at x = 3") {
        Tape tape;
        Tensor x = tape.leaf(Tensor::row({3.0}));
        Tensor loss = tape.sum(tape.square(x));
        tape.backward(loss);
        CHECK(tape.grad(x).values[0] == doctest::Approx(6.0));
    }
    SUBCASE("unreachable parameter gets a zero tensor") {
        Tape tape;
        Tensor x = tape.leaf(Tensor::row({1.0, 2.0}));
        Tensor p = tape.leaf(Tensor::zeros({3}));
        Tensor loss = tape.mean(x);
        tape.backward(loss);
        Tensor g = tape.grad(p);
        CHECK(g.shape == Shape{3});
        for (double v : g.values) CHECK(v == 0.0);
    }
    SUBCASE("non-scalar loss rejected") {
        Tape tape;
        Tensor x = tape.leaf(Tensor::row({1.0, 2.0}));
        CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
    }
    SUBCASE("tensor from another record rejected") {
        Tape tape;
        Tape other;
        Tensor x = other.leaf(Tensor::row({1.0}));
        CHECK_THROWS_AS(tape.backward(x), std::logic_error);
        CHECK_THROWS_AS(tape.sum(x), std::logic_error);
    }
    SUBCASE("gradient accumulates over repeated use") {
        // loss = sum(x * x') where both factors are the same leaf
        Tape tape;
        Tensor x = tape.leaf(Tensor::row({2.0}));
        Tensor loss = tape.sum(tape.mul(x, x));
        tape.backward(loss);
        CHECK(tape.grad(x).values[0] == doctest::Approx(4.0));
    }
    SUBCASE("backward is repeatable and deterministic") {
        Tape tape;
        Tensor x = tape.leaf(Tensor::row({0.3, -0.8}));
        Tensor loss = tape.mean(tape.tanh(x));
        tape.backward(loss);
        const std::vector<double> first = tape.grad(x).values;
        tape.backward(loss);
        CHECK(tape.grad(x).values == first);
    }
}

TEST_CASE("backward matches finite differences on a composite") {
    // loss = mean(sigmoid(W x)) on small random W, x
    RngStream rng(7, "composite");
    NamedParams params;
    params.emplace_back("w", chitest::random_tensor({3, 4}, rng));
    params.emplace_back("x", chitest::random_tensor({2, 3}, rng));

    auto build = [](Tape& tape, const Tensor& w, const Tensor& x) {
        return tape.mean(tape.sigmoid(tape.matmul(x, w)));
    };
    Tape tape;
    Tensor w = tape.leaf(params[0].second);
    Tensor x = tape.leaf(params[1].second);
    tape.backward(build(tape, w, x));

    auto f = [&](const NamedParams& p) {
        Tape t;
        return build(t, t.leaf(p[0].second), t.leaf(p[1].second)).item();
    };
    GradientMap fd = finite_diff_gradient(f, params, 1e-5);
    for (std::size_t i = 0; i < fd.at("w").values.size(); ++i)
        CHECK(chitest::close_rel(tape.grad(w).values[i], fd.at("w").values[i], 1e-4, 1e-7));
    for (std::size_t i = 0; i < fd.at("x").values.size(); ++i)
        CHECK(chitest::close_rel(tape.grad(x).values[i], fd.at("x").values[i], 1e-4, 1e-7));
}

TEST_CASE("grad_reverse contract") {
    SUBCASE("forward is the identity") {
        Tape tape;
        Tensor x = tape.leaf(Tensor::row({1.5, -2.0}));
        Tensor y = tape.grad_reverse(x, 1.0);
        CHECK(y.values == std::vector<double>{1.5, -2.0});
    }
    SUBCASE("lambda 0 annihilates the upstream gradient") {
        Tape tape;
        Tensor x = tape.leaf(Tensor::row({0.4, 0.6}));
        tape.backward(tape.sum(tape.grad_reverse(x, 0.0)));
        for (double v : tape.grad(x).values) CHECK(v == 0.0);
    }
    SUBCASE("sum through reversal scales by -lambda") {
        Tape tape;
        Tensor x = tape.leaf(Tensor::row({1.0, 2.0, 3.0}));
        tape.backward(tape.sum(tape.grad_reverse(x, 0.5)));
        for (double v : tape.grad(x).values) CHECK(v == doctest::Approx(-0.5));
    }
    SUBCASE("backward scaling equals -lambda times the identity path") {
        RngStream rng(3, "grl");
        Tensor value = chitest::random_tensor({2, 3}, rng);
        Tensor weights = chitest::random_tensor({2, 3}, rng);
        const double lambda = 1.7;

        Tape with;
        Tensor xw = with.leaf(value);
        with.backward(with.sum(with.mul(with.grad_reverse(xw, lambda), weights)));
        Tape without;
        Tensor xo = without.leaf(value);
        without.backward(without.sum(without.mul(xo, weights)));

        for (std::size_t i = 0; i < value.size(); ++i)
            CHECK(with.grad(xw).values[i] == -lambda * without.grad(xo).values[i]);
    }
    SUBCASE("negative lambda rejected") {
        Tape tape;
        Tensor x = tape.leaf(Tensor::row({1.0}));
        CHECK_THROWS_AS(tape.grad_reverse(x, -0.1), std::invalid_argument);
    }
}

TEST_CASE("finite_diff_gradient oracle sanity") {
    SUBCASE("quadratic is exact under central differences") {
        NamedParams params;
        params.emplace_back("x", Tensor::row({3.0}));
        auto f = [](const NamedParams& p) {
            return p[0].second.values[0] * p[0].second.values[0];
        };
        GradientMap g = finite_diff_gradient(f, params, 1e-5);
        CHECK(g.at("x").values[0] == doctest::Approx(6.0).epsilon(1e-6));
    }
    SUBCASE("linear functions are exact regardless of epsilon") {
        NamedParams params;
        params.emplace_back("x", Tensor::row({1.0, -2.0}));
        auto f = [](const NamedParams& p) {
            return 3.0 * p[0].second.values[0] - 0.5 * p[0].second.values[1];
        };
        for (double eps : {1e-2, 1e-5}) {
            GradientMap g = finite_diff_gradient(f, params, eps);
            CHECK(g.at("x").values[0] == doctest::Approx(3.0).epsilon(1e-9));
            CHECK(g.at("x").values[1] == doctest::Approx(-0.5).epsilon(1e-9));
        }
    }
}

TEST_CASE("randomized gradcheck across every primitive kind") {
    for (Prim kind : chitest::gradcheck_kinds()) {
        const std::string failure = chitest::gradcheck_primitive(kind, 25, 2024);
        INFO(failure);
        CHECK(failure.empty());
    }
}

TEST_CASE("apply_primitive dispatches by kind") {
    Tape tape;
    Tensor a = tape.leaf(Tensor::row({1.0, -2.0}));
    Tensor b = tape.leaf(Tensor::row({0.5, 0.5}));
    Tensor sum = tape.apply_primitive(Prim::kAdd, {a, b});
    CHECK(sum.values == std::vector<double>{1.5, -1.5});
    Tensor scaled = tape.apply_primitive(Prim::kScale, {a}, 2.0);
    CHECK(scaled.values == std::vector<double>{2.0, -4.0});
    CHECK_THROWS_AS(tape.apply_primitive(Prim::kAdd, {a}), ShapeError);
}
