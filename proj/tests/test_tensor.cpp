#include "primitive_cases.hpp"
#include "support.hpp"

#include "dcr/error.hpp"
#include "dcr/optim.hpp"
#include "dcr/rng.hpp"
#include "dcr/tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace dcr;
using dcr::test::random_tensor;

TEST_CASE("matmul by the identity returns the other operand") {
    Rng rng(1);
    const Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const Tensor m = random_tensor({3, 3}, rng);
    const Tensor out = matmul(eye, m);
    for (std::size_t i = 0; i < 9; ++i) CHECK(out.data()[i] == m.data()[i]);
}

TEST_CASE("adding zero is the identity") {
    Rng rng(2);
    const Tensor x = random_tensor({2, 5}, rng);
    const Tensor out = add(x, Tensor::zeros({2, 5}));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(out.data()[i] == x.data()[i]);
}

TEST_CASE("shape mismatch names both shapes") {
    const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({2, 3});
    try {
        (void)matmul(a, b);
        FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3] x [2,3]") != std::string::npos);
    }
    CHECK_THROWS_AS((void)add(a, Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("matmul gradient matches finite differences on 4x5 by 5x3") {
    Rng rng(3);
    Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
    const Tensor w = random_tensor({4, 3}, rng);
    const auto report = test::check_gradients([&] { return test::project(matmul(a, b), w); }, {a, b});
    CHECK(report.max_relative_error < 1e-6);
}

TEST_CASE("nonlinear values at reference points") {
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    const Tensor s = softmax_lastdim(Tensor::zeros({1, 4}));
    for (double v : s.data()) CHECK(v == 0.25);
    CHECK_THROWS_AS((void)softmax_lastdim(Tensor::zeros({2, 0})), DimensionError);
}

TEST_CASE("gelu gradient at 0.7 matches finite differences") {
    Tensor x = Tensor::scalar(0.7);
    const auto report = test::check_gradients([&] { return gelu(x); }, {x});
    CHECK(report.max_relative_error < 1e-6);
}

TEST_CASE("softmax rows sum to one and sigmoid stays inside the unit interval") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({3, 7}, rng, 10.0);
        const Tensor s = softmax_lastdim(x);
        for (std::size_t r = 0; r < 3; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < 7; ++c) total += s.at(r, c);
            CHECK(std::abs(total - 1.0) <= 1e-12);
        }
        // Beyond |x| ~ 37 the result rounds to 0 or 1 in double precision.
        const Tensor sig = sigmoid(test::uniform_tensor({3, 7}, rng, -30.0, 30.0));
        for (double v : sig.data()) CHECK((v > 0.0 && v < 1.0));
    }
}

TEST_CASE("layernorm rows have zero mean and unit variance") {
    Rng rng(5);
    const Tensor y = layernorm_lastdim(random_tensor({4, 16}, rng, 3.0));
    for (std::size_t r = 0; r < 4; ++r) {
        double m = 0.0, v = 0.0;
        for (std::size_t c = 0; c < 16; ++c) m += y.at(r, c) / 16.0;
        for (std::size_t c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 16.0;
        CHECK(std::abs(m) < 1e-12);
        CHECK(std::abs(v - 1.0) < 1e-9);
    }
}

TEST_CASE("gather and scatter") {
    Rng rng(6);
    const Tensor x = random_tensor({6, 3}, rng);
    std::vector<std::size_t> all(6);
    std::iota(all.begin(), all.end(), std::size_t{0});

    SUBCASE("full selection reproduces the input") {
        const Tensor g = gather_rows(x, all);
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(g.data()[i] == x.data()[i]);
    }
    SUBCASE("empty selection has zero rows") {
        const Tensor g = gather_rows(x, std::vector<std::size_t>{});
        CHECK(g.shape() == Shape{0, 3});
    }
    SUBCASE("out-of-range index names the value") {
        try {
            (void)gather_rows(x, std::vector<std::size_t>{1, 9});
            FAIL("expected an index error");
        } catch (const IndexError& e) {
            CHECK(std::string(e.what()).find('9') != std::string::npos);
        }
    }
    SUBCASE("partition identity is bit-exact") {
        for (int trial = 0; trial < 20; ++trial) {
            const auto chosen = topk_indices(random_tensor({6}, rng).data(), rng.below(7));
            std::vector<std::size_t> rest;
            for (std::size_t i = 0; i < 6; ++i) {
                if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) rest.push_back(i);
            }
            const Tensor zero = Tensor::zeros({6, 3});
            const Tensor a = scatter_rows(zero, gather_rows(x, chosen), chosen);
            const Tensor b = scatter_rows(zero, gather_rows(x, rest), rest);
            const Tensor rebuilt = add(a, b);
            for (std::size_t i = 0; i < x.numel(); ++i) CHECK(rebuilt.data()[i] == x.data()[i]);
        }
    }
}

TEST_CASE("top-k selection") {
    const std::vector<double> s{0.9, 0.1, 0.5, 0.5};
    CHECK(topk_indices(s, 2) == std::vector<std::size_t>{0, 2});
    CHECK(topk_indices(s, 0).empty());
    CHECK(topk_indices(s, 4) == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK_THROWS_AS((void)topk_indices(s, 5), ArgumentError);

    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(16);
        std::vector<double> scores(n);
        // Coarse values force frequent ties.
        for (double& v : scores) v = static_cast<double>(rng.below(4)) / 4.0;
        const std::size_t k = rng.below(n + 1);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
        std::vector<std::size_t> expected(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(expected.begin(), expected.end());
        CHECK(topk_indices(scores, k) == expected);
    }
}

TEST_CASE("backward preconditions") {
    Tensor x = Tensor::full({2, 2}, 1.0, true);
    SUBCASE("non-scalar loss") {
        Tape tape;
        Tape::Scope scope(tape);
        CHECK_THROWS_AS(tape.backward(scale(x, 2.0)), ArgumentError);
    }
    SUBCASE("second sweep without reset") {
        Tape tape;
        Tape::Scope scope(tape);
        const Tensor loss = sum(x);
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), PreconditionError);
        tape.reset();
        x.zero_grad();
        tape.backward(sum(x));
        CHECK(x.grad()[0] == 1.0);
    }
}

TEST_CASE("analytic gradients of simple losses") {
    Rng rng(8);
    Tensor x = random_tensor({3, 4}, rng, 1.0, true);
    SUBCASE("mse of a tensor with itself has zero gradient") {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(mse_mean(x, x));
        for (double g : x.grad()) CHECK(g == 0.0);
    }
    SUBCASE("sum of squares over n has gradient 2x/n") {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(scale(sum(mul(x, x)), 1.0 / 12.0));
        for (std::size_t i = 0; i < 12; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i] / 12.0).epsilon(1e-14));
    }
}

TEST_CASE("every differentiable primitive matches finite differences") {
    Rng rng(9);
    for (const auto& c : test::primitive_cases()) {
        for (int instance = 0; instance < 10; ++instance) {
            Rng local = rng.split(static_cast<std::uint64_t>(instance) * 131 + c.name.size());
            const auto report = c.run(local);
            INFO(c.name << " instance " << instance);
            CHECK(report.max_relative_error < 1e-5);
        }
    }
}

TEST_CASE("AdamW") {
    AdamWHyper hyper;
    SUBCASE("zero gradient without decay leaves parameters unchanged") {
        hyper.weight_decay = 0.0;
        std::vector<double> w{0.3, -1.2};
        const std::vector<double> g{0.0, 0.0};
        MomentState state;
        adamw_step(w, g, state, 1, hyper);
        CHECK(w == std::vector<double>{0.3, -1.2});
    }
    SUBCASE("one step on w^2 from 1 decreases |w|") {
        std::vector<double> w{1.0};
        const std::vector<double> g{2.0};
        MomentState state;
        adamw_step(w, g, state, 1, hyper);
        CHECK(std::abs(w[0]) < 1.0);
    }
    SUBCASE("ten steps follow a scalar reference trace") {
        std::vector<double> w{1.0};
        MomentState state;
        double ref = 1.0, m = 0.0, v = 0.0;
        for (int t = 1; t <= 10; ++t) {
            const double g = 2.0 * ref;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            const double mh = m / (1.0 - std::pow(0.9, t));
            const double vh = v / (1.0 - std::pow(0.999, t));
            ref = ref * (1.0 - 1e-3 * 3e-2) - 1e-3 * mh / (std::sqrt(vh) + 1e-8);

            const std::vector<double> grad{2.0 * w[0]};
            adamw_step(w, grad, state, static_cast<std::uint64_t>(t), hyper);
            CHECK(w[0] == doctest::Approx(ref).epsilon(1e-13));
        }
    }
    SUBCASE("mismatched sizes") {
        std::vector<double> w{1.0, 2.0};
        const std::vector<double> g{1.0};
        MomentState state;
        CHECK_THROWS_AS(adamw_step(w, g, state, 1, hyper), DimensionError);
    }
}

TEST_CASE("generator streams are reproducible and independent") {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const double x = a.normal();
        CHECK(x == b.normal());
        differs = differs || x != c.normal();
    }
    CHECK(differs);
    Rng parent(42);
    const Rng child1 = parent.split(1);
    parent.next_u64();
    Rng child2 = parent.split(1);
    Rng child1_copy = child1;
    CHECK(child1_copy.next_u64() == child2.next_u64());
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform();
        CHECK((u >= 0.0 && u < 1.0));
        CHECK(a.below(7) < 7);
    }
}
