#pragma once

// Finite-difference instances for every differentiable primitive, shared by
// the unit tests and the acceptance run. Instance i draws its shapes and
// values from the generator it is handed.

#include "support.hpp"

#include "dcr/ratio.hpp"
#include "dcr/routing.hpp"

#include <functional>
#include <string>
#include <vector>

namespace dcr::test {

struct PrimitiveCase {
    std::string name;
    std::function<GradCheck(Rng&)> run;
};

inline std::size_t extent(Rng& rng, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

inline GradCheck unary_case(Rng& rng, Tensor (*op)(const Tensor&), double stddev = 1.0) {
    const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 5);
    Tensor x = random_tensor({r, c}, rng, stddev);
    const Tensor w = random_tensor({r, c}, rng);
    return check_gradients([&] { return project(op(x), w); }, {x});
}

inline std::vector<PrimitiveCase> primitive_cases() {
    std::vector<PrimitiveCase> cases;
    cases.push_back({"matmul", [](Rng& rng) {
        const std::size_t m = extent(rng, 1, 5), k = extent(rng, 1, 5), n = extent(rng, 1, 5);
        Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
        const Tensor w = random_tensor({m, n}, rng);
        return check_gradients([&] { return project(matmul(a, b), w); }, {a, b});
    }});
    cases.push_back({"linear", [](Rng& rng) {
        const std::size_t m = extent(rng, 1, 5), k = extent(rng, 1, 5), n = extent(rng, 1, 5);
        Tensor x = random_tensor({m, k}, rng), wt = random_tensor({k, n}, rng), b = random_tensor({n}, rng);
        const Tensor w = random_tensor({m, n}, rng);
        return check_gradients([&] { return project(linear(x, wt, b), w); }, {x, wt, b});
    }});
    cases.push_back({"add", [](Rng& rng) {
        const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 4);
        Tensor a = random_tensor({r, c}, rng), b = random_tensor({r, c}, rng);
        Tensor s = random_tensor({1}, rng); // broadcast operand
        const Tensor w = random_tensor({r, c}, rng);
        return check_gradients([&] { return project(add(add(a, b), s), w); }, {a, b, s});
    }});
    cases.push_back({"sub", [](Rng& rng) {
        const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 4);
        Tensor a = random_tensor({r, c}, rng), b = random_tensor({r, c}, rng);
        const Tensor w = random_tensor({r, c}, rng);
        return check_gradients([&] { return project(sub(a, b), w); }, {a, b});
    }});
    cases.push_back({"mul", [](Rng& rng) {
        const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 4);
        Tensor a = random_tensor({r, c}, rng), b = random_tensor({r, c}, rng);
        Tensor s = random_tensor({1}, rng);
        const Tensor w = random_tensor({r, c}, rng);
        return check_gradients([&] { return project(mul(mul(a, b), s), w); }, {a, b, s});
    }});
    cases.push_back({"scale", [](Rng& rng) {
        const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 4);
        Tensor a = random_tensor({r, c}, rng);
        const double f = rng.normal();
        const Tensor w = random_tensor({r, c}, rng);
        return check_gradients([&] { return project(scale(a, f), w); }, {a});
    }});
    cases.push_back({"add_rows", [](Rng& rng) {
        const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 4);
        Tensor x = random_tensor({r, c}, rng), b = random_tensor({c}, rng);
        const Tensor w = random_tensor({r, c}, rng);
        return check_gradients([&] { return project(add_rows(x, b), w); }, {x, b});
    }});
    cases.push_back({"affine_rows", [](Rng& rng) {
        const std::size_t g1 = extent(rng, 1, 3), g2 = extent(rng, 1, 3), c = extent(rng, 1, 4);
        const std::vector<std::size_t> groups{g1, g2};
        Tensor x = random_tensor({g1 + g2, c}, rng);
        Tensor gain = random_tensor({2, c}, rng), bias = random_tensor({2, c}, rng);
        const Tensor w = random_tensor({g1 + g2, c}, rng);
        return check_gradients([&] { return project(affine_rows(x, gain, bias, 1.0, groups), w); },
                               {x, gain, bias});
    }});
    cases.push_back({"scale_rows", [](Rng& rng) {
        const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 4);
        Tensor x = random_tensor({r, c}, rng), f = random_tensor({r, 1}, rng);
        const Tensor w = random_tensor({r, c}, rng);
        return check_gradients([&] { return project(scale_rows(x, f), w); }, {x, f});
    }});
    cases.push_back({"sum", [](Rng& rng) {
        Tensor x = random_tensor({extent(rng, 1, 4), extent(rng, 1, 4)}, rng);
        return check_gradients([&] { return scale(sum(x), 1.7); }, {x});
    }});
    cases.push_back({"mean", [](Rng& rng) {
        Tensor x = random_tensor({extent(rng, 1, 4), extent(rng, 1, 4)}, rng);
        return check_gradients([&] { return mul(mean(x), mean(x)); }, {x});
    }});
    cases.push_back({"reshape", [](Rng& rng) {
        const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 4);
        Tensor x = random_tensor({r, c}, rng);
        const Tensor w = random_tensor({c, r}, rng);
        return check_gradients([&] { return project(reshape(x, {c, r}), w); }, {x});
    }});
    cases.push_back({"columns", [](Rng& rng) {
        const std::size_t r = extent(rng, 1, 4), c = extent(rng, 2, 6);
        const std::size_t begin = rng.below(c), count = 1 + rng.below(c - begin);
        Tensor x = random_tensor({r, c}, rng);
        const Tensor w = random_tensor({r, count}, rng);
        return check_gradients([&] { return project(columns(x, begin, count), w); }, {x});
    }});
    cases.push_back({"pick", [](Rng& rng) {
        Tensor x = random_tensor({extent(rng, 1, 4), extent(rng, 1, 4)}, rng);
        const std::size_t i = rng.below(x.numel());
        return check_gradients([&] { return mul(pick(x, i), pick(x, i)); }, {x});
    }});
    cases.push_back({"sigmoid", [](Rng& rng) { return unary_case(rng, sigmoid, 2.0); }});
    cases.push_back({"gelu", [](Rng& rng) { return unary_case(rng, gelu, 2.0); }});
    cases.push_back({"silu", [](Rng& rng) { return unary_case(rng, silu, 2.0); }});
    cases.push_back({"softmax_lastdim", [](Rng& rng) { return unary_case(rng, softmax_lastdim, 2.0); }});
    cases.push_back({"layernorm_lastdim", [](Rng& rng) {
        // Two columns normalize to exactly +/-1 with zero gradient.
        const std::size_t r = extent(rng, 1, 4), c = extent(rng, 3, 6);
        Tensor x = random_tensor({r, c}, rng);
        const Tensor w = random_tensor({r, c}, rng);
        return check_gradients([&] { return project(layernorm_lastdim(x), w); }, {x});
    }});
    cases.push_back({"mse_mean", [](Rng& rng) {
        const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 4);
        Tensor a = random_tensor({r, c}, rng), b = random_tensor({r, c}, rng);
        return check_gradients([&] { return mse_mean(a, b); }, {a, b});
    }});
    cases.push_back({"attention", [](Rng& rng) {
        const std::size_t heads = extent(rng, 1, 2), head_dim = extent(rng, 1, 3);
        const std::size_t d = heads * head_dim;
        const std::vector<std::size_t> groups{extent(rng, 1, 3), extent(rng, 1, 3)};
        const std::size_t n = groups[0] + groups[1];
        Tensor q = random_tensor({n, d}, rng), k = random_tensor({n, d}, rng), v = random_tensor({n, d}, rng);
        const Tensor w = random_tensor({n, d}, rng);
        return check_gradients([&] { return project(attention(q, k, v, heads, groups), w); }, {q, k, v});
    }});
    cases.push_back({"gather_rows", [](Rng& rng) {
        const std::size_t r = extent(rng, 1, 5), c = extent(rng, 1, 4);
        std::vector<std::size_t> idx(extent(rng, 1, 6));
        for (std::size_t& i : idx) i = rng.below(r); // repeats accumulate
        Tensor x = random_tensor({r, c}, rng);
        const Tensor w = random_tensor({idx.size(), c}, rng);
        return check_gradients([&] { return project(gather_rows(x, idx), w); }, {x});
    }});
    cases.push_back({"scatter_rows", [](Rng& rng) {
        const std::size_t r = extent(rng, 2, 6), c = extent(rng, 1, 4);
        std::vector<std::size_t> all(r);
        for (std::size_t i = 0; i < r; ++i) all[i] = i;
        const std::size_t k = extent(rng, 1, r);
        const std::vector<std::size_t> idx = topk_indices(random_tensor({r}, rng).data(), k);
        Tensor base = random_tensor({r, c}, rng), rows = random_tensor({k, c}, rng);
        const Tensor w = random_tensor({r, c}, rng);
        return check_gradients([&] { return project(scatter_rows(base, rows, idx), w); }, {base, rows});
    }});
    cases.push_back({"blend_branches", [](Rng& rng) {
        const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 4);
        Tensor lo = random_tensor({r, c}, rng), hi = random_tensor({r, c}, rng);
        // Stay away from cell edges so r +/- step keeps the same bins.
        const double cell = static_cast<double>(rng.below(10)) / 10.0;
        Tensor ratio = Tensor::scalar(cell + 0.01 + 0.08 * rng.uniform());
        const Tensor w = random_tensor({r, c}, rng);
        return check_gradients(
            [&] { return project(blend_branches(lo, hi, ratio, query_bins(ratio.item())), w); },
            {lo, hi, ratio});
    }});
    return cases;
}

} // namespace dcr::test
