#include "support.hpp"

#include "dcr/block.hpp"
#include "dcr/error.hpp"
#include "dcr/model.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace dcr;
using dcr::test::random_tensor;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.image_side = 8;
    c.patch_side = 2;
    c.hidden_dim = 16;
    c.heads = 2;
    c.layers = 3;
    c.classes = 3;
    return c;
}

void randomize(DiT& model, std::uint64_t seed, double stddev = 0.2) {
    Rng rng(seed);
    for (const NamedParam& p : model.parameters()) {
        Tensor t = p.tensor;
        for (double& x : t.mutable_data()) x = stddev * rng.normal();
    }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

// Plain-double reference of the pieces used by the hand trace.
std::vector<double> layernorm_row(std::vector<double> v) {
    double m = 0.0, var = 0.0;
    for (double x : v) m += x / static_cast<double>(v.size());
    for (double x : v) var += (x - m) * (x - m) / static_cast<double>(v.size());
    for (double& x : v) x = (x - m) / std::sqrt(var + 1e-10);
    return v;
}

double gelu_ref(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

} // namespace

TEST_CASE("patchify") {
    ModelConfig c;
    Rng rng(1);
    const Tensor image = random_tensor({16, 16}, rng);
    const Tensor tokens = patchify(image, c);
    CHECK(tokens.shape() == Shape{64, 4});
    // Token 1 is the patch at grid (0, 1): pixels (0,2) (0,3) (1,2) (1,3).
    CHECK(tokens.at(1, 0) == image.at(0, 2));
    CHECK(tokens.at(1, 3) == image.at(1, 3));

    const Tensor back = unpatchify(tokens, c);
    for (std::size_t i = 0; i < image.numel(); ++i) CHECK(back.data()[i] == image.data()[i]);

    const Tensor constant = patchify(Tensor::full({16, 16}, 0.3), c);
    for (std::size_t r = 1; r < 64; ++r)
        for (std::size_t j = 0; j < 4; ++j) CHECK(constant.at(r, j) == constant.at(0, j));

    CHECK_THROWS_AS((void)patchify(Tensor::zeros({8, 8}), c), ConfigError);
    ModelConfig bad = c;
    bad.patch_side = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("timestep embedding") {
    const Tensor e0 = timestep_embedding(0, 64, 200);
    for (std::size_t i = 0; i < 32; ++i) {
        CHECK(e0.data()[i] == 0.0);
        CHECK(e0.data()[32 + i] == 1.0);
    }
    std::vector<Tensor> all;
    for (std::size_t t = 0; t < 200; ++t) {
        all.push_back(timestep_embedding(t, 64, 200));
        for (double v : all.back().data()) CHECK(std::isfinite(v));
    }
    for (std::size_t a = 0; a < all.size(); ++a)
        for (std::size_t b = a + 1; b < all.size(); ++b) CHECK(max_abs_diff(all[a], all[b]) > 1e-6);
    CHECK_THROWS_AS((void)timestep_embedding(200, 64, 200), ArgumentError);
}

TEST_CASE("zero-initialized block is the identity") {
    const ModelConfig c = small_config();
    Rng rng(2);
    const BlockParams block = BlockParams::init(c, rng);
    const Tensor hidden = random_tensor({7, c.hidden_dim}, rng);
    const Tensor cond = random_tensor({1, c.hidden_dim}, rng);
    const Tensor u = block_forward(hidden, cond, block, c.heads);
    for (double v : u.data()) CHECK(v == 0.0);
}

TEST_CASE("block update on two tokens matches a hand trace") {
    ModelConfig c;
    c.hidden_dim = 2;
    c.heads = 1;
    c.mlp_ratio = 1;
    Rng rng(3);
    BlockParams p = BlockParams::init(c, rng);
    const Tensor eye({2, 2}, {1, 0, 0, 1});
    for (Tensor* w : {&p.wq, &p.wk, &p.wv, &p.wo, &p.w1, &p.w2}) {
        std::copy(eye.data().begin(), eye.data().end(), w->mutable_data().begin());
    }
    // Modulation weights stay zero, so shift = 0 and scale = 0 (gain 1).
    const std::vector<std::vector<double>> h{{1.0, 0.0}, {0.0, 2.0}};
    const Tensor hidden({2, 2}, {h[0][0], h[0][1], h[1][0], h[1][1]});
    const Tensor u = block_forward(hidden, Tensor::zeros({1, 2}), p, 1);

    std::vector<std::vector<double>> a{layernorm_row(h[0]), layernorm_row(h[1])};
    std::vector<std::vector<double>> attn(2, std::vector<double>(2, 0.0));
    for (int i = 0; i < 2; ++i) {
        double s[2], total = 0.0;
        for (int j = 0; j < 2; ++j) {
            s[j] = std::exp((a[i][0] * a[j][0] + a[i][1] * a[j][1]) / std::sqrt(2.0));
            total += s[j];
        }
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k) attn[i][k] += s[j] / total * a[j][k];
    }
    for (int i = 0; i < 2; ++i) {
        std::vector<double> h1{h[i][0] + attn[i][0], h[i][1] + attn[i][1]};
        const std::vector<double> m = layernorm_row(h1);
        for (int k = 0; k < 2; ++k) {
            const double expected = attn[i][k] + gelu_ref(m[k]);
            CHECK(u.at(i, k) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("block update is permutation equivariant") {
    const ModelConfig c = small_config();
    Rng rng(4);
    const BlockParams block = test::random_block(c, rng);
    const Tensor hidden = random_tensor({9, c.hidden_dim}, rng);
    const Tensor cond = random_tensor({1, c.hidden_dim}, rng);
    const std::vector<std::size_t> perm{4, 0, 8, 2, 7, 1, 6, 3, 5};
    const Tensor u = block_forward(hidden, cond, block, c.heads);
    const Tensor u_perm = block_forward(gather_rows(hidden, perm), cond, block, c.heads);
    CHECK(max_abs_diff(gather_rows(u, perm), u_perm) < 1e-12);
}

TEST_CASE("grouped block update equals separate per-image updates") {
    const ModelConfig c = small_config();
    Rng rng(5);
    const BlockParams block = test::random_block(c, rng);
    const Tensor h1 = random_tensor({5, c.hidden_dim}, rng), h2 = random_tensor({3, c.hidden_dim}, rng);
    const Tensor c1 = random_tensor({1, c.hidden_dim}, rng), c2 = random_tensor({1, c.hidden_dim}, rng);
    const std::vector<std::size_t> groups{5, 3};
    std::vector<double> hv(h1.data().begin(), h1.data().end());
    hv.insert(hv.end(), h2.data().begin(), h2.data().end());
    std::vector<double> cv(c1.data().begin(), c1.data().end());
    cv.insert(cv.end(), c2.data().begin(), c2.data().end());
    const Tensor u = block_forward(Tensor({8, c.hidden_dim}, hv), Tensor({2, c.hidden_dim}, cv), block,
                                   c.heads, groups);
    const Tensor u1 = block_forward(h1, c1, block, c.heads), u2 = block_forward(h2, c2, block, c.heads);
    std::vector<std::size_t> first{0, 1, 2, 3, 4}, second{5, 6, 7};
    CHECK(max_abs_diff(gather_rows(u, first), u1) < 1e-12);
    CHECK(max_abs_diff(gather_rows(u, second), u2) < 1e-12);
}

TEST_CASE("fresh model predicts zero noise") {
    const ModelConfig c = small_config();
    const DiT model(c, 7);
    Rng rng(6);
    const Tensor x = random_tensor({c.image_side, c.image_side}, rng);
    const Tensor eps = model.forward(x, 17, 1, nullptr);
    CHECK(eps.shape() == Shape{c.image_side, c.image_side});
    for (double v : eps.data()) CHECK(v == 0.0);
}

TEST_CASE("same seed gives identical initialization") {
    const ModelConfig c = small_config();
    const DiT a(c, 11), b(c, 11), other(c, 12);
    const auto pa = a.parameters(), pb = b.parameters(), po = other.parameters();
    REQUIRE(pa.size() == pb.size());
    bool any_difference = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        CHECK(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
        any_difference = any_difference ||
                         !std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), po[i].tensor.data().begin());
    }
    CHECK(any_difference);
}

TEST_CASE("routed forward at the 0% bin equals the dense forward without rescaling") {
    const ModelConfig c = small_config();
    DiT model(c, 8);
    randomize(model, 80);
    Rng rng(9);
    const Tensor x = random_tensor({c.image_side, c.image_side}, rng);
    const RatioTable zero(c.layers, c.regions);
    ForwardOptions options;
    options.rescale = false;
    const Tensor dense = model.forward(x, 120, 2, nullptr);
    const Tensor routed = model.forward(x, 120, 2, &zero, options);
    CHECK(max_abs_diff(dense, routed) == 0.0);

    // With rescaling the router score scales every update, so outputs differ.
    const Tensor rescaled = model.forward(x, 120, 2, &zero);
    CHECK(max_abs_diff(dense, rescaled) > 0.0);
}

TEST_CASE("output shape matches the input for every mode") {
    const ModelConfig c = small_config();
    DiT model(c, 10);
    randomize(model, 100);
    Rng rng(10);
    const Tensor x = random_tensor({c.image_side, c.image_side}, rng);
    RatioTable table(c.layers, c.regions);
    for (std::size_t l = 0; l < c.layers; ++l)
        for (std::size_t g = 0; g < c.regions; ++g) table.set(l, g, 0.1 * static_cast<double>((l + g) % 11));
    const RatioTable snapped = snap_for_inference(table);
    ForwardOptions train;
    train.mode = Mode::train;
    const Shape expected{c.image_side, c.image_side};
    CHECK(model.forward(x, 5, 0, nullptr).shape() == expected);
    CHECK(model.forward(x, 5, 0, &snapped).shape() == expected);
    CHECK(model.forward(x, 5, 0, &table, train).shape() == expected);
    for (double r : {0.0, 0.37, 0.95, 1.0}) {
        RatioTable uniform(c.layers, c.regions);
        for (double& v : uniform.tensor().mutable_data()) v = r;
        CHECK(model.forward(x, 199, c.classes, &uniform, train).shape() == expected);
    }
}

TEST_CASE("forward is deterministic and batching does not change results") {
    const ModelConfig c = small_config();
    DiT model(c, 12);
    randomize(model, 120);
    Rng rng(11);
    std::vector<Tensor> images;
    for (int i = 0; i < 3; ++i) images.push_back(random_tensor({c.image_side, c.image_side}, rng));
    const std::vector<std::size_t> ts{3, 150, 77}, cls{0, 2, c.classes};
    RatioTable table(c.layers, c.regions);
    for (double& v : table.tensor().mutable_data()) v = 0.05 + 0.9 * rng.uniform();
    const RatioTable snapped = snap_for_inference(table);

    const std::vector<const RatioTable*> tables{nullptr, &snapped, &table};
    for (const RatioTable* t : tables) {
        ForwardOptions options;
        options.mode = t == &table ? Mode::train : Mode::infer;
        const Tensor batched = model.forward_tokens(images, ts, cls, t, options);
        const Tensor again = model.forward_tokens(images, ts, cls, t, options);
        CHECK(max_abs_diff(batched, again) == 0.0);
        for (std::size_t b = 0; b < 3; ++b) {
            const Tensor single = model.forward_tokens(std::span(&images[b], 1), std::span(&ts[b], 1),
                                                       std::span(&cls[b], 1), t, options);
            std::vector<std::size_t> rows(c.tokens());
            for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = b * c.tokens() + i;
            CHECK(max_abs_diff(gather_rows(batched, rows), single) < 1e-12);
        }
    }
}
