#pragma once

// Naive routed layer written with scalar loops, counting every
// multiply-accumulate on the token path (router, projections, attention
// products, MLP). The per-image conditioning projection and elementwise
// work are not counted. The computed output doubles as a reference for the
// optimized layer.

#include "dcr/block.hpp"
#include "dcr/routing.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace dcr::test {

struct CountedLayer {
    std::vector<double> output; // N x d, row-major
    std::size_t k = 0;
    std::uint64_t router_macs = 0;
    std::uint64_t attention_macs = 0;
    std::uint64_t mlp_macs = 0;

    std::uint64_t total() const { return router_macs + attention_macs + mlp_macs; }
};

namespace detail_oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const Tensor& t) {
    Matrix m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.data()[i * t.cols() + j];
    return m;
}

inline Matrix product(const Matrix& a, const Matrix& b, std::uint64_t& counter) {
    const std::size_t n = a.size(), inner = b.size(), m = b.empty() ? 0 : b[0].size();
    Matrix out(n, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            for (std::size_t p = 0; p < inner; ++p) {
                out[i][j] += a[i][p] * b[p][j];
                ++counter;
            }
    return out;
}

inline void add_bias(Matrix& m, std::span<const double> bias) {
    for (auto& row : m)
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
}

inline Matrix modulated_norm(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                             const std::vector<double>& shift, const std::vector<double>& scale) {
    Matrix out = x;
    for (auto& row : out) {
        const double d = static_cast<double>(row.size());
        double mean = 0.0, var = 0.0;
        for (double v : row) mean += v / d;
        for (double v : row) var += (v - mean) * (v - mean) / d;
        const double inv = 1.0 / std::sqrt(var + 1e-10);
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] = ((row[j] - mean) * inv * gain[j] + bias[j]) * (1.0 + scale[j]) + shift[j];
        }
    }
    return out;
}

} // namespace detail_oracle

inline CountedLayer counted_routed_layer(const Tensor& hidden, const Tensor& cond, const BlockParams& p,
                                         const RouterParams& router, double bin, std::size_t heads) {
    using namespace detail_oracle;
    const std::size_t n = hidden.rows(), d = hidden.cols(), dh = d / heads;
    CountedLayer out;
    const Matrix h = to_matrix(hidden);

    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
        double z = router.bias.data()[0];
        for (std::size_t j = 0; j < d; ++j) {
            z += h[i][j] * router.weight.data()[j];
            ++out.router_macs;
        }
        scores[i] = 1.0 / (1.0 + std::exp(-z));
    }
    out.k = k_of_ratio(bin, n);
    const auto selected = topk_indices(scores, out.k);
    out.output.assign(hidden.data().begin(), hidden.data().end());
    if (selected.empty()) return out;

    Matrix x;
    for (std::size_t i : selected) x.push_back(h[i]);

    // Conditioning: silu(cond) -> [shift | scale], shared by all tokens.
    std::vector<double> shift(d), scale(d);
    for (std::size_t j = 0; j < 2 * d; ++j) {
        double z = p.ada_b.data()[j];
        for (std::size_t i = 0; i < d; ++i) {
            const double c = cond.data()[i];
            z += c / (1.0 + std::exp(-c)) * p.ada_w.data()[i * 2 * d + j];
        }
        (j < d ? shift[j] : scale[j - d]) = z;
    }

    const Matrix a = modulated_norm(x, p.ln1_gain.data(), p.ln1_bias.data(), shift, scale);
    const Matrix q = product(a, to_matrix(p.wq), out.attention_macs);
    const Matrix kk = product(a, to_matrix(p.wk), out.attention_macs);
    const Matrix v = product(a, to_matrix(p.wv), out.attention_macs);
    const std::size_t k = x.size();
    Matrix mixed(k, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < heads; ++hd) {
        for (std::size_t i = 0; i < k; ++i) {
            std::vector<double> logits(k, 0.0);
            double top = -INFINITY;
            for (std::size_t j = 0; j < k; ++j) {
                for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) {
                    logits[j] += q[i][c] * kk[j][c];
                    ++out.attention_macs;
                }
                logits[j] /= std::sqrt(static_cast<double>(dh));
                top = std::max(top, logits[j]);
            }
            double total = 0.0;
            for (double& l : logits) total += (l = std::exp(l - top));
            for (std::size_t j = 0; j < k; ++j) {
                for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) {
                    mixed[i][c] += logits[j] / total * v[j][c];
                    ++out.attention_macs;
                }
            }
        }
    }
    const Matrix attn = product(mixed, to_matrix(p.wo), out.attention_macs);
    Matrix h1 = x;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < d; ++j) h1[i][j] += attn[i][j];

    const Matrix m = modulated_norm(h1, p.ln2_gain.data(), p.ln2_bias.data(), shift, scale);
    Matrix hid = product(m, to_matrix(p.w1), out.mlp_macs);
    add_bias(hid, p.b1.data());
    for (auto& row : hid)
        for (double& z : row) z = 0.5 * z * (1.0 + std::tanh(0.7978845608028654 * (z + 0.044715 * z * z * z)));
    Matrix mlp = product(hid, to_matrix(p.w2), out.mlp_macs);
    add_bias(mlp, p.b2.data());

    for (std::size_t r = 0; r < k; ++r) {
        const std::size_t i = selected[r];
        for (std::size_t j = 0; j < d; ++j) {
            out.output[i * d + j] = x[r][j] + scores[i] * (attn[r][j] + mlp[r][j]);
        }
    }
    return out;
}

} // namespace dcr::test
