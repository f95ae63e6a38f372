#pragma once

// Independent brute-force reference implementations. Plain loops over plain
// vectors, no shortcuts, no shared code with the library internals they
// check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

namespace testsupport::naive {

struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;

    double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
    static Mat make(std::size_t r, std::size_t c) { return {r, c, std::vector<double>(r * c, 0.0)}; }
};

// Symmetric InfoNCE by direct exp/log arithmetic.
inline double info_nce(const Mat& sim, double gamma) {
    const std::size_t b = sim.rows;
    double total = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
        double row_den = 0.0, col_den = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            row_den += std::exp(sim.at(j, i) / gamma);
            col_den += std::exp(sim.at(i, j) / gamma);
        }
        double pos = std::exp(sim.at(j, j) / gamma);
        total += -std::log(pos / row_den) - std::log(pos / col_den);
    }
    return total / static_cast<double>(b);
}

// Eliminated InfoNCE: kept rows only in both directional sums, denominators
// over the full batch, 1/B normalization.
inline double info_nce_eliminated(const Mat& sim, const std::vector<bool>& keep,
                                  double gamma) {
    const std::size_t b = sim.rows;
    double total = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
        if (!keep[j]) continue;
        double row_den = 0.0, col_den = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            row_den += std::exp(sim.at(j, i) / gamma);
            col_den += std::exp(sim.at(i, j) / gamma);
        }
        double pos = std::exp(sim.at(j, j) / gamma);
        total += -std::log(pos / row_den) - std::log(pos / col_den);
    }
    return total / static_cast<double>(b);
}

// Frobenius norm of the pairwise cosine block, by double loop.
inline double local_similarity(const std::vector<std::vector<double>>& a,
                               const std::vector<std::vector<double>>& b) {
    double ss = 0.0;
    for (const auto& x : a)
        for (const auto& y : b) {
            double dot = 0.0, nx = 0.0, ny = 0.0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                dot += x[i] * y[i];
                nx += x[i] * x[i];
                ny += y[i] * y[i];
            }
            double c = dot / (std::sqrt(nx) * std::sqrt(ny));
            ss += c * c;
        }
    return std::sqrt(ss);
}

// Sort-and-scan recall.
inline double recall_at_k(const Mat& sim, const std::vector<std::vector<std::size_t>>& truth,
                          std::size_t k) {
    std::size_t hits = 0;
    for (std::size_t q = 0; q < sim.rows; ++q) {
        std::vector<std::pair<double, std::size_t>> scored;
        for (std::size_t t = 0; t < sim.cols; ++t) scored.push_back({sim.at(q, t), t});
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        bool hit = false;
        for (std::size_t p = 0; p < std::min(k, scored.size()) && !hit; ++p)
            for (std::size_t g : truth[q])
                if (scored[p].second == g) {
                    hit = true;
                    break;
                }
        hits += hit ? 1 : 0;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(sim.rows);
}

struct SarParams {
    double tau = 0.05;
    std::size_t k = 10, l = 10;
    double mu1 = 0.5, mu2 = 1.25;
};

// SAR from scratch: every ranking recomputed, nothing reused.
inline Mat sar(const Mat& sim, SarParams p) {
    const std::size_t q_count = sim.rows, t_count = sim.cols;
    p.k = std::min(p.k, t_count);
    p.l = std::min(p.l, q_count);
    Mat out = Mat::make(q_count, t_count);
    for (std::size_t q = 0; q < q_count; ++q) {
        // forward ranking of targets for this query
        std::vector<std::size_t> forward(t_count);
        std::iota(forward.begin(), forward.end(), 0);
        std::stable_sort(forward.begin(), forward.end(), [&](std::size_t a, std::size_t b) {
            return sim.at(q, a) > sim.at(q, b);
        });
        for (std::size_t rank = 0; rank < p.k; ++rank) {
            std::size_t t = forward[rank];
            double s_fwd = std::exp(-p.tau * static_cast<double>(rank + 1));
            // reverse ranking of queries for this target
            std::vector<std::size_t> reverse(q_count);
            std::iota(reverse.begin(), reverse.end(), 0);
            std::stable_sort(reverse.begin(), reverse.end(),
                             [&](std::size_t a, std::size_t b) {
                                 return sim.at(a, t) > sim.at(b, t);
                             });
            double s_rev = 0.0, s_conf = 0.0;
            for (std::size_t rr = 0; rr < p.l; ++rr) {
                if (reverse[rr] == q) {
                    s_rev = std::exp(-p.tau * static_cast<double>(rr + 1));
                    double mass = 0.0;
                    for (std::size_t n = 0; n < p.l; ++n) mass += sim.at(reverse[n], t);
                    s_conf = sim.at(q, t) / mass;
                    break;
                }
            }
            out.at(q, t) = s_fwd + p.mu1 * s_rev + p.mu2 * s_conf;
        }
    }
    return out;
}

}  // namespace testsupport::naive
