#pragma once

// Sort-after-reversed-retrieval post-processing over a materialized
// similarity matrix. For every query, its forward top-k candidates earn a
// rank-decay score; each candidate runs a reversed retrieval over all
// queries, adding a decayed reverse score when the query sits inside the
// candidate's top-l, plus a confirmation share of the candidate's reverse
// similarity mass. Offline only; training is untouched.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iostream>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "ebaker/tensor.hpp"

namespace ebaker::rerank {

struct SarConfig {
    double tau = 0.05;   // ranking coefficient
    std::size_t k = 10;  // forward candidate depth
    std::size_t l = 10;  // reverse candidate depth
    double mu1 = 0.5;    // reverse-retrieval weight
    double mu2 = 1.25;   // confirmation weight
    // keep the raw similarity for pairs outside the forward top-k instead of
    // zeroing them (ablation aid)
    bool raw_fallback = false;
};

// e^{-tau (position+1)} for 0-based ranks; strictly decreasing in position.
inline double rank_decay(std::size_t position, double tau) {
    return std::exp(-tau * static_cast<double>(position + 1));
}

// Share of the target's similarity among the reverse candidates considered.
inline double confirmation(const std::vector<double>& reverse_cosines,
                           std::size_t target_index) {
    if (target_index >= reverse_cosines.size())
        throw std::out_of_range("confirmation: target not among candidates");
    double denom = 0.0;
    for (double v : reverse_cosines) denom += v;
    if (denom == 0.0) throw std::domain_error("confirmation: zero similarity mass");
    return reverse_cosines[target_index] / denom;
}

struct RerankedMatrix {
    Tensor fused;   // s_fwd + mu1*s_rev + mu2*s_conf (0 outside forward top-k)
    Tensor s_fwd;   // per-pair components, for audit and late fusion
    Tensor s_rev;
    Tensor s_conf;
};

namespace detail {

// indices sorted by value descending, ties broken by lower index
inline std::vector<std::size_t> rank_order(const double* values, std::size_t n,
                                           std::size_t stride) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return values[a * stride] > values[b * stride];
    });
    return idx;
}

}  // namespace detail

inline RerankedMatrix sar_rerank(const Tensor& sim, const SarConfig& cfg_in) {
    if (sim.rank() != 2) throw std::invalid_argument("sar_rerank: matrix required");
    const std::size_t q_count = sim.rows(), t_count = sim.cols();
    SarConfig cfg = cfg_in;
    if (cfg.k < 1 || cfg.l < 1)
        throw std::invalid_argument("sar_rerank: candidate depths must be >= 1");
    if (cfg.k > t_count) {
        std::cerr << "[rerank] k=" << cfg.k << " exceeds " << t_count
                  << " targets; clamped\n";
        cfg.k = t_count;
    }
    if (cfg.l > q_count) {
        std::cerr << "[rerank] l=" << cfg.l << " exceeds " << q_count
                  << " queries; clamped\n";
        cfg.l = q_count;
    }

    const auto& s = sim.values();

    // reverse retrieval per target: queries ranked by sim[., t]
    std::vector<std::vector<std::size_t>> reverse_top(t_count);
    std::vector<double> reverse_mass(t_count, 0.0);
    for (std::size_t t = 0; t < t_count; ++t) {
        auto order = detail::rank_order(s.data() + t, q_count, t_count);
        order.resize(cfg.l);
        for (std::size_t n = 0; n < order.size(); ++n)
            reverse_mass[t] += s[order[n] * t_count + t];
        reverse_top[t] = std::move(order);
    }

    std::vector<double> fused(q_count * t_count, 0.0);
    std::vector<double> fwd(q_count * t_count, 0.0);
    std::vector<double> rev(q_count * t_count, 0.0);
    std::vector<double> conf(q_count * t_count, 0.0);
    if (cfg.raw_fallback) fused = s;

    for (std::size_t q = 0; q < q_count; ++q) {
        auto order = detail::rank_order(s.data() + q * t_count, t_count, 1);
        for (std::size_t p = 0; p < cfg.k; ++p) {
            std::size_t t = order[p];
            double s_fwd = rank_decay(p, cfg.tau);
            double s_rev = 0.0, s_conf = 0.0;
            const auto& rtop = reverse_top[t];
            auto it = std::find(rtop.begin(), rtop.end(), q);
            if (it != rtop.end()) {
                std::size_t p_rev = static_cast<std::size_t>(it - rtop.begin());
                s_rev = rank_decay(p_rev, cfg.tau);
                if (reverse_mass[t] == 0.0)
                    throw std::domain_error("sar_rerank: zero reverse similarity mass");
                s_conf = s[q * t_count + t] / reverse_mass[t];
            }
            std::size_t at = q * t_count + t;
            fwd[at] = s_fwd;
            rev[at] = s_rev;
            conf[at] = s_conf;
            fused[at] = s_fwd + cfg.mu1 * s_rev + cfg.mu2 * s_conf;
        }
    }

    RerankedMatrix out;
    out.fused = Tensor::from_data({q_count, t_count}, std::move(fused));
    out.s_fwd = Tensor::from_data({q_count, t_count}, std::move(fwd));
    out.s_rev = Tensor::from_data({q_count, t_count}, std::move(rev));
    out.s_conf = Tensor::from_data({q_count, t_count}, std::move(conf));
    return out;
}

// Final fusion of the two reranked channels:
// S = alpha*(g_fwd + mu1*g_rev + mu2*g_conf) + beta*(l_fwd + mu1*l_rev + mu2*l_conf)
inline Tensor fuse(const RerankedMatrix& global_rr, const RerankedMatrix& local_rr,
                   double alpha, double beta, double mu1, double mu2) {
    if (global_rr.s_fwd.shape() != local_rr.s_fwd.shape())
        throw std::invalid_argument("fuse: channel shapes differ");
    const auto& gf = global_rr.s_fwd.values();
    const auto& gr = global_rr.s_rev.values();
    const auto& gc = global_rr.s_conf.values();
    const auto& lf = local_rr.s_fwd.values();
    const auto& lr = local_rr.s_rev.values();
    const auto& lc = local_rr.s_conf.values();
    std::vector<double> out(gf.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = alpha * (gf[i] + mu1 * gr[i] + mu2 * gc[i]) +
                 beta * (lf[i] + mu1 * lr[i] + mu2 * lc[i]);
    return Tensor::from_data(global_rr.s_fwd.shape(), std::move(out));
}

}  // namespace ebaker::rerank
