#pragma once

// Contrastive and masked-prediction losses. InfoNCE sums the image-to-text
// and text-to-image negative log-likelihoods over the batch similarity
// matrix; the eliminated variant drops flagged rows from both directional
// sums (their positive terms vanish, they survive as negatives in other
// rows) while keeping the 1/B normalization. The MLM loss is the per-slot
// mean cross-entropy over masked keyword positions.

#include <algorithm>
#include <cstddef>
#include <iostream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ebaker/alignment.hpp"
#include "ebaker/tensor.hpp"

namespace ebaker::objective {

struct LossConfig {
    double gamma_mlm = 0.5;       // weight of the MLM term
    std::size_t drop_epoch = 4;   // epoch index at which elimination starts
    double init_temperature = 0.07;
};

namespace detail {

inline void require_square(const Tensor& sim) {
    if (sim.rank() != 2 || sim.rows() != sim.cols())
        throw std::invalid_argument("info_nce: similarity matrix must be square");
    if (sim.rows() < 2)
        throw std::invalid_argument("info_nce: batch size must be at least 2");
}

// -(1/B) * sum over selected rows of log softmax(sim*inv_temp)[diagonal],
// in the given orientation.
inline Tensor directional_nll(const Tensor& scaled, const std::vector<std::size_t>& rows,
                              std::size_t batch) {
    Tensor probs = ops::softmax_rows(scaled);
    Tensor diag = ops::diag(probs);  // [B x 1]
    Tensor picked = ops::take_rows(diag, rows);
    return ops::scale(ops::sum_all(ops::log(picked)), -1.0 / static_cast<double>(batch));
}

}  // namespace detail

// Symmetric InfoNCE; inv_temp is 1/gamma as a one-element tensor so the
// temperature can be learned in log space.
inline Tensor info_nce(const Tensor& sim, const Tensor& inv_temp) {
    detail::require_square(sim);
    const std::size_t b = sim.rows();
    Tensor scaled = ops::scale_by(sim, inv_temp);
    std::vector<std::size_t> all(b);
    for (std::size_t i = 0; i < b; ++i) all[i] = i;
    Tensor row_term = detail::directional_nll(scaled, all, b);
    Tensor col_term = detail::directional_nll(ops::transpose(scaled), all, b);
    return ops::add(row_term, col_term);
}

inline Tensor info_nce(const Tensor& sim, double gamma) {
    return info_nce(sim, Tensor::scalar(1.0 / gamma));
}

// Rows with keep == false contribute no positive term to either directional
// sum; denominators still run over the full batch and the loss keeps its 1/B
// prefactor. Returns the loss and R, the number of eliminated rows.
inline std::pair<Tensor, std::size_t> info_nce_eliminated(const Tensor& sim,
                                                          const std::vector<bool>& keep,
                                                          const Tensor& inv_temp) {
    detail::require_square(sim);
    const std::size_t b = sim.rows();
    if (keep.size() != b)
        throw std::invalid_argument("info_nce_eliminated: keep mask length mismatch");
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < b; ++i)
        if (keep[i]) kept.push_back(i);
    if (kept.empty())
        throw std::invalid_argument("info_nce_eliminated: all rows eliminated");
    Tensor scaled = ops::scale_by(sim, inv_temp);
    Tensor row_term = detail::directional_nll(scaled, kept, b);
    Tensor col_term = detail::directional_nll(ops::transpose(scaled), kept, b);
    return {ops::add(row_term, col_term), b - kept.size()};
}

inline std::pair<Tensor, std::size_t> info_nce_eliminated(const Tensor& sim,
                                                          const std::vector<bool>& keep,
                                                          double gamma) {
    return info_nce_eliminated(sim, keep, Tensor::scalar(1.0 / gamma));
}

// Mean cross-entropy over masked slots; zero masked slots contribute zero.
inline Tensor mlm_loss(const Tensor& logits, const std::vector<std::size_t>& targets) {
    if (targets.empty()) return Tensor::scalar(0.0);
    if (logits.rank() != 2 || logits.rows() != targets.size())
        throw std::invalid_argument("mlm_loss: logits/targets mismatch");
    return ops::cross_entropy(logits, targets);
}

struct LossBreakdown {
    double info_global = 0.0;
    double info_local = 0.0;
    double mlm = 0.0;
    double total = 0.0;
    std::size_t r_global = 0;
    std::size_t r_local = 0;
};

struct TotalLossParts {
    Tensor sim_global;              // [B x B]
    Tensor sim_local;               // [B x B]
    Tensor mlm_logits;              // [M x V]; may be undefined when unused
    std::vector<std::size_t> mlm_targets;
};

struct TotalLossResult {
    Tensor total;
    LossBreakdown breakdown;
};

// Before the drop epoch both channels use plain InfoNCE (masks, if supplied,
// are ignored and logged); afterwards flagged rows are eliminated per
// channel. The MLM term is always weighted in with gamma_mlm.
inline TotalLossResult total_loss(const TotalLossParts& parts,
                                  const alignment::BatchEliminationMask* mask,
                                  std::size_t epoch, const LossConfig& cfg,
                                  const Tensor& inv_temp) {
    TotalLossResult out;
    const bool eliminate = epoch >= cfg.drop_epoch && mask != nullptr;
    if (mask != nullptr && epoch < cfg.drop_epoch)
        std::cerr << "[objective] elimination mask supplied before drop epoch "
                  << cfg.drop_epoch << "; ignored\n";

    // A batch whose rows are all flagged contributes an empty sum, i.e. zero,
    // to that channel; the raw op keeps its at-least-one-row precondition.
    auto channel = [&](const Tensor& sim, const std::vector<bool>& keep,
                       std::size_t& r_out) {
        if (std::none_of(keep.begin(), keep.end(), [](bool k) { return k; })) {
            r_out = keep.size();
            return Tensor::scalar(0.0);
        }
        auto [loss, r] = info_nce_eliminated(sim, keep, inv_temp);
        r_out = r;
        return loss;
    };

    Tensor info_g, info_l;
    if (eliminate) {
        info_g = channel(parts.sim_global, mask->keep_global, out.breakdown.r_global);
        info_l = channel(parts.sim_local, mask->keep_local, out.breakdown.r_local);
    } else {
        info_g = info_nce(parts.sim_global, inv_temp);
        info_l = info_nce(parts.sim_local, inv_temp);
    }

    Tensor total = ops::add(info_g, info_l);
    double mlm_value = 0.0;
    if (cfg.gamma_mlm > 0.0) {
        Tensor mlm = parts.mlm_logits.defined()
                         ? mlm_loss(parts.mlm_logits, parts.mlm_targets)
                         : Tensor::scalar(0.0);
        mlm_value = mlm.value();
        total = ops::add(total, ops::scale(mlm, cfg.gamma_mlm));
    }

    out.total = total;
    out.breakdown.info_global = info_g.value();
    out.breakdown.info_local = info_l.value();
    out.breakdown.mlm = mlm_value;
    out.breakdown.total = total.value();
    return out;
}

}  // namespace ebaker::objective
