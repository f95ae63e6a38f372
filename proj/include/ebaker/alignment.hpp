#pragma once

// Global/local similarity channels, per-epoch similarity banks, and the
// eliminate-before-align machinery: thresholds derived from the previous
// epoch's banks decide which matched pairs are dropped from the contrastive
// loss in the current one.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebaker/tensor.hpp"

namespace ebaker::alignment {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Frobenius norm as a differentiable scalar; equals the two consecutive
// row/column L2 reductions composed.
inline Tensor frobenius_norm(const Tensor& x) {
    return ops::sqrt(ops::sum_all(ops::multiply(x, x)));
}

// Pairwise cosine matrix of matched global features; diagonal entries are the
// matched-pair scores.
inline Tensor global_similarity(const Tensor& fv_g, const Tensor& ft_g) {
    if (fv_g.rows() != ft_g.rows())
        throw std::invalid_argument("global_similarity: batch sizes differ");
    return ops::cosine_rows(fv_g, ft_g);
}

// Frobenius norm of the local cosine block between one image's patches and
// one caption's tokens.
inline Tensor local_similarity(const Tensor& fv_loc, const Tensor& ft_loc) {
    if (fv_loc.rows() == 0 || ft_loc.rows() == 0)
        throw std::invalid_argument("local_similarity: empty local features");
    return frobenius_norm(ops::cosine_rows(fv_loc, ft_loc));
}

struct SimilarityPair {
    double global = 0.0;
    double local = 0.0;
};

inline double combine(const SimilarityPair& sim, double alpha, double beta) {
    return alpha * sim.global + beta * sim.local;
}

// Fused batch op: entry (i,j) is local_similarity(vis[i], txt[j]). One node
// instead of B^2 subgraphs; the backward recomputes the per-pair cosine
// blocks from cached normalized rows.
inline Tensor local_similarity_matrix(const std::vector<Tensor>& vis_locals,
                                      const std::vector<Tensor>& txt_locals) {
    const std::size_t bv = vis_locals.size(), bt = txt_locals.size();
    if (bv == 0 || bt == 0)
        throw std::invalid_argument("local_similarity_matrix: empty batch");
    const std::size_t d = vis_locals[0].cols();

    struct Side {
        std::vector<double> unit;      // all rows normalized, concatenated
        std::vector<double> norms;
        std::vector<std::size_t> offsets;  // row offset per sample
        std::vector<std::size_t> counts;
    };
    auto prepare = [d](const std::vector<Tensor>& batch, const char* side) {
        Side s;
        std::size_t total = 0;
        for (const auto& t : batch) {
            if (t.rank() != 2 || t.cols() != d || t.rows() == 0)
                throw std::invalid_argument(
                    std::string("local_similarity_matrix: bad locals on ") + side);
            s.offsets.push_back(total);
            s.counts.push_back(t.rows());
            total += t.rows();
        }
        s.unit.resize(total * d);
        s.norms.resize(total);
        std::size_t row = 0;
        for (const auto& t : batch) {
            const auto& v = t.values();
            for (std::size_t a = 0; a < t.rows(); ++a, ++row) {
                double sq = 0.0;
                for (std::size_t j = 0; j < d; ++j) sq += v[a * d + j] * v[a * d + j];
                double nrm = std::sqrt(sq);
                if (nrm == 0.0)
                    throw std::domain_error(
                        std::string("local_similarity_matrix: zero-norm local vector on ") +
                        side);
                s.norms[row] = nrm;
                for (std::size_t j = 0; j < d; ++j) s.unit[row * d + j] = v[a * d + j] / nrm;
            }
        }
        return s;
    };

    Side vs = prepare(vis_locals, "vision");
    Side ts = prepare(txt_locals, "text");

    auto dot = [d](const double* a, const double* b) {
        double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
        std::size_t j = 0;
        for (; j + 4 <= d; j += 4) {
            s0 += a[j] * b[j];
            s1 += a[j + 1] * b[j + 1];
            s2 += a[j + 2] * b[j + 2];
            s3 += a[j + 3] * b[j + 3];
        }
        for (; j < d; ++j) s0 += a[j] * b[j];
        return ((s0 + s1) + (s2 + s3));
    };

    std::vector<double> out(bv * bt);
    for (std::size_t i = 0; i < bv; ++i) {
        const double* vbase = vs.unit.data() + vs.offsets[i] * d;
        for (std::size_t j = 0; j < bt; ++j) {
            const double* tbase = ts.unit.data() + ts.offsets[j] * d;
            double ss = 0.0;
            for (std::size_t a = 0; a < vs.counts[i]; ++a)
                for (std::size_t b = 0; b < ts.counts[j]; ++b) {
                    double p = dot(vbase + a * d, tbase + b * d);
                    ss += p * p;
                }
            out[i * bt + j] = std::sqrt(ss);
        }
    }

    std::vector<Tensor> parents;
    parents.reserve(bv + bt);
    for (const auto& t : vis_locals) parents.push_back(t);
    for (const auto& t : txt_locals) parents.push_back(t);
    std::vector<std::shared_ptr<detail::Node>> vnodes, tnodes;
    for (const auto& t : vis_locals) vnodes.push_back(t.node());
    for (const auto& t : txt_locals) tnodes.push_back(t.node());

    return make_op(
        {bv, bt}, std::move(out), std::move(parents),
        [vnodes, tnodes, vs = std::move(vs), ts = std::move(ts), bv, bt, d,
         dot](detail::Node& nd) {
            // accumulate into unit-vector space first
            std::vector<double> dvu(vs.unit.size(), 0.0);
            std::vector<double> dtu(ts.unit.size(), 0.0);
            for (std::size_t i = 0; i < bv; ++i) {
                const double* vbase = vs.unit.data() + vs.offsets[i] * d;
                for (std::size_t j = 0; j < bt; ++j) {
                    double g = nd.grad[i * bt + j];
                    double sij = nd.data[i * bt + j];
                    if (g == 0.0 || sij == 0.0) continue;
                    double w = g / sij;
                    const double* tbase = ts.unit.data() + ts.offsets[j] * d;
                    double* dv = dvu.data() + vs.offsets[i] * d;
                    double* dt = dtu.data() + ts.offsets[j] * d;
                    for (std::size_t a = 0; a < vs.counts[i]; ++a) {
                        const double* va = vbase + a * d;
                        double* dva = dv + a * d;
                        for (std::size_t b = 0; b < ts.counts[j]; ++b) {
                            const double* tb = tbase + b * d;
                            double coeff = w * dot(va, tb);
                            if (coeff == 0.0) continue;
                            double* dtb = dt + b * d;
                            for (std::size_t c = 0; c < d; ++c) {
                                dva[c] += coeff * tb[c];
                                dtb[c] += coeff * va[c];
                            }
                        }
                    }
                }
            }
            // project through the row normalization into the raw features
            auto scatter = [d](const std::vector<std::shared_ptr<detail::Node>>& nodes,
                               const Side& side, const std::vector<double>& du) {
                for (std::size_t s = 0; s < nodes.size(); ++s) {
                    auto& pn = nodes[s];
                    if (!pn->requires_grad) continue;
                    pn->ensure_grad();
                    for (std::size_t a = 0; a < side.counts[s]; ++a) {
                        std::size_t row = side.offsets[s] + a;
                        const double* u = side.unit.data() + row * d;
                        const double* g = du.data() + row * d;
                        double gu = 0.0;
                        for (std::size_t c = 0; c < d; ++c) gu += g[c] * u[c];
                        double inv = 1.0 / side.norms[row];
                        double* dst = pn->grad.data() + a * d;
                        for (std::size_t c = 0; c < d; ++c)
                            dst[c] += (g[c] - gu * u[c]) * inv;
                    }
                }
            };
            scatter(vnodes, vs, dvu);
            scatter(tnodes, ts, dtu);
        });
}

// ---------------------------------------------------------------------------

enum class BankKind : std::uint8_t { Global = 0, Local = 1, Joint = 2 };

// Per-epoch record of one matched-pair score per training pair. Thresholds
// may only be derived from a completed bank.
class SimilarityBank {
  public:
    SimilarityBank(std::size_t epoch, BankKind kind, std::size_t length)
        : epoch_(epoch), kind_(kind), scores_(length, 0.0), written_(length, 0),
          pending_(length) {}

    void record(std::size_t pair_index, double score) {
        if (pair_index >= scores_.size())
            throw std::out_of_range("SimilarityBank: pair index " +
                                    std::to_string(pair_index) + " out of range");
        if (written_[pair_index])
            throw std::logic_error("SimilarityBank: pair " + std::to_string(pair_index) +
                                   " already recorded this epoch");
        scores_[pair_index] = score;
        written_[pair_index] = 1;
        --pending_;
    }

    bool complete() const { return pending_ == 0; }
    std::size_t size() const { return scores_.size(); }
    std::size_t epoch() const { return epoch_; }
    BankKind kind() const { return kind_; }

    const std::vector<double>& scores() const {
        if (!complete())
            throw std::logic_error("SimilarityBank: consulted while incomplete (" +
                                   std::to_string(pending_) + " pending)");
        return scores_;
    }

  private:
    std::size_t epoch_;
    BankKind kind_;
    std::vector<double> scores_;
    std::vector<char> written_;
    std::size_t pending_;
};

// Sort the completed bank in descending order and return the k-th smallest
// score, k = max(1, floor(drop_ratio * L)); a zero ratio disables elimination
// entirely (threshold -inf). Downstream keeps pairs scoring strictly above
// the threshold.
inline double derive_threshold(const SimilarityBank& bank, double drop_ratio) {
    if (drop_ratio < 0.0 || drop_ratio >= 1.0)
        throw std::invalid_argument("derive_threshold: drop_ratio must be in [0,1)");
    const auto& scores = bank.scores();  // throws if incomplete
    if (drop_ratio == 0.0) return kNegInf;
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    std::size_t L = sorted.size();
    std::size_t k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(drop_ratio * static_cast<double>(L))));
    return sorted[L - k];
}

enum class EbaScheme { None, Joint, Split };

inline const char* scheme_name(EbaScheme s) {
    switch (s) {
        case EbaScheme::None: return "none";
        case EbaScheme::Joint: return "joint";
        case EbaScheme::Split: return "split";
    }
    return "?";
}

inline EbaScheme scheme_from_name(const std::string& s) {
    if (s == "none") return EbaScheme::None;
    if (s == "joint") return EbaScheme::Joint;
    if (s == "split") return EbaScheme::Split;
    throw std::invalid_argument("unknown EBA scheme: " + s);
}

struct Thresholds {
    EbaScheme scheme = EbaScheme::None;
    double global = kNegInf;
    double local = kNegInf;
    double joint = kNegInf;
    double drop_ratio = 0.0;
    long source_epoch = -1;  // -1 before any bank has been consulted
};

struct BatchEliminationMask {
    std::vector<bool> keep_global;
    std::vector<bool> keep_local;

    std::size_t dropped_global() const {
        return keep_global.size() - std::count(keep_global.begin(), keep_global.end(), true);
    }
    std::size_t dropped_local() const {
        return keep_local.size() - std::count(keep_local.begin(), keep_local.end(), true);
    }
};

// Split: each channel compared to its own threshold. Joint: one combined
// alpha*g + beta*l score against the joint threshold, one flag for both loss
// paths. Keeping requires strictly exceeding the threshold.
inline BatchEliminationMask eliminate(const std::vector<double>& batch_scores_g,
                                      const std::vector<double>& batch_scores_l,
                                      const Thresholds& th, EbaScheme scheme,
                                      double alpha = 0.6, double beta = 0.4) {
    if (batch_scores_g.size() != batch_scores_l.size())
        throw std::invalid_argument("eliminate: score vectors differ in length");
    if (scheme == EbaScheme::None)
        throw std::invalid_argument("eliminate: no scheme selected");
    if (th.scheme != scheme)
        throw std::invalid_argument(std::string("eliminate: ") + scheme_name(scheme) +
                                    " mask requested with " + scheme_name(th.scheme) +
                                    " thresholds");
    const std::size_t b = batch_scores_g.size();
    BatchEliminationMask mask;
    mask.keep_global.resize(b);
    mask.keep_local.resize(b);
    if (scheme == EbaScheme::Split) {
        for (std::size_t i = 0; i < b; ++i) {
            mask.keep_global[i] = batch_scores_g[i] > th.global;
            mask.keep_local[i] = batch_scores_l[i] > th.local;
        }
    } else {
        for (std::size_t i = 0; i < b; ++i) {
            bool keep = alpha * batch_scores_g[i] + beta * batch_scores_l[i] > th.joint;
            mask.keep_global[i] = keep;
            mask.keep_local[i] = keep;
        }
    }
    return mask;
}

}  // namespace ebaker::alignment
