#pragma once

// Retrieval metrics and the evaluation harness. Caption retrieval ranks all
// captions per image query; image retrieval ranks all images per caption
// query. R@k counts queries with at least one correct target in the top k
// (ties broken by lower target index); mR is the mean of the six recalls.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebaker/alignment.hpp"
#include "ebaker/corpus.hpp"
#include "ebaker/model.hpp"
#include "ebaker/rerank.hpp"
#include "ebaker/tensor.hpp"

namespace ebaker::metrics {

using json = nlohmann::json;

inline double recall_at_k(const Tensor& sim,
                          const std::vector<std::vector<std::size_t>>& ground_truth,
                          std::size_t k) {
    if (sim.rank() != 2) throw std::invalid_argument("recall_at_k: matrix required");
    const std::size_t q_count = sim.rows(), t_count = sim.cols();
    if (ground_truth.size() != q_count)
        throw std::invalid_argument("recall_at_k: ground truth size mismatch");
    if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
    const auto& s = sim.values();
    std::size_t hits = 0;
    std::vector<std::size_t> idx(t_count);
    for (std::size_t q = 0; q < q_count; ++q) {
        const auto& truth = ground_truth[q];
        if (truth.empty())
            throw std::invalid_argument("recall_at_k: query " + std::to_string(q) +
                                        " has an empty truth set");
        std::iota(idx.begin(), idx.end(), 0);
        std::size_t depth = std::min(k, t_count);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return s[q * t_count + a] > s[q * t_count + b];
        });
        for (std::size_t p = 0; p < depth; ++p) {
            if (std::find(truth.begin(), truth.end(), idx[p]) != truth.end()) {
                ++hits;
                break;
            }
        }
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(q_count);
}

struct RecallTriple {
    double r1 = 0.0;
    double r5 = 0.0;
    double r10 = 0.0;
};

struct RetrievalReport {
    static constexpr int kSchemaVersion = 1;
    RecallTriple caption_retrieval;  // image query -> captions
    RecallTriple image_retrieval;    // caption query -> images
    double mean_recall = 0.0;
    std::string config_hash;
    std::string checkpoint_id;
    std::uint64_t seed = 0;
    double wall_time_seconds = 0.0;

    json to_json() const {
        return {{"schema_version", kSchemaVersion},
                {"caption_retrieval",
                 {{"r1", caption_retrieval.r1},
                  {"r5", caption_retrieval.r5},
                  {"r10", caption_retrieval.r10}}},
                {"image_retrieval",
                 {{"r1", image_retrieval.r1},
                  {"r5", image_retrieval.r5},
                  {"r10", image_retrieval.r10}}},
                {"mR", mean_recall},
                {"config_hash", config_hash},
                {"checkpoint", checkpoint_id},
                {"seed", seed},
                {"wall_time_seconds", wall_time_seconds}};
    }
};

struct EvalOptions {
    double alpha = 0.6;
    double beta = 0.4;
    std::optional<rerank::SarConfig> sar;
    std::size_t max_seq_len = 32;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string checkpoint_id;
};

namespace detail {

inline Tensor weighted_sum(const Tensor& g, const Tensor& l, double alpha, double beta) {
    if (g.shape() != l.shape()) throw std::invalid_argument("fusion: shapes differ");
    std::vector<double> out(g.numel());
    const auto& gv = g.values();
    const auto& lv = l.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * gv[i] + beta * lv[i];
    return Tensor::from_data(g.shape(), std::move(out));
}

inline Tensor transpose_values(const Tensor& m) {
    const std::size_t r = m.rows(), c = m.cols();
    std::vector<double> out(r * c);
    const auto& v = m.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
    return Tensor::from_data({c, r}, std::move(out));
}

inline Tensor rerank_and_fuse(const Tensor& g, const Tensor& l, const EvalOptions& opts) {
    auto rr_g = rerank::sar_rerank(g, *opts.sar);
    auto rr_l = rerank::sar_rerank(l, *opts.sar);
    return rerank::fuse(rr_g, rr_l, opts.alpha, opts.beta, opts.sar->mu1, opts.sar->mu2);
}

}  // namespace detail

// Encodes the split once, builds both similarity channels, fuses them (plain
// weighting, or SAR per channel followed by the weighted fusion) and scores
// both retrieval directions. The caller decides which weights (live or EMA)
// are loaded in the model.
inline RetrievalReport evaluate(const model::Model& m, const corpus::Vocabulary& vocab,
                                const corpus::Corpus& split, const EvalOptions& opts) {
    if (split.samples.empty()) throw std::invalid_argument("evaluate: empty split");
    auto t0 = std::chrono::steady_clock::now();
    NoGradGuard no_grad;

    std::vector<Tensor> img_globals, vis_locals;
    std::vector<Tensor> txt_globals, txt_locals;
    std::vector<std::vector<std::size_t>> truth_i2t(split.samples.size());
    std::vector<std::vector<std::size_t>> truth_t2i;

    corpus::TokenizeOptions topts{opts.max_seq_len, false};
    for (std::size_t i = 0; i < split.samples.size(); ++i) {
        const auto& sample = split.samples[i];
        auto pack = m.encode_image(sample.features);
        img_globals.push_back(pack.global);
        vis_locals.push_back(pack.locals);
        for (const auto& cap : sample.captions) {
            auto tokens = corpus::tokenize(cap, vocab, topts);
            auto tpack = m.encode_text(tokens);
            truth_i2t[i].push_back(txt_globals.size());
            truth_t2i.push_back({i});
            txt_globals.push_back(tpack.global);
            txt_locals.push_back(tpack.locals);
        }
    }

    Tensor g = alignment::global_similarity(ops::concat_rows(img_globals),
                                            ops::concat_rows(txt_globals));
    Tensor l = alignment::local_similarity_matrix(vis_locals, txt_locals);

    Tensor s_i2t, s_t2i;
    if (opts.sar) {
        s_i2t = detail::rerank_and_fuse(g, l, opts);
        s_t2i = detail::rerank_and_fuse(detail::transpose_values(g),
                                        detail::transpose_values(l), opts);
    } else {
        Tensor fused = detail::weighted_sum(g, l, opts.alpha, opts.beta);
        s_i2t = fused;
        s_t2i = detail::transpose_values(fused);
    }

    RetrievalReport report;
    report.caption_retrieval.r1 = recall_at_k(s_i2t, truth_i2t, 1);
    report.caption_retrieval.r5 = recall_at_k(s_i2t, truth_i2t, 5);
    report.caption_retrieval.r10 = recall_at_k(s_i2t, truth_i2t, 10);
    report.image_retrieval.r1 = recall_at_k(s_t2i, truth_t2i, 1);
    report.image_retrieval.r5 = recall_at_k(s_t2i, truth_t2i, 5);
    report.image_retrieval.r10 = recall_at_k(s_t2i, truth_t2i, 10);
    report.mean_recall =
        (report.caption_retrieval.r1 + report.caption_retrieval.r5 +
         report.caption_retrieval.r10 + report.image_retrieval.r1 +
         report.image_retrieval.r5 + report.image_retrieval.r10) /
        6.0;
    report.config_hash = opts.config_hash;
    report.checkpoint_id = opts.checkpoint_id;
    report.seed = opts.seed;
    report.wall_time_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace ebaker::metrics
