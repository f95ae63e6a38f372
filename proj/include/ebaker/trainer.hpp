#pragma once

// Optimization loop: AdamW with bias correction, linear warmup + cosine decay,
// global-norm gradient clipping, EMA shadow weights, per-epoch similarity
// banks feeding the eliminate-before-align thresholds, and deterministic
// seeded shuffling. Checkpoints (live + EMA), banks, and line-delimited JSON
// logs land in the run directory.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebaker/alignment.hpp"
#include "ebaker/corpus.hpp"
#include "ebaker/io.hpp"
#include "ebaker/model.hpp"
#include "ebaker/objective.hpp"
#include "ebaker/tensor.hpp"

namespace ebaker::trainer {

using json = nlohmann::json;

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 100;
    double lr = 1.5e-5;
    double weight_decay = 0.7;
    std::size_t warmup_iters = 200;
    double max_grad_norm = 50.0;
    double ema_decay = 0.99;
    std::uint64_t seed = 0;

    json to_json() const {
        return {{"epochs", epochs},          {"batch_size", batch_size},
                {"lr", lr},                  {"weight_decay", weight_decay},
                {"warmup_iters", warmup_iters}, {"max_grad_norm", max_grad_norm},
                {"ema_decay", ema_decay},    {"seed", seed}};
    }
    static TrainConfig from_json(const json& j) {
        TrainConfig c;
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr = j.value("lr", c.lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.warmup_iters = j.value("warmup_iters", c.warmup_iters);
        c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
        c.ema_decay = j.value("ema_decay", c.ema_decay);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

struct Schedule {
    double base_lr = 1.5e-5;
    std::size_t warmup = 200;
    std::size_t total = 1000;
};

// Linear ramp to the peak over `warmup` iterations, then cosine decay to zero
// over the rest; continuous at the boundary.
inline double lr_at(std::size_t iter, const Schedule& s) {
    if (iter < s.warmup)
        return s.base_lr * static_cast<double>(iter + 1) / static_cast<double>(s.warmup);
    std::size_t span = s.total > s.warmup ? s.total - s.warmup : 1;
    double progress = static_cast<double>(iter - s.warmup) / static_cast<double>(span);
    if (progress > 1.0) progress = 1.0;
    return s.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// Scales all gradients by max_norm/norm when the global norm exceeds
// max_norm; returns the pre-clip norm. Parameters without gradients count as
// zero.
inline double clip_gradients(ParameterStore& params, double max_norm) {
    double sq = 0.0;
    for (const auto& t : params.tensors())
        if (t.has_grad())
            for (double g : t.grad()) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double factor = max_norm / norm;
        for (auto& t : params.tensors())
            if (t.has_grad())
                for (double& g : t.mutable_grad()) g *= factor;
    }
    return norm;
}

// Adam with decoupled weight decay and bias correction.
class AdamW {
  public:
    explicit AdamW(const ParameterStore& params, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& t : params.tensors()) {
            m_.emplace_back(t.numel(), 0.0);
            v_.emplace_back(t.numel(), 0.0);
        }
    }

    void step(ParameterStore& params, double lr, double weight_decay) {
        if (m_.size() != params.size()) throw std::logic_error("AdamW: store changed size");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = params.tensors()[i];
            auto& pv = p.mutable_values();
            const double* g = p.has_grad() ? p.grad().data() : nullptr;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < pv.size(); ++j) {
                double gj = g ? g[j] : 0.0;
                if (!std::isfinite(gj))
                    throw std::runtime_error("AdamW: non-finite gradient in " +
                                             params.names()[i]);
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
                double mhat = m[j] / bc1;
                double vhat = v[j] / bc2;
                pv[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * pv[j]);
            }
        }
    }

    std::size_t steps() const { return t_; }

  private:
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// Shadow copy of every trainable parameter: shadow <- d*shadow + (1-d)*param.
class EmaState {
  public:
    EmaState(const ParameterStore& params, double decay) : decay_(decay) {
        if (decay < 0.0 || decay >= 1.0)
            throw std::invalid_argument("EmaState: decay must be in [0,1)");
        for (const auto& t : params.tensors()) shadow_.push_back(t.values());
    }

    void update(const ParameterStore& params) {
        if (shadow_.size() != params.size())
            throw std::invalid_argument("EmaState: parameter count changed");
        for (std::size_t i = 0; i < shadow_.size(); ++i) {
            const auto& pv = params.tensors()[i].values();
            auto& s = shadow_[i];
            if (s.size() != pv.size())
                throw std::invalid_argument("EmaState: shape mismatch for " +
                                            params.names()[i]);
            for (std::size_t j = 0; j < s.size(); ++j)
                s[j] = decay_ * s[j] + (1.0 - decay_) * pv[j];
        }
    }

    void write_to(ParameterStore& params) const {
        if (shadow_.size() != params.size())
            throw std::invalid_argument("EmaState: parameter count mismatch");
        for (std::size_t i = 0; i < shadow_.size(); ++i) {
            auto& pv = params.tensors()[i].mutable_values();
            if (pv.size() != shadow_[i].size())
                throw std::invalid_argument("EmaState: shape mismatch for " +
                                            params.names()[i]);
            pv = shadow_[i];
        }
    }

    void save(const ParameterStore& ref, const std::filesystem::path& path) const {
        ParameterStore clone;
        for (std::size_t i = 0; i < ref.size(); ++i)
            clone.add(ref.names()[i],
                      Tensor::from_data(ref.tensors()[i].shape(), shadow_[i]));
        io::save_tensors(clone, path);
    }

    double decay() const { return decay_; }
    const std::vector<std::vector<double>>& shadow() const { return shadow_; }

  private:
    double decay_;
    std::vector<std::vector<double>> shadow_;
};

// ---------------------------------------------------------------------------

struct EbaConfig {
    alignment::EbaScheme scheme = alignment::EbaScheme::Split;
    double drop_ratio = 0.01;

    json to_json() const {
        return {{"scheme", alignment::scheme_name(scheme)}, {"drop_ratio", drop_ratio}};
    }
    static EbaConfig from_json(const json& j) {
        EbaConfig c;
        if (j.contains("scheme")) c.scheme = alignment::scheme_from_name(j["scheme"]);
        c.drop_ratio = j.value("drop_ratio", c.drop_ratio);
        return c;
    }
};

struct FusionConfig {
    double alpha = 0.6;
    double beta = 0.4;

    json to_json() const { return {{"alpha", alpha}, {"beta", beta}}; }
    static FusionConfig from_json(const json& j) {
        FusionConfig c;
        c.alpha = j.value("alpha", c.alpha);
        c.beta = j.value("beta", c.beta);
        return c;
    }
};

struct RunConfig {
    TrainConfig train;
    objective::LossConfig loss;
    EbaConfig eba;
    FusionConfig fusion;
    model::ModelConfig model;
    std::size_t max_seq_len = 32;

    json to_json() const {
        return {{"train", train.to_json()},
                {"loss",
                 {{"gamma_mlm", loss.gamma_mlm},
                  {"drop_epoch", loss.drop_epoch},
                  {"init_temperature", loss.init_temperature}}},
                {"eba", eba.to_json()},
                {"fusion", fusion.to_json()},
                {"model", model.to_json()},
                {"tokenizer", {{"max_len", max_seq_len}}}};
    }

    static RunConfig from_json(const json& j) {
        RunConfig c;
        if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
        if (j.contains("loss")) {
            const auto& l = j["loss"];
            c.loss.gamma_mlm = l.value("gamma_mlm", c.loss.gamma_mlm);
            c.loss.drop_epoch = l.value("drop_epoch", c.loss.drop_epoch);
            c.loss.init_temperature = l.value("init_temperature", c.loss.init_temperature);
        }
        if (j.contains("eba")) c.eba = EbaConfig::from_json(j["eba"]);
        if (j.contains("fusion")) c.fusion = FusionConfig::from_json(j["fusion"]);
        if (j.contains("model")) c.model = model::ModelConfig::from_json(j["model"]);
        if (j.contains("tokenizer"))
            c.max_seq_len = j["tokenizer"].value("max_len", c.max_seq_len);
        return c;
    }
};

struct EpochReport {
    std::size_t epoch = 0;
    std::size_t steps = 0;
    double mean_info_g = 0.0;
    double mean_info_l = 0.0;
    double mean_mlm = 0.0;
    double mean_total = 0.0;
    std::size_t r_global = 0;  // eliminated row count summed over batches
    std::size_t r_local = 0;
    std::vector<std::size_t> eliminated_pairs;  // dataset pair indices (union)
    alignment::Thresholds thresholds_used;
};

struct TrainOutcome {
    std::vector<EpochReport> epochs;
    std::filesystem::path live_checkpoint;
    std::filesystem::path ema_checkpoint;
    model::ModelConfig model_config;
};

// One training pair: a sample and one of its captions.
struct Pair {
    std::size_t sample = 0;
    std::size_t caption = 0;
    std::vector<std::size_t> tokens;
    corpus::MaskedSequence masked;
};

class Trainer {
  public:
    Trainer(const RunConfig& cfg, const corpus::Corpus& train_corpus,
            const corpus::KeywordList& keywords, std::filesystem::path out_dir)
        : cfg_(cfg), corpus_(train_corpus), out_dir_(std::move(out_dir)) {
        namespace fs = std::filesystem;
        fs::create_directories(out_dir_);
        fs::create_directories(out_dir_ / "banks");

        vocab_ = corpus::Vocabulary::build(corpus_.all_captions());
        vocab_.save(out_dir_ / "vocab.txt");

        cfg_.model.vocab_size = vocab_.size();
        cfg_.model.max_seq_len = cfg_.max_seq_len;
        if (!corpus_.samples.empty()) {
            cfg_.model.n_patches = corpus_.samples[0].features.rows();
            cfg_.model.d_in = corpus_.samples[0].features.cols();
        }
        model_.init(cfg_.model, cfg_.train.seed);
        model_.save_hparams(out_dir_ / "hparams.json");
        {
            std::ofstream os(out_dir_ / "config.json", std::ios::trunc);
            os << cfg_.to_json().dump(2) << "\n";
        }

        corpus::TokenizeOptions topts{cfg_.max_seq_len, false};
        for (std::size_t s = 0; s < corpus_.samples.size(); ++s)
            for (std::size_t c = 0; c < corpus_.samples[s].captions.size(); ++c) {
                Pair p;
                p.sample = s;
                p.caption = c;
                p.tokens = corpus::tokenize(corpus_.samples[s].captions[c], vocab_, topts);
                p.masked = corpus::mask_keywords(p.tokens, keywords, vocab_);
                pairs_.push_back(std::move(p));
            }
        if (pairs_.size() < 2)
            throw std::invalid_argument("Trainer: need at least two training pairs");

        schedule_.base_lr = cfg_.train.lr;
        schedule_.warmup = cfg_.train.warmup_iters;
        std::size_t steps_per_epoch =
            (pairs_.size() + cfg_.train.batch_size - 1) / cfg_.train.batch_size;
        schedule_.total = std::max<std::size_t>(1, steps_per_epoch * cfg_.train.epochs);

        optimizer_.emplace(model_.params());
        ema_.emplace(model_.params(), cfg_.train.ema_decay);
        prev_thresholds_.scheme = cfg_.eba.scheme;
        prev_thresholds_.drop_ratio = cfg_.eba.drop_ratio;

        log_.open(out_dir_ / "train_log.jsonl", std::ios::trunc);
        epoch_log_.open(out_dir_ / "epochs.jsonl", std::ios::trunc);
        if (!log_ || !epoch_log_)
            throw std::runtime_error("Trainer: cannot open log files in " +
                                     out_dir_.string());
    }

    const corpus::Vocabulary& vocabulary() const { return vocab_; }
    model::Model& live_model() { return model_; }
    const EmaState& ema() const { return *ema_; }
    std::size_t pair_count() const { return pairs_.size(); }
    const alignment::Thresholds& current_thresholds() const { return prev_thresholds_; }

    // Shuffled batches; encode, record banks, eliminate (from the previous
    // epoch's thresholds), loss, backward, clip, step, EMA. Thresholds for
    // the next epoch are derived at the end, and both weight sets are
    // checkpointed.
    EpochReport run_epoch(std::size_t epoch) {
        const std::size_t L = pairs_.size();
        alignment::SimilarityBank bank_g(epoch, alignment::BankKind::Global, L);
        alignment::SimilarityBank bank_l(epoch, alignment::BankKind::Local, L);
        alignment::SimilarityBank bank_j(epoch, alignment::BankKind::Joint, L);

        std::vector<std::size_t> perm(L);
        std::iota(perm.begin(), perm.end(), 0);
        Rng shuffle_rng = make_stream(cfg_.train.seed, 1000 + epoch);
        std::shuffle(perm.begin(), perm.end(), shuffle_rng.engine());

        std::vector<std::vector<std::size_t>> batches;
        for (std::size_t start = 0; start < L; start += cfg_.train.batch_size) {
            std::size_t end = std::min(L, start + cfg_.train.batch_size);
            batches.emplace_back(perm.begin() + start, perm.begin() + end);
        }
        // a trailing single-pair batch cannot form a contrastive pair
        if (batches.size() >= 2 && batches.back().size() < 2) {
            auto tail = batches.back();
            batches.pop_back();
            batches.back().insert(batches.back().end(), tail.begin(), tail.end());
        }

        const bool eliminate_now =
            epoch >= cfg_.loss.drop_epoch && cfg_.eba.scheme != alignment::EbaScheme::None;

        EpochReport report;
        report.epoch = epoch;
        report.thresholds_used = prev_thresholds_;
        std::vector<bool> eliminated_flag(L, false);

        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const auto& batch = batches[bi];
            const std::size_t b = batch.size();

            std::vector<Tensor> img_globals, txt_globals, vis_locals, txt_locals;
            std::vector<model::FeaturePack> vis_packs(b);
            img_globals.reserve(b);
            txt_globals.reserve(b);
            for (std::size_t i = 0; i < b; ++i) {
                const Pair& p = pairs_[batch[i]];
                vis_packs[i] = model_.encode_image(corpus_.samples[p.sample].features);
                auto txt = model_.encode_text(p.tokens);
                img_globals.push_back(vis_packs[i].global);
                txt_globals.push_back(txt.global);
                vis_locals.push_back(vis_packs[i].locals);
                txt_locals.push_back(txt.locals);
            }

            objective::TotalLossParts parts;
            parts.sim_global = alignment::global_similarity(
                ops::concat_rows(img_globals), ops::concat_rows(txt_globals));
            parts.sim_local = alignment::local_similarity_matrix(vis_locals, txt_locals);

            std::vector<double> diag_g(b), diag_l(b);
            for (std::size_t i = 0; i < b; ++i) {
                diag_g[i] = parts.sim_global.at(i, i);
                diag_l[i] = parts.sim_local.at(i, i);
                bank_g.record(batch[i], diag_g[i]);
                bank_l.record(batch[i], diag_l[i]);
                bank_j.record(batch[i], cfg_.fusion.alpha * diag_g[i] +
                                             cfg_.fusion.beta * diag_l[i]);
            }

            std::optional<alignment::BatchEliminationMask> mask;
            if (eliminate_now) {
                mask = alignment::eliminate(diag_g, diag_l, prev_thresholds_,
                                            cfg_.eba.scheme, cfg_.fusion.alpha,
                                            cfg_.fusion.beta);
                for (std::size_t i = 0; i < b; ++i)
                    if (!mask->keep_global[i] || !mask->keep_local[i])
                        eliminated_flag[batch[i]] = true;
            }

            if (cfg_.loss.gamma_mlm > 0.0) {
                std::vector<Tensor> logit_parts;
                std::vector<std::size_t> targets;
                for (std::size_t i = 0; i < b; ++i) {
                    const Pair& p = pairs_[batch[i]];
                    if (p.masked.masked_positions.empty()) continue;
                    auto masked_txt = model_.encode_text(p.masked.tokens);
                    Tensor vis_feats =
                        ops::concat_rows({vis_packs[i].global, vis_packs[i].locals});
                    logit_parts.push_back(model_.ker().forward(
                        masked_txt.locals, vis_feats, p.masked.masked_positions));
                    targets.insert(targets.end(), p.masked.masked_targets.begin(),
                                   p.masked.masked_targets.end());
                }
                if (!logit_parts.empty()) {
                    parts.mlm_logits = logit_parts.size() == 1 ? logit_parts[0]
                                                               : ops::concat_rows(logit_parts);
                    parts.mlm_targets = std::move(targets);
                }
            }

            auto result = objective::total_loss(parts, mask ? &*mask : nullptr, epoch,
                                                cfg_.loss, model_.inv_temperature());
            check_finite(result.total, "total loss");

            model_.params().zero_grad();
            backward(result.total);
            clip_gradients(model_.params(), cfg_.train.max_grad_norm);
            for (std::size_t i = 0; i < model_.params().size(); ++i)
                check_finite(model_.params().tensors()[i],
                             "post-clip gradient of " + model_.params().names()[i]);

            double lr = lr_at(iter_, schedule_);
            optimizer_->step(model_.params(), lr, cfg_.train.weight_decay);
            clamp_temperature();
            ema_->update(model_.params());
            ++iter_;

            json line = {{"epoch", epoch},
                         {"step", bi},
                         {"info_g", result.breakdown.info_global},
                         {"info_l", result.breakdown.info_local},
                         {"mlm", result.breakdown.mlm},
                         {"total", result.breakdown.total},
                         {"R_g", result.breakdown.r_global},
                         {"R_l", result.breakdown.r_local}};
            log_ << line.dump() << "\n";

            report.steps += 1;
            report.mean_info_g += result.breakdown.info_global;
            report.mean_info_l += result.breakdown.info_local;
            report.mean_mlm += result.breakdown.mlm;
            report.mean_total += result.breakdown.total;
            report.r_global += result.breakdown.r_global;
            report.r_local += result.breakdown.r_local;
        }

        if (!bank_g.complete() || !bank_l.complete() || !bank_j.complete())
            throw std::logic_error("run_epoch: banks incomplete at epoch end");

        report.mean_info_g /= static_cast<double>(report.steps);
        report.mean_info_l /= static_cast<double>(report.steps);
        report.mean_mlm /= static_cast<double>(report.steps);
        report.mean_total /= static_cast<double>(report.steps);
        for (std::size_t i = 0; i < L; ++i)
            if (eliminated_flag[i]) report.eliminated_pairs.push_back(i);

        dump_bank(bank_g, "global");
        dump_bank(bank_l, "local");
        dump_bank(bank_j, "joint");

        // thresholds for the next epoch, from this epoch's completed banks
        alignment::Thresholds next;
        next.scheme = cfg_.eba.scheme;
        next.drop_ratio = cfg_.eba.drop_ratio;
        next.source_epoch = static_cast<long>(epoch);
        if (cfg_.eba.scheme == alignment::EbaScheme::Split) {
            next.global = alignment::derive_threshold(bank_g, cfg_.eba.drop_ratio);
            next.local = alignment::derive_threshold(bank_l, cfg_.eba.drop_ratio);
        } else if (cfg_.eba.scheme == alignment::EbaScheme::Joint) {
            next.joint = alignment::derive_threshold(bank_j, cfg_.eba.drop_ratio);
        }
        prev_thresholds_ = next;

        model_.save(out_dir_ / "live.ebkt");
        ema_->save(model_.params(), out_dir_ / "ema.ebkt");

        write_epoch_record(report);
        return report;
    }

    TrainOutcome run_all() {
        TrainOutcome out;
        for (std::size_t e = 0; e < cfg_.train.epochs; ++e)
            out.epochs.push_back(run_epoch(e));
        out.live_checkpoint = out_dir_ / "live.ebkt";
        out.ema_checkpoint = out_dir_ / "ema.ebkt";
        out.model_config = cfg_.model;
        log_.flush();
        epoch_log_.flush();
        return out;
    }

  private:
    void clamp_temperature() {
        // CLIP-style cap: 1/gamma may not exceed 100
        Tensor t = model_.params().get("temp.log_inv");
        double cap = std::log(100.0);
        auto& v = t.mutable_values();
        if (v[0] > cap) v[0] = cap;
    }

    void dump_bank(const alignment::SimilarityBank& bank, const std::string& kind) {
        char name[64];
        std::snprintf(name, sizeof name, "epoch_%03zu_%s.ebkb", bank.epoch(), kind.c_str());
        io::save_bank(out_dir_ / "banks" / name, bank.epoch(),
                      static_cast<std::uint8_t>(bank.kind()), bank.scores());
    }

    void write_epoch_record(const EpochReport& r) {
        auto finite_or_null = [](double v) {
            return std::isfinite(v) ? json(v) : json(nullptr);
        };
        json rec = {{"epoch", r.epoch},
                    {"steps", r.steps},
                    {"mean_info_g", r.mean_info_g},
                    {"mean_info_l", r.mean_info_l},
                    {"mean_mlm", r.mean_mlm},
                    {"mean_total", r.mean_total},
                    {"R_g", r.r_global},
                    {"R_l", r.r_local},
                    {"eliminated", r.eliminated_pairs},
                    {"thresholds",
                     {{"scheme", alignment::scheme_name(r.thresholds_used.scheme)},
                      {"global", finite_or_null(r.thresholds_used.global)},
                      {"local", finite_or_null(r.thresholds_used.local)},
                      {"joint", finite_or_null(r.thresholds_used.joint)},
                      {"source_epoch", r.thresholds_used.source_epoch}}}};
        epoch_log_ << rec.dump() << "\n";
    }

    RunConfig cfg_;
    corpus::Corpus corpus_;
    std::filesystem::path out_dir_;
    corpus::Vocabulary vocab_;
    model::Model model_;
    std::vector<Pair> pairs_;
    Schedule schedule_;
    std::optional<AdamW> optimizer_;
    std::optional<EmaState> ema_;
    alignment::Thresholds prev_thresholds_;
    std::size_t iter_ = 0;
    std::ofstream log_;
    std::ofstream epoch_log_;
};

inline TrainOutcome run_training(const RunConfig& cfg, const corpus::Corpus& train_corpus,
                                 const corpus::KeywordList& keywords,
                                 const std::filesystem::path& out_dir) {
    Trainer t(cfg, train_corpus, keywords, out_dir);
    return t.run_all();
}

}  // namespace ebaker::trainer
