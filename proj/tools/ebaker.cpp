// Command-line surface: synthetic corpus generation, keyword statistics,
// training, evaluation, and offline reranking. Errors leave a
// machine-readable JSON object on stderr; parse errors exit with status 2.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ebaker/corpus.hpp"
#include "ebaker/io.hpp"
#include "ebaker/metrics.hpp"
#include "ebaker/model.hpp"
#include "ebaker/rerank.hpp"
#include "ebaker/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return std::string(std::istreambuf_iterator<char>(is), {});
}

json load_json(const fs::path& path) { return json::parse(slurp(path)); }

// --seed beats EBAKER_SEED beats the fallback
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag,
                           std::uint64_t fallback) {
    if (flag) return *flag;
    if (const char* env = std::getenv("EBAKER_SEED")) {
        char* end = nullptr;
        unsigned long long v = std::strtoull(env, &end, 10);
        if (end && *end == '\0') return static_cast<std::uint64_t>(v);
        throw std::runtime_error("EBAKER_SEED is not an integer: " + std::string(env));
    }
    return fallback;
}

void emit_error(const std::string& command, const std::string& message) {
    json err = {{"error", message}, {"command", command}};
    std::cerr << err.dump() << "\n";
}

int cmd_synth(const fs::path& config_path, const fs::path& out_dir,
              const std::optional<std::uint64_t>& seed_flag) {
    auto cfg = ebaker::corpus::synth_config_from_json(load_json(config_path));
    cfg.seed = resolve_seed(seed_flag, cfg.seed);
    auto sc = ebaker::corpus::generate_synthetic(cfg);
    ebaker::corpus::write_synth_corpus(out_dir, sc);
    json summary = {{"out", out_dir.string()},
                    {"train_size", sc.train.size()},
                    {"test_size", sc.test.size()},
                    {"corrupted", sc.corrupted.size()},
                    {"seed", cfg.seed}};
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_keywords(const fs::path& corpus_dir, std::size_t k, const fs::path& stoplist_path,
                 const fs::path& out_path) {
    auto train = ebaker::corpus::read_split(corpus_dir, "train");
    auto stoplist = stoplist_path.empty() ? ebaker::corpus::default_stoplist()
                                          : ebaker::corpus::load_stoplist(stoplist_path);
    auto list = ebaker::corpus::compute_keywords({train.all_captions()}, k, stoplist);
    ebaker::corpus::save_keywords(out_path, list);
    json summary = {{"out", out_path.string()}, {"keywords", list.size()}};
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_train(const fs::path& config_path, const fs::path& corpus_dir,
              const fs::path& keywords_path, const fs::path& out_dir,
              const std::optional<std::uint64_t>& seed_flag) {
    auto cfg = ebaker::trainer::RunConfig::from_json(load_json(config_path));
    cfg.train.seed = resolve_seed(seed_flag, cfg.train.seed);
    auto train = ebaker::corpus::read_split(corpus_dir, "train");
    auto keywords = ebaker::corpus::load_keywords(keywords_path);
    auto outcome = ebaker::trainer::run_training(cfg, train, keywords, out_dir);
    json summary = {{"out", out_dir.string()},
                    {"epochs", outcome.epochs.size()},
                    {"pairs", train.size()},
                    {"live", outcome.live_checkpoint.string()},
                    {"ema", outcome.ema_checkpoint.string()},
                    {"final_mean_total", outcome.epochs.back().mean_total}};
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& corpus_dir,
             const std::string& split, bool use_sar, std::optional<double> alpha,
             std::optional<double> beta, const ebaker::rerank::SarConfig& sar_cfg,
             fs::path out_path, const std::optional<std::uint64_t>& seed_flag) {
    fs::path run_dir = checkpoint.parent_path();
    auto model_cfg =
        ebaker::model::ModelConfig::from_json(load_json(run_dir / "hparams.json"));
    auto vocab = ebaker::corpus::Vocabulary::load(run_dir / "vocab.txt");

    ebaker::model::Model m;
    m.init(model_cfg, 0);
    m.load(checkpoint);

    ebaker::metrics::EvalOptions opts;
    opts.max_seq_len = model_cfg.max_seq_len;
    if (fs::exists(run_dir / "config.json")) {
        std::string cfg_bytes = slurp(run_dir / "config.json");
        opts.config_hash = ebaker::io::content_hash(cfg_bytes);
        auto run_cfg = ebaker::trainer::RunConfig::from_json(json::parse(cfg_bytes));
        opts.alpha = run_cfg.fusion.alpha;
        opts.beta = run_cfg.fusion.beta;
    }
    if (alpha) opts.alpha = *alpha;
    if (beta) opts.beta = *beta;
    if (use_sar) opts.sar = sar_cfg;
    opts.seed = resolve_seed(seed_flag, 0);
    opts.checkpoint_id = checkpoint.string();

    auto corpus_split = ebaker::corpus::read_split(corpus_dir, split);
    auto report = ebaker::metrics::evaluate(m, vocab, corpus_split, opts);

    std::string payload = report.to_json().dump();
    std::cout << payload << "\n";
    if (out_path.empty()) out_path = run_dir / ("report_" + split + ".json");
    std::ofstream os(out_path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write report to " + out_path.string());
    os << payload << "\n";

    char line[256];
    std::snprintf(line, sizeof line,
                  "i2t R@1/5/10 %.1f/%.1f/%.1f  t2i R@1/5/10 %.1f/%.1f/%.1f  mR %.1f\n",
                  report.caption_retrieval.r1, report.caption_retrieval.r5,
                  report.caption_retrieval.r10, report.image_retrieval.r1,
                  report.image_retrieval.r5, report.image_retrieval.r10,
                  report.mean_recall);
    std::cerr << line;
    return 0;
}

int cmd_rerank(const fs::path& sim_path, const ebaker::rerank::SarConfig& cfg,
               fs::path out_path, fs::path audit_path) {
    auto sim = ebaker::io::read_matrix(sim_path);
    auto rr = ebaker::rerank::sar_rerank(sim, cfg);
    if (out_path.empty()) out_path = sim_path.string() + ".reranked.ebkm";
    ebaker::io::save_matrix(out_path, rr.fused);

    if (audit_path.empty()) audit_path = out_path.string() + ".audit.json";
    json audit;
    audit["tau"] = cfg.tau;
    audit["k"] = cfg.k;
    audit["l"] = cfg.l;
    audit["mu1"] = cfg.mu1;
    audit["mu2"] = cfg.mu2;
    json pairs = json::array();
    for (std::size_t q = 0; q < rr.fused.rows(); ++q)
        for (std::size_t t = 0; t < rr.fused.cols(); ++t) {
            if (rr.s_fwd.at(q, t) == 0.0) continue;  // outside forward top-k
            pairs.push_back({{"query", q},
                             {"target", t},
                             {"s_fwd", rr.s_fwd.at(q, t)},
                             {"s_rev", rr.s_rev.at(q, t)},
                             {"s_conf", rr.s_conf.at(q, t)},
                             {"fused", rr.fused.at(q, t)}});
        }
    audit["pairs"] = pairs;
    std::ofstream os(audit_path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write audit to " + audit_path.string());
    os << audit.dump(2) << "\n";

    json summary = {{"out", out_path.string()}, {"audit", audit_path.string()}};
    std::cout << summary.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"eliminate-before-align cross-modal retrieval toolkit"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed_flag;

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    std::string synth_config, synth_out;
    synth->add_option("--config", synth_config, "synthetic corpus config JSON")->required();
    synth->add_option("--out", synth_out, "output corpus directory")->required();
    synth->add_option("--seed", seed_flag, "override the config seed");

    // keywords
    auto* keywords = app.add_subcommand("keywords", "compute the keyword list");
    std::string kw_corpus, kw_stoplist, kw_out;
    std::size_t kw_k = 512;
    keywords->add_option("--corpus", kw_corpus, "corpus directory")->required();
    keywords->add_option("--k", kw_k, "top-k keywords per corpus");
    keywords->add_option("--stoplist", kw_stoplist, "stoplist file (default built-in)");
    keywords->add_option("--out", kw_out, "output keyword file")->required();

    // train
    auto* train = app.add_subcommand("train", "train the twin-tower model");
    std::string tr_config, tr_corpus, tr_keywords, tr_out;
    train->add_option("--config", tr_config, "run config JSON")->required();
    train->add_option("--corpus", tr_corpus, "corpus directory")->required();
    train->add_option("--keywords", tr_keywords, "keyword list file")->required();
    train->add_option("--out", tr_out, "run output directory")->required();
    train->add_option("--seed", seed_flag, "override the config seed");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate retrieval quality");
    std::string ev_checkpoint, ev_corpus, ev_split = "test", ev_out;
    bool ev_sar = false;
    std::optional<double> ev_alpha, ev_beta;
    ebaker::rerank::SarConfig ev_sar_cfg;
    eval->add_option("--checkpoint", ev_checkpoint, "EBKT1 checkpoint file")->required();
    eval->add_option("--corpus", ev_corpus, "corpus directory")->required();
    eval->add_option("--split", ev_split, "split name (default test)");
    eval->add_flag("--sar", ev_sar, "apply sort-after-reversed-retrieval");
    eval->add_option("--alpha", ev_alpha, "global fusion weight");
    eval->add_option("--beta", ev_beta, "local fusion weight");
    eval->add_option("--tau", ev_sar_cfg.tau, "SAR ranking coefficient");
    eval->add_option("--k", ev_sar_cfg.k, "SAR forward depth");
    eval->add_option("--l", ev_sar_cfg.l, "SAR reverse depth");
    eval->add_option("--mu1", ev_sar_cfg.mu1, "SAR reverse weight");
    eval->add_option("--mu2", ev_sar_cfg.mu2, "SAR confirmation weight");
    eval->add_option("--out", ev_out, "report path (default <run>/report_<split>.json)");
    eval->add_option("--seed", seed_flag, "seed recorded in the report");

    // rerank
    auto* rerank_cmd = app.add_subcommand("rerank", "rerank a similarity matrix offline");
    std::string rr_sim, rr_out, rr_audit;
    ebaker::rerank::SarConfig rr_cfg;
    rerank_cmd->add_option("--sim", rr_sim, "EBKM1 similarity matrix")->required();
    rerank_cmd->add_option("--tau", rr_cfg.tau, "ranking coefficient");
    rerank_cmd->add_option("--k", rr_cfg.k, "forward candidate depth");
    rerank_cmd->add_option("--l", rr_cfg.l, "reverse candidate depth");
    rerank_cmd->add_option("--mu1", rr_cfg.mu1, "reverse-retrieval weight");
    rerank_cmd->add_option("--mu2", rr_cfg.mu2, "confirmation weight");
    rerank_cmd->add_option("--raw-fallback", rr_cfg.raw_fallback,
                           "keep raw similarity outside the top-k");
    rerank_cmd->add_option("--out", rr_out, "fused matrix path");
    rerank_cmd->add_option("--audit", rr_audit, "audit JSON path");
    rerank_cmd->add_option("--seed", seed_flag, "accepted for uniformity; no effect");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << app.help();
        emit_error("parse", e.what());
        return 2;
    }

    std::string command = app.get_subcommands().front()->get_name();
    try {
        if (synth->parsed()) return cmd_synth(synth_config, synth_out, seed_flag);
        if (keywords->parsed()) return cmd_keywords(kw_corpus, kw_k, kw_stoplist, kw_out);
        if (train->parsed())
            return cmd_train(tr_config, tr_corpus, tr_keywords, tr_out, seed_flag);
        if (eval->parsed())
            return cmd_eval(ev_checkpoint, ev_corpus, ev_split, ev_sar, ev_alpha, ev_beta,
                            ev_sar_cfg, ev_out, seed_flag);
        if (rerank_cmd->parsed())
            return cmd_rerank(rr_sim, rr_cfg, rr_out, rr_audit);
        emit_error(command, "no subcommand selected");
        return 2;
    } catch (const std::exception& e) {
        emit_error(command, e.what());
        return 1;
    }
}
