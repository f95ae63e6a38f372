#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "ebaker/trainer.hpp"
#include "support/tmpdir.hpp"

using namespace ebaker;
using namespace ebaker::trainer;

namespace {

corpus::SynthCorpus tiny_corpus(std::uint64_t seed = 3, double corruption = 0.0) {
    corpus::SynthConfig cfg;
    cfg.classes = 3;
    cfg.train_per_class = 6;
    cfg.test_per_class = 2;
    cfg.patches = 4;
    cfg.feature_dim = 6;
    cfg.corruption = corruption;
    cfg.seed = seed;
    return corpus::generate_synthetic(cfg);
}

RunConfig tiny_run_config(std::uint64_t seed = 1) {
    RunConfig cfg;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 6;
    cfg.train.lr = 1e-3;
    cfg.train.weight_decay = 0.01;
    cfg.train.warmup_iters = 2;
    cfg.train.max_grad_norm = 50.0;
    cfg.train.ema_decay = 0.9;
    cfg.train.seed = seed;
    cfg.loss.drop_epoch = 1;
    cfg.loss.gamma_mlm = 0.5;
    cfg.eba.scheme = alignment::EbaScheme::Split;
    cfg.eba.drop_ratio = 0.1;
    cfg.model.d_model = 16;
    cfg.model.d_out = 8;
    cfg.model.n_layers = 1;
    cfg.model.n_heads = 2;
    cfg.model.ker_layers = 1;
    return cfg;
}

corpus::KeywordList keywords_for(const corpus::Corpus& c, std::size_t k = 20) {
    return corpus::compute_keywords({c.all_captions()}, k, corpus::default_stoplist());
}

}  // namespace

TEST(LrSchedule, WarmupPeaksAtConfiguredRate) {
    Schedule s{2e-4, 10, 100};
    EXPECT_DOUBLE_EQ(lr_at(9, s), 2e-4);              // iter = warmup-1 hits the peak
    EXPECT_DOUBLE_EQ(lr_at(0, s), 2e-4 / 10.0);       // first step is lr/warmup
    EXPECT_LT(lr_at(99, s), 2e-4 * 0.01);             // final iteration near zero
    EXPECT_NEAR(lr_at(55, s), 1e-4, 1e-12);           // cosine midpoint is half
}

TEST(LrSchedule, ContinuousAtWarmupBoundary) {
    Schedule s{1e-3, 20, 200};
    EXPECT_NEAR(lr_at(19, s), lr_at(20, s), 1e-3 * 1e-3);
}

TEST(Clip, ExactScalingAtTwiceTheCap) {
    ParameterStore ps;
    Tensor a = ps.add("a", Tensor::zeros({2}));
    // gradient (60, 80): global norm 100
    a.mutable_grad()[0] = 60.0;
    a.mutable_grad()[1] = 80.0;
    double pre = clip_gradients(ps, 50.0);
    EXPECT_DOUBLE_EQ(pre, 100.0);
    EXPECT_DOUBLE_EQ(a.grad()[0], 30.0);
    EXPECT_DOUBLE_EQ(a.grad()[1], 40.0);
}

TEST(Clip, PostClipNormNeverExceedsCap) {
    Rng rng(61);
    ParameterStore ps;
    Tensor a = ps.add("a", Tensor::zeros({32}));
    for (int rep = 0; rep < 20; ++rep) {
        for (double& g : a.mutable_grad()) g = rng.normal(0.0, 10.0);
        clip_gradients(ps, 5.0);
        double sq = 0.0;
        for (double g : a.grad()) sq += g * g;
        EXPECT_LE(std::sqrt(sq), 5.0 + 1e-9);
    }
}

TEST(AdamW, ZeroGradZeroDecayLeavesParamsUnchanged) {
    ParameterStore ps;
    Tensor a = ps.add("a", Tensor::from_data({3}, {1.0, -2.0, 3.0}));
    a.mutable_grad();  // allocate zeros
    AdamW opt(ps);
    opt.step(ps, 0.1, 0.0);
    EXPECT_EQ(a.values(), (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(AdamW, FirstStepMatchesHandEvaluatedUpdate) {
    const double g = 3.0, lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ParameterStore ps;
    Tensor a = ps.add("a", Tensor::scalar(0.0));
    a.mutable_grad()[0] = g;
    AdamW opt(ps, b1, b2, eps);
    opt.step(ps, lr, 0.0);
    // bias-corrected first step: mhat = g, vhat = g^2
    double expected = -lr * (g / (std::sqrt(g * g) + eps));
    EXPECT_NEAR(a.value(), expected, 1e-15);
    EXPECT_NEAR(a.value(), -lr, 1e-8);  // approximately -lr * sign(g)
}

TEST(AdamW, NonFiniteGradientErrors) {
    ParameterStore ps;
    Tensor a = ps.add("a", Tensor::scalar(0.0));
    a.mutable_grad()[0] = std::nan("");
    AdamW opt(ps);
    EXPECT_THROW(opt.step(ps, 0.1, 0.0), std::runtime_error);
}

TEST(Ema, SingleUpdateBlends) {
    ParameterStore ps;
    Tensor a = ps.add("a", Tensor::scalar(0.0));
    EmaState ema(ps, 0.99);
    a.mutable_values()[0] = 1.0;
    ema.update(ps);
    EXPECT_NEAR(ema.shadow()[0][0], 0.01, 1e-15);
}

TEST(Ema, GeometricDecayIdentityExact) {
    ParameterStore ps;
    Tensor a = ps.add("a", Tensor::scalar(0.0));
    const double lambda = 0.9, theta = 2.0;
    EmaState ema(ps, lambda);
    a.mutable_values()[0] = theta;  // parameter held constant
    const double initial_gap = std::abs(0.0 - theta);
    for (int t = 1; t <= 12; ++t) {
        ema.update(ps);
        double gap = std::abs(ema.shadow()[0][0] - theta);
        EXPECT_NEAR(gap, std::pow(lambda, t) * initial_gap, 1e-12);
    }
}

TEST(Ema, ZeroDecayTracksParamsExactly) {
    ParameterStore ps;
    Tensor a = ps.add("a", Tensor::from_data({2}, {5.0, -1.0}));
    EmaState ema(ps, 0.0);
    a.mutable_values()[0] = 7.0;
    ema.update(ps);
    EXPECT_EQ(ema.shadow()[0], (std::vector<double>{7.0, -1.0}));
}

TEST(Ema, ShapeMismatchErrors) {
    ParameterStore ps;
    Tensor a = ps.add("a", Tensor::zeros({2}));
    EmaState ema(ps, 0.5);
    ParameterStore other;
    other.add("a", Tensor::zeros({3}));
    EXPECT_THROW(ema.update(other), std::invalid_argument);
}

// --- epoch mechanics -----------------------------------------------------------

TEST(RunEpoch, FirstEpochEliminatesNothing) {
    testsupport::TempDir dir("run0");
    auto sc = tiny_corpus();
    auto cfg = tiny_run_config();
    cfg.loss.drop_epoch = 4;  // never reached in 2 epochs
    Trainer t(cfg, sc.train, keywords_for(sc.train), dir.path());
    auto report = t.run_epoch(0);
    EXPECT_EQ(report.r_global, 0u);
    EXPECT_EQ(report.r_local, 0u);
    EXPECT_TRUE(report.eliminated_pairs.empty());
}

TEST(RunEpoch, BanksCompleteAndCheckpointsWritten) {
    testsupport::TempDir dir("run1");
    auto sc = tiny_corpus();
    auto cfg = tiny_run_config();
    Trainer t(cfg, sc.train, keywords_for(sc.train), dir.path());
    t.run_epoch(0);  // throws internally if banks are incomplete
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "live.ebkt"));
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "ema.ebkt"));
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "banks" / "epoch_000_global.ebkb"));
    auto bank = io::read_bank(dir.path() / "banks" / "epoch_000_global.ebkb");
    EXPECT_EQ(bank.scores.size(), t.pair_count());
    EXPECT_EQ(bank.epoch, 0u);
}

TEST(RunEpoch, ThresholdsBecomeFiniteAfterFirstEpoch) {
    testsupport::TempDir dir("run2");
    auto sc = tiny_corpus();
    auto cfg = tiny_run_config();
    Trainer t(cfg, sc.train, keywords_for(sc.train), dir.path());
    EXPECT_EQ(t.current_thresholds().global, alignment::kNegInf);
    t.run_epoch(0);
    EXPECT_TRUE(std::isfinite(t.current_thresholds().global));
    EXPECT_TRUE(std::isfinite(t.current_thresholds().local));
    EXPECT_EQ(t.current_thresholds().source_epoch, 0);
}

TEST(RunEpoch, EliminationKicksInAtDropEpoch) {
    testsupport::TempDir dir("run3");
    auto sc = tiny_corpus(5, 0.2);
    auto cfg = tiny_run_config();
    cfg.loss.drop_epoch = 1;
    cfg.eba.drop_ratio = 0.2;
    Trainer t(cfg, sc.train, keywords_for(sc.train), dir.path());
    auto r0 = t.run_epoch(0);
    EXPECT_EQ(r0.r_global + r0.r_local, 0u);
    auto r1 = t.run_epoch(1);
    EXPECT_GT(r1.r_global + r1.r_local, 0u);
    EXPECT_FALSE(r1.eliminated_pairs.empty());
}

TEST(Training, FixedSeedGivesIdenticalLossCurvesAndCheckpoints) {
    auto sc = tiny_corpus();
    auto cfg = tiny_run_config(7);
    testsupport::TempDir d1("det1"), d2("det2");
    run_training(cfg, sc.train, keywords_for(sc.train), d1.path());
    run_training(cfg, sc.train, keywords_for(sc.train), d2.path());
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    EXPECT_EQ(slurp(d1.path() / "train_log.jsonl"), slurp(d2.path() / "train_log.jsonl"));
    EXPECT_EQ(slurp(d1.path() / "live.ebkt"), slurp(d2.path() / "live.ebkt"));
    EXPECT_EQ(slurp(d1.path() / "ema.ebkt"), slurp(d2.path() / "ema.ebkt"));
    // a different seed must diverge
    auto cfg2 = tiny_run_config(8);
    testsupport::TempDir d3("det3");
    run_training(cfg2, sc.train, keywords_for(sc.train), d3.path());
    EXPECT_NE(slurp(d1.path() / "live.ebkt"), slurp(d3.path() / "live.ebkt"));
}

TEST(Training, CheckpointRoundTripReproducesForward) {
    testsupport::TempDir dir("ckpt_rt");
    auto sc = tiny_corpus();
    auto cfg = tiny_run_config();
    Trainer t(cfg, sc.train, keywords_for(sc.train), dir.path());
    t.run_epoch(0);

    auto pack = t.live_model().encode_image(sc.train.samples[0].features);

    model::Model fresh;
    auto mc = t.live_model().config();
    fresh.init(mc, 12345);
    fresh.load(dir.path() / "live.ebkt");
    auto pack2 = fresh.encode_image(sc.train.samples[0].features);
    EXPECT_EQ(pack.global.values(), pack2.global.values());
}

TEST(Training, LogLinesCarryTheDeclaredSchema) {
    testsupport::TempDir dir("log");
    auto sc = tiny_corpus();
    auto cfg = tiny_run_config();
    cfg.train.epochs = 1;
    run_training(cfg, sc.train, keywords_for(sc.train), dir.path());
    std::ifstream f(dir.path() / "train_log.jsonl");
    std::string line;
    ASSERT_TRUE(std::getline(f, line));
    auto rec = nlohmann::json::parse(line);
    for (auto key : {"epoch", "step", "info_g", "info_l", "mlm", "total", "R_g", "R_l"})
        EXPECT_TRUE(rec.contains(key)) << key;
}

TEST(RunConfig, JsonRoundTrip) {
    auto cfg = tiny_run_config(9);
    cfg.eba.scheme = alignment::EbaScheme::Joint;
    cfg.fusion.alpha = 0.25;
    auto j = cfg.to_json();
    auto back = RunConfig::from_json(j);
    EXPECT_EQ(back.train.seed, 9u);
    EXPECT_EQ(back.eba.scheme, alignment::EbaScheme::Joint);
    EXPECT_DOUBLE_EQ(back.fusion.alpha, 0.25);
    EXPECT_EQ(back.loss.drop_epoch, cfg.loss.drop_epoch);
}
