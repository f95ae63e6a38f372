#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "ebaker/io.hpp"
#include "ebaker/tensor.hpp"
#include "support/finite_diff.hpp"
#include "support/tmpdir.hpp"

using namespace ebaker;
using testsupport::expect_gradients_match;
using testsupport::random_tensor;

TEST(Tensor, ShapeDataInvariant) {
    Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(shape_numel(t.shape()), t.values().size());
    EXPECT_THROW(Tensor::from_data({2, 2}, {1.0}), std::invalid_argument);
}

TEST(Tensor, MatmulIdentity) {
    Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    Tensor b = Tensor::matrix(2, 2, {2, 3, 4, 5});
    Tensor out = ops::matmul(eye, b);
    EXPECT_EQ(out.values(), b.values());
}

TEST(Tensor, MatmulScalarCase) {
    Tensor a = Tensor::matrix(1, 1, {2});
    Tensor b = Tensor::matrix(1, 1, {3});
    EXPECT_DOUBLE_EQ(ops::matmul(a, b).value(), 6.0);
}

TEST(Tensor, MatmulShapeMismatch) {
    Tensor a = Tensor::matrix(2, 3, std::vector<double>(6, 1.0));
    Tensor b = Tensor::matrix(2, 3, std::vector<double>(6, 1.0));
    EXPECT_THROW(ops::matmul(a, b), std::invalid_argument);
}

// gradient of sum(a*b) w.r.t. a is ones(m,n) * b^T, and it matches finite
// differences
TEST(Tensor, MatmulGradientClosedForm) {
    Rng rng(7);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    a.set_requires_grad(true);
    Tensor loss = ops::sum_all(ops::matmul(a, b));
    backward(loss);

    // ones(3x2) * b^T
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            double expected = 0.0;
            for (std::size_t j = 0; j < 2; ++j) expected += b.at(k, j);
            EXPECT_NEAR(a.grad()[i * 4 + k], expected, 1e-12);
        }

    Rng rng2(8);
    Tensor a2 = random_tensor({3, 4}, rng2);
    Tensor b2 = random_tensor({4, 2}, rng2);
    expect_gradients_match(
        [](const std::vector<Tensor>& in) {
            return ops::sum_all(ops::matmul(in[0], in[1]));
        },
        {a2, b2}, 1e-6);
}

TEST(Tensor, SoftmaxRowsSymmetry) {
    Tensor x = Tensor::matrix(1, 2, {0, 0});
    Tensor p = ops::softmax_rows(x);
    EXPECT_DOUBLE_EQ(p.values()[0], 0.5);
    EXPECT_DOUBLE_EQ(p.values()[1], 0.5);
}

TEST(Tensor, SoftmaxRowsStabilized) {
    Tensor x = Tensor::matrix(1, 2, {1000, 0});
    Tensor p = ops::softmax_rows(x);
    EXPECT_NEAR(p.values()[0], 1.0, 1e-12);
    EXPECT_NEAR(p.values()[1], 0.0, 1e-12);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
    Rng rng(3);
    for (double mag : {1.0, 100.0, 1e4}) {
        Tensor x = random_tensor({5, 7}, rng, mag);
        Tensor p = ops::softmax_rows(x);
        for (std::size_t i = 0; i < 5; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 7; ++j) sum += p.at(i, j);
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(Tensor, LayerNormConstantVector) {
    Tensor x = Tensor::matrix(1, 4, {3, 3, 3, 3});
    Tensor gain = Tensor::full({4}, 2.0);
    Tensor bias = Tensor::from_data({4}, {0.5, 0.5, 0.5, 0.5});
    Tensor y = ops::layer_norm(x, gain, bias);
    for (double v : y.values()) EXPECT_NEAR(v, 0.5, 1e-12);
}

TEST(Tensor, LayerNormAlreadyNormalized) {
    Tensor x = Tensor::matrix(1, 2, {1, -1});
    Tensor gain = Tensor::full({2}, 1.0);
    Tensor bias = Tensor::zeros({2});
    Tensor y = ops::layer_norm(x, gain, bias, 1e-5);
    EXPECT_NEAR(y.values()[0], 1.0, 1e-4);  // eps-corrected
    EXPECT_NEAR(y.values()[1], -1.0, 1e-4);
}

TEST(Tensor, QuickGeluPointValues) {
    Tensor zero = Tensor::scalar(0.0);
    EXPECT_DOUBLE_EQ(ops::quick_gelu(zero).value(), 0.0);

    EXPECT_NEAR(ops::quick_gelu(Tensor::scalar(30.0)).value(), 30.0, 1e-9);
    EXPECT_NEAR(ops::quick_gelu(Tensor::scalar(-30.0)).value(), 0.0, 1e-9);

    // direct scalar oracle at x = 1
    double expected = 1.0 / (1.0 + std::exp(-1.702));
    EXPECT_NEAR(ops::quick_gelu(Tensor::scalar(1.0)).value(), expected, 1e-15);
}

TEST(Tensor, CosineRowsCases) {
    Tensor unit = Tensor::matrix(1, 2, {1, 0});
    EXPECT_NEAR(ops::cosine_rows(unit, unit).value(), 1.0, 1e-15);

    Tensor ortho = Tensor::matrix(1, 2, {0, 1});
    EXPECT_NEAR(ops::cosine_rows(unit, ortho).value(), 0.0, 1e-15);

    Tensor a = Tensor::matrix(1, 2, {3, 4});
    Tensor b = Tensor::matrix(1, 2, {4, 3});
    EXPECT_NEAR(ops::cosine_rows(a, b).value(), 24.0 / 25.0, 1e-15);
}

TEST(Tensor, CosineRowsZeroNormErrors) {
    Tensor a = Tensor::matrix(1, 2, {0, 0});
    Tensor b = Tensor::matrix(1, 2, {1, 0});
    EXPECT_THROW(ops::cosine_rows(a, b), std::domain_error);
    EXPECT_THROW(ops::cosine_rows(b, a), std::domain_error);
}

TEST(Tensor, CosineRowsBounded) {
    Rng rng(11);
    Tensor a = random_tensor({6, 5}, rng, 3.0);
    Tensor b = random_tensor({4, 5}, rng, 3.0);
    Tensor c = ops::cosine_rows(a, b);
    for (double v : c.values()) {
        EXPECT_GE(v, -1.0 - 1e-12);
        EXPECT_LE(v, 1.0 + 1e-12);
    }
}

TEST(Tensor, ForwardDeterminism) {
    auto run = [] {
        Rng rng(42);
        Tensor a = random_tensor({4, 6}, rng);
        Tensor b = random_tensor({6, 3}, rng);
        return ops::softmax_rows(ops::matmul(ops::quick_gelu(a), b)).values();
    };
    EXPECT_EQ(run(), run());
}

TEST(Tensor, BackwardTwiceIsError) {
    Tensor a = Tensor::scalar(2.0, true);
    Tensor loss = ops::multiply(a, a);
    backward(loss);
    EXPECT_THROW(backward(loss), std::logic_error);
}

TEST(Tensor, GradShapeMatchesLeaf) {
    Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
    backward(ops::sum_all(ops::quick_gelu(a)));
    EXPECT_EQ(a.grad().size(), a.numel());
}

TEST(Tensor, CheckFiniteBarrier) {
    Tensor ok = Tensor::matrix(1, 2, {1, 2});
    EXPECT_NO_THROW(check_finite(ok, "ok"));
    Tensor bad = Tensor::matrix(1, 2, {1, std::nan("")});
    EXPECT_THROW(check_finite(bad, "bad"), std::runtime_error);
}

TEST(Tensor, EmbeddingLookupGathersAndScatters) {
    Tensor table = Tensor::matrix(4, 2, {0, 1, 10, 11, 20, 21, 30, 31}, true);
    Tensor out = ops::embedding_lookup(table, {2, 0, 2});
    EXPECT_EQ(out.values(), (std::vector<double>{20, 21, 0, 1, 20, 21}));
    backward(ops::sum_all(out));
    // row 2 used twice
    EXPECT_DOUBLE_EQ(table.grad()[2 * 2], 2.0);
    EXPECT_DOUBLE_EQ(table.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(table.grad()[3 * 2], 0.0);
}

TEST(Tensor, CrossEntropyUniformAndSaturated) {
    Tensor zeros = Tensor::matrix(2, 5, std::vector<double>(10, 0.0));
    EXPECT_NEAR(ops::cross_entropy(zeros, {1, 3}).value(), std::log(5.0), 1e-12);

    std::vector<double> row(5, 0.0);
    row[2] = 50.0;
    Tensor peaked = Tensor::matrix(1, 5, row);
    EXPECT_NEAR(ops::cross_entropy(peaked, {2}).value(), 0.0, 1e-12);
}

TEST(Tensor, AttentionMaskBlocksKeys) {
    // a padded key must never influence any query's output
    Rng rng(5);
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({3, 4}, rng);
    Tensor v = random_tensor({3, 4}, rng);
    ops::AttentionMask mask;
    mask.key_padding = {false, false, true};

    Tensor base = ops::multi_head_attention(q, k, v, 2, &mask);
    // scramble the padded key/value row; outputs must not move
    Tensor k2 = k;
    Tensor v2 = v;
    k2.mutable_values()[2 * 4 + 1] = 99.0;
    v2.mutable_values()[2 * 4 + 0] = -99.0;
    Tensor other = ops::multi_head_attention(q, k2, v2, 2, &mask);
    for (std::size_t i = 0; i < base.numel(); ++i)
        EXPECT_NEAR(base.values()[i], other.values()[i], 1e-12);
}

TEST(Tensor, CausalMaskIsLowerTriangular) {
    Rng rng(6);
    Tensor q = random_tensor({3, 2}, rng);
    Tensor k = random_tensor({3, 2}, rng);
    Tensor v = random_tensor({3, 2}, rng);
    ops::AttentionMask mask;
    mask.causal = true;
    Tensor out = ops::multi_head_attention(q, k, v, 1, &mask);
    // first query can only see the first key/value row
    EXPECT_NEAR(out.at(0, 0), v.at(0, 0), 1e-12);
    EXPECT_NEAR(out.at(0, 1), v.at(0, 1), 1e-12);
}

// --- gradient checks across the primitive set --------------------------------

TEST(TensorGradients, ElementwiseOps) {
    Rng rng(100);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({3, 4}, rng);
        auto head = testsupport::weighted_sum_head({3, 4}, rng);

        expect_gradients_match(
            [&](const std::vector<Tensor>& in) { return head(ops::add(in[0], in[1])); },
            {a, b});
        expect_gradients_match(
            [&](const std::vector<Tensor>& in) { return head(ops::sub(in[0], in[1])); },
            {a, b});
        expect_gradients_match(
            [&](const std::vector<Tensor>& in) {
                return head(ops::multiply(in[0], in[1]));
            },
            {a, b});
        expect_gradients_match(
            [&](const std::vector<Tensor>& in) { return head(ops::scale(in[0], -1.7)); },
            {a});
        expect_gradients_match(
            [&](const std::vector<Tensor>& in) { return head(ops::quick_gelu(in[0])); },
            {a});
    }
}

TEST(TensorGradients, ScaleByTensor) {
    Rng rng(101);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor s = Tensor::scalar(0.7);
    auto head = testsupport::weighted_sum_head({2, 3}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) { return head(ops::scale_by(in[0], in[1])); },
        {a, s});
}

TEST(TensorGradients, ExpLogSqrt) {
    Rng rng(102);
    Tensor a = random_tensor({2, 4}, rng, 0.5);
    // keep log/sqrt inputs positive and away from zero
    Tensor pos = Tensor::zeros({2, 4});
    for (std::size_t i = 0; i < 8; ++i)
        pos.mutable_values()[i] = 0.5 + std::abs(a.values()[i]);
    auto head = testsupport::weighted_sum_head({2, 4}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) { return head(ops::exp(in[0])); }, {a});
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) { return head(ops::log(in[0])); }, {pos});
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) { return head(ops::sqrt(in[0])); }, {pos});
}

TEST(TensorGradients, SoftmaxLayerNormCosine) {
    Rng rng(103);
    Tensor x = random_tensor({2, 3}, rng);
    auto head23 = testsupport::weighted_sum_head({2, 3}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) { return head23(ops::softmax_rows(in[0])); },
        {x});

    Tensor x48 = random_tensor({4, 8}, rng);
    Tensor gain = random_tensor({8}, rng);
    Tensor bias = random_tensor({8}, rng);
    auto head48 = testsupport::weighted_sum_head({4, 8}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) {
            return head48(ops::layer_norm(in[0], in[1], in[2]));
        },
        {x48, gain, bias});

    Tensor a = random_tensor({3, 5}, rng);
    Tensor b = random_tensor({4, 5}, rng);
    auto head34 = testsupport::weighted_sum_head({3, 4}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) {
            return head34(ops::cosine_rows(in[0], in[1]));
        },
        {a, b});
}

TEST(TensorGradients, ShapePlumbingOps) {
    Rng rng(104);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({2, 4}, rng);
    auto head54 = testsupport::weighted_sum_head({5, 4}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) {
            return head54(ops::concat_rows({in[0], in[1]}));
        },
        {a, b});

    auto head43 = testsupport::weighted_sum_head({4, 3}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) { return head43(ops::transpose(in[0])); }, {a});

    auto head32 = testsupport::weighted_sum_head({3, 2}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) { return head32(ops::slice_cols(in[0], 1, 2)); },
        {a});

    Tensor c = random_tensor({3, 2}, rng);
    auto head36 = testsupport::weighted_sum_head({3, 6}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) {
            return head36(ops::concat_cols({in[0], in[1]}));
        },
        {a, c});

    Tensor vec = random_tensor({4}, rng);
    auto head34b = testsupport::weighted_sum_head({3, 4}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) {
            return head34b(ops::add_rowvec(in[0], in[1]));
        },
        {a, vec});

    auto head14 = testsupport::weighted_sum_head({1, 4}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) { return head14(ops::mean_pool(in[0])); }, {a});

    auto head31 = testsupport::weighted_sum_head({3, 1}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) { return head31(ops::l2_norm_rows(in[0])); },
        {a});

    Tensor sq = random_tensor({3, 3}, rng);
    auto head31b = testsupport::weighted_sum_head({3, 1}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) { return head31b(ops::diag(in[0])); }, {sq});

    expect_gradients_match(
        [&](const std::vector<Tensor>& in) {
            return head34b(ops::embedding_lookup(in[0], {2, 0, 2}));
        },
        {a});
}

TEST(TensorGradients, ReductionsAndCrossEntropy) {
    Rng rng(105);
    Tensor a = random_tensor({3, 4}, rng);
    expect_gradients_match(
        [](const std::vector<Tensor>& in) { return ops::sum_all(in[0]); }, {a});
    expect_gradients_match(
        [](const std::vector<Tensor>& in) { return ops::mean_all(in[0]); }, {a});

    Tensor logits = random_tensor({4, 6}, rng);
    std::vector<std::size_t> targets = {1, 0, 5, 2};
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) { return ops::cross_entropy(in[0], targets); },
        {logits});
}

TEST(TensorGradients, MultiHeadAttention) {
    Rng rng(106);
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({5, 4}, rng);
    Tensor v = random_tensor({5, 4}, rng);
    auto head = testsupport::weighted_sum_head({3, 4}, rng);
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) {
            return head(ops::multi_head_attention(in[0], in[1], in[2], 2));
        },
        {q, k, v});

    ops::AttentionMask mask;
    mask.key_padding = {false, true, false, false, true};
    expect_gradients_match(
        [&](const std::vector<Tensor>& in) {
            return head(ops::multi_head_attention(in[0], in[1], in[2], 2, &mask));
        },
        {q, k, v});
}

// --- parameter container round-trip ------------------------------------------

TEST(ParameterStore, SaveLoadRoundTripIsBitIdentical) {
    testsupport::TempDir dir("ebkt");
    Rng rng(9);
    ParameterStore store;
    store.add("alpha.w", testsupport::random_tensor({3, 4}, rng));
    store.add("alpha.b", testsupport::random_tensor({4}, rng));
    store.add("beta", testsupport::random_tensor({2, 2, 2}, rng));
    auto path = dir.path() / "params.ebkt";
    io::save_tensors(store, path);

    ParameterStore loaded;
    loaded.add("alpha.w", Tensor::zeros({3, 4}));
    loaded.add("alpha.b", Tensor::zeros({4}));
    loaded.add("beta", Tensor::zeros({2, 2, 2}));
    io::load_tensors(loaded, path);
    for (std::size_t i = 0; i < store.size(); ++i)
        EXPECT_EQ(store.tensors()[i].values(), loaded.tensors()[i].values());
}

TEST(ParameterStore, LoadRejectsShapeMismatch) {
    testsupport::TempDir dir("ebkt2");
    ParameterStore store;
    store.add("x", Tensor::matrix(2, 2, {1, 2, 3, 4}));
    auto path = dir.path() / "p.ebkt";
    io::save_tensors(store, path);

    ParameterStore other;
    other.add("x", Tensor::zeros({4, 1}));
    EXPECT_THROW(io::load_tensors(other, path), std::runtime_error);
}

TEST(ParameterStore, DuplicateNameRejected) {
    ParameterStore store;
    store.add("x", Tensor::scalar(1.0));
    EXPECT_THROW(store.add("x", Tensor::scalar(2.0)), std::logic_error);
}
