#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "atp/checkpoint.hpp"
#include "atp/errors.hpp"
#include "atp/nn.hpp"
#include "../support/oracles.hpp"

using namespace atp;

namespace {

ParameterStore random_model(const ModelSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParameterStore m(spec);
    oracle::randomize(m, rng);
    return m;
}

ModelSpec affine_softmax(std::size_t in, std::size_t classes) {
    ModelSpec s;
    s.layers = {{LayerKind::affine, in, classes}, {LayerKind::softmax, classes, classes}};
    return s;
}

}  // namespace

TEST(Tensor, ShapeInvariantAndSlicing) {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t(1, 2), 6.0);
    EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), DimensionError);
    const Tensor s = t.slice_rows(1, 1);
    EXPECT_EQ(s.rows(), 1u);
    EXPECT_EQ(s(0, 0), 4.0);
    const std::vector<std::size_t> idx{1, 0};
    const Tensor g = t.gather_rows(idx);
    EXPECT_EQ(g(0, 1), 5.0);
    EXPECT_EQ(g(1, 1), 2.0);
    const std::vector<Tensor> parts{s, s};
    EXPECT_EQ(concat_rows(parts).rows(), 2u);
}

TEST(Forward, ZeroFinalLayerGivesUniformRows) {
    const auto spec = make_mlp(3, std::vector<std::size_t>{4}, 5);
    auto m = random_model(spec, 1);
    for (auto& v : m.module("layer3.affine.weight")) v = 0.0;
    for (auto& v : m.module("layer3.affine.bias")) v = 0.0;
    std::mt19937_64 rng(2);
    const auto p = nn::predict(m, oracle::random_batch(7, 3, rng));
    for (double v : p.storage()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Forward, ToyBatchNormCentersTheRunningMean) {
    ModelSpec spec;
    spec.layers = {{LayerKind::batchnorm, 1, 1}, {LayerKind::affine, 1, 2}, {LayerKind::softmax, 2, 2}};
    ParameterStore m(spec);
    m.module("layer0.bn.running_mean")[0] = 0.0;
    m.module("layer0.bn.running_var")[0] = 1.64;
    m.module("layer0.bn.weight")[0] = 1.0;
    auto w = m.module("layer1.affine.weight");
    w[0] = -1.0;
    w[1] = 1.0;
    const auto r = nn::forward(m, Tensor({1, 1}, {0.0}), nn::StatsMode::frozen_stats);
    // the BN output feeds the affine layer, whose cached input is z
    EXPECT_EQ(r.cache.inputs[1](0, 0), 0.0);
    EXPECT_DOUBLE_EQ(r.predictions(0, 0), 0.5);
}

TEST(Forward, MatchesScalarOracleInBothModes) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        const auto spec = oracle::random_spec(rng);
        auto m = random_model(spec, seed + 100);
        const auto x = oracle::random_batch(4, spec.input_dim(), rng);
        for (bool train : {false, true}) {
            const auto got = nn::predict(m, x, train ? nn::StatsMode::train_stats : nn::StatsMode::frozen_stats);
            const auto want = oracle::forward(m, oracle::to_matrix(x), train);
            for (std::size_t r = 0; r < 4; ++r)
                for (std::size_t c = 0; c < got.cols(); ++c) EXPECT_NEAR(got(r, c), want[r][c], 1e-12);
        }
    }
}

TEST(Forward, RowsAreProbabilityVectors) {
    std::mt19937_64 rng(5);
    const auto spec = make_mlp(6, std::vector<std::size_t>{8, 8}, 4);
    auto m = random_model(spec, 3);
    const auto p = nn::predict(m, oracle::random_batch(50, 6, rng, 30.0));
    for (std::size_t r = 0; r < p.rows(); ++r) {
        double s = 0.0;
        for (double v : p.row(r)) {
            EXPECT_GE(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Forward, FrozenModeIsIndependentOfBatchComposition) {
    std::mt19937_64 rng(9);
    const auto spec = make_mlp(5, std::vector<std::size_t>{6}, 3);
    auto m = random_model(spec, 4);
    const auto x = oracle::random_batch(6, 5, rng);
    const auto whole = nn::predict(m, x);
    for (std::size_t r = 0; r < 6; ++r) {
        const auto alone = nn::predict(m, x.slice_rows(r, 1));
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(alone(0, c), whole(r, c));
    }
}

TEST(Forward, ReportsExactBiasedBatchStatistics) {
    const auto spec = make_mlp(2, std::vector<std::size_t>{3}, 2);
    auto m = random_model(spec, 11);
    std::mt19937_64 rng(12);
    const auto x = oracle::random_batch(5, 2, rng);
    const auto r = nn::forward(m, x, nn::StatsMode::train_stats);
    ASSERT_EQ(r.cache.batch_stats.size(), 1u);
    const auto& pre = r.cache.inputs[1];  // input of the BN layer
    for (std::size_t f = 0; f < 3; ++f) {
        double mean = 0.0;
        for (std::size_t b = 0; b < 5; ++b) mean += pre(b, f);
        mean /= 5.0;
        double var = 0.0;
        for (std::size_t b = 0; b < 5; ++b) var += (pre(b, f) - mean) * (pre(b, f) - mean);
        var /= 5.0;
        EXPECT_DOUBLE_EQ(r.cache.batch_stats[0].mean[f], mean);
        EXPECT_DOUBLE_EQ(r.cache.batch_stats[0].var[f], var);
    }
}

TEST(Forward, Errors) {
    const auto spec = make_mlp(3, std::vector<std::size_t>{4}, 2);
    ParameterStore m(spec);
    EXPECT_THROW(nn::forward(m, Tensor::matrix(2, 4), nn::StatsMode::frozen_stats), DimensionError);
    Tensor bad = Tensor::matrix(2, 3);
    bad(0, 1) = std::nan("");
    EXPECT_THROW(nn::forward(m, bad, nn::StatsMode::frozen_stats), NumericError);
    EXPECT_THROW(nn::forward(m, Tensor::matrix(1, 3), nn::StatsMode::train_stats), DegenerateBatchError);
    EXPECT_NO_THROW(nn::forward(m, Tensor::matrix(1, 3), nn::StatsMode::frozen_stats));
}

TEST(Losses, CrossEntropyExamples) {
    EXPECT_EQ(nn::cross_entropy(Tensor({1, 3}, {0, 1, 0}), std::vector<int>{1}), 0.0);
    Tensor uniform = Tensor::matrix(3, 10);
    for (auto& v : uniform.storage()) v = 0.1;
    EXPECT_NEAR(nn::cross_entropy(uniform, std::vector<int>{0, 4, 9}), std::log(10.0), 1e-12);
    const double got = nn::cross_entropy(Tensor({2, 2}, {0.7, 0.3, 0.2, 0.8}), std::vector<int>{0, 1});
    EXPECT_NEAR(got, (-std::log(0.7) - std::log(0.8)) / 2.0, 1e-15);
    EXPECT_NEAR(got, 0.289909, 1e-6);
}

TEST(Losses, CrossEntropyFloorsZeroProbabilityAndCountsIt) {
    std::size_t clamped = 0;
    const double v = nn::cross_entropy(Tensor({2, 2}, {1.0, 0.0, 0.5, 0.5}), std::vector<int>{1, 0}, &clamped);
    EXPECT_EQ(clamped, 1u);
    EXPECT_NEAR(v, (-std::log(nn::kProbFloor) + std::log(2.0)) / 2.0, 1e-12);
    EXPECT_THROW(nn::cross_entropy(Tensor({1, 2}, {0.5, 0.5}), std::vector<int>{2}), DimensionError);
}

TEST(Losses, EntropyExamplesAndRange) {
    EXPECT_EQ(nn::entropy_loss(Tensor({2, 2}, {1, 0, 0, 1})), 0.0);
    Tensor u = Tensor::matrix(2, 4);
    for (auto& v : u.storage()) v = 0.25;
    EXPECT_NEAR(nn::entropy_loss(u), std::log(4.0), 1e-12);
    EXPECT_NEAR(nn::entropy_loss(Tensor({2, 2}, {0.5, 0.5, 1.0, 0.0})), std::log(2.0) / 2.0, 1e-15);
    EXPECT_NEAR(nn::entropy_loss(Tensor({2, 2}, {0.5, 0.5, 1.0, 0.0})), 0.346574, 1e-6);

    std::mt19937_64 rng(3);
    auto m = random_model(make_mlp(4, std::vector<std::size_t>{5}, 6), 8);
    for (int i = 0; i < 20; ++i) {
        const double h = nn::entropy_loss(nn::predict(m, oracle::random_batch(8, 4, rng, 5.0)));
        EXPECT_GE(h, 0.0);
        EXPECT_LE(h, std::log(6.0) + 1e-12);
    }
}

TEST(Backward, ClosedFormAffineSoftmaxGradient) {
    std::mt19937_64 rng(21);
    auto m = random_model(affine_softmax(3, 4), 22);
    const auto x = oracle::random_batch(5, 3, rng);
    const auto y = oracle::random_labels(5, 4, rng);
    const auto fwd = nn::forward(m, x, nn::StatsMode::frozen_stats);
    const auto g = nn::backward(m, fwd.cache, nn::LossKind::cross_entropy, y);
    const auto p = oracle::forward(m, oracle::to_matrix(x), false);
    // dCE/dW = (1/B) sum_b (p_b - y_b) x_b^T, dCE/db = (1/B) sum_b (p_b - y_b)
    for (std::size_t c = 0; c < 4; ++c) {
        double gb = 0.0;
        for (std::size_t b = 0; b < 5; ++b) gb += (p[b][c] - (y[b] == static_cast<int>(c) ? 1.0 : 0.0)) / 5.0;
        EXPECT_NEAR(g[12 + c], gb, 1e-10);
        for (std::size_t i = 0; i < 3; ++i) {
            double gw = 0.0;
            for (std::size_t b = 0; b < 5; ++b) gw += (p[b][c] - (y[b] == static_cast<int>(c) ? 1.0 : 0.0)) * x(b, i) / 5.0;
            EXPECT_NEAR(g[c * 3 + i], gw, 1e-10);
        }
    }
}

TEST(Backward, MatchesFiniteDifferencesOnRandomModels) {
    constexpr double kStep = 1e-6;
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
        std::mt19937_64 rng(1000 + seed);
        const auto spec = oracle::random_spec(rng);
        auto m = random_model(spec, seed);
        ASSERT_LE(m.size(), 500u);
        const auto x = oracle::random_batch(6, spec.input_dim(), rng);
        const auto xm = oracle::to_matrix(x);
        const auto y = oracle::random_labels(6, spec.num_classes(), rng);
        for (auto mode : {nn::StatsMode::train_stats, nn::StatsMode::frozen_stats}) {
            const bool train = mode == nn::StatsMode::train_stats;
            for (auto loss : {nn::LossKind::cross_entropy, nn::LossKind::entropy}) {
                const auto fwd = nn::forward(m, x, mode);
                const auto g = nn::backward(m, fwd.cache, loss, y);
                ASSERT_EQ(g.size(), m.size());
                auto f = [&](const std::vector<double>& w) {
                    ParameterStore probe(m.architecture(), w);
                    const auto p = oracle::forward(probe, xm, train);
                    return loss == nn::LossKind::cross_entropy ? oracle::cross_entropy(p, y) : oracle::entropy(p);
                };
                const std::vector<double> w(m.values().begin(), m.values().end());
                for (std::size_t i = 0; i < w.size(); ++i) {
                    const double fd = oracle::central_difference(f, w, i, kStep);
                    EXPECT_LT(oracle::relative_error(g[i], fd), 1e-5)
                        << "seed " << seed << " coord " << i << " train " << train << " got " << g[i] << " fd " << fd;
                }
            }
        }
    }
}

TEST(Backward, RunningStatisticsGetNoGradientInTrainMode) {
    std::mt19937_64 rng(31);
    const auto spec = make_mlp(3, std::vector<std::size_t>{4, 4}, 3);
    auto m = random_model(spec, 32);
    const auto x = oracle::random_batch(6, 3, rng);
    const auto fwd = nn::forward(m, x, nn::StatsMode::train_stats);
    const auto g = nn::backward(m, fwd.cache, nn::LossKind::entropy);
    for (const auto& e : m.manifest().entries()) {
        if (e.kind != ModuleKind::running_stat) continue;
        for (std::size_t i = e.offset; i < e.offset + e.length; ++i) EXPECT_EQ(g[i], 0.0);
    }
}

TEST(Backward, VanishesAtSaturatedMinimum) {
    // logits pushed so far apart that the prediction equals the label to double precision
    auto m = ParameterStore(affine_softmax(1, 2));
    m.module("layer0.affine.bias")[1] = 60.0;
    const Tensor x({3, 1}, {0.1, -0.2, 0.3});
    const std::vector<int> y{1, 1, 1};
    const auto fwd = nn::forward(m, x, nn::StatsMode::frozen_stats);
    double n2 = 0.0;
    for (double v : nn::backward(m, fwd.cache, nn::LossKind::cross_entropy, y)) n2 += v * v;
    EXPECT_LT(std::sqrt(n2), 1e-8);
    n2 = 0.0;
    for (double v : nn::backward(m, fwd.cache, nn::LossKind::entropy)) n2 += v * v;
    EXPECT_LT(std::sqrt(n2), 1e-8);
}

TEST(Backward, RejectsStaleCacheAndMissingLabels) {
    std::mt19937_64 rng(41);
    auto m = random_model(make_mlp(2, std::vector<std::size_t>{3}, 2), 42);
    const auto x = oracle::random_batch(4, 2, rng);
    const auto fwd = nn::forward(m, x, nn::StatsMode::train_stats);
    EXPECT_THROW(nn::backward(m, fwd.cache, nn::LossKind::cross_entropy), UsageError);
    m.values()[0] += 1.0;
    EXPECT_THROW(nn::backward(m, fwd.cache, nn::LossKind::entropy), UsageError);
}

TEST(Predictions, ArgmaxBreaksTiesTowardLowestIndex) {
    const auto idx = nn::argmax_rows(Tensor({2, 3}, {0.4, 0.4, 0.2, 0.1, 0.45, 0.45}));
    EXPECT_EQ(idx, (std::vector<int>{0, 1}));
    EXPECT_DOUBLE_EQ(nn::accuracy(idx, std::vector<int>{0, 2}), 0.5);
}

TEST(Manifest, PartitionsParametersAndExpandsReduces) {
    const auto spec = make_mlp(3, std::vector<std::size_t>{4}, 2);
    const auto man = build_manifest(spec);
    ASSERT_EQ(man.num_modules(), 8u);  // affine w,b; bn mean,var,weight,bias; affine w,b
    std::size_t next = 0;
    for (const auto& e : man.entries()) {
        EXPECT_EQ(e.offset, next);
        EXPECT_GT(e.length, 0u);
        next += e.length;
    }
    EXPECT_EQ(next, man.num_params());
    EXPECT_EQ(man[2].name, "layer1.bn.running_mean");
    EXPECT_EQ(man[2].kind, ModuleKind::running_stat);
    EXPECT_EQ(man[4].kind, ModuleKind::trainable);
    std::vector<double> alpha(8);
    std::iota(alpha.begin(), alpha.end(), 1.0);
    const auto full = man.expand(alpha);
    const auto back = man.reduce(full);
    for (std::size_t l = 0; l < 8; ++l) EXPECT_DOUBLE_EQ(back[l], alpha[l] * static_cast<double>(man[l].length));
}

TEST(Checkpoint, RoundTripsBothFormats) {
    const auto spec = make_mlp(3, std::vector<std::size_t>{4}, 2);
    const auto m = ParameterStore::initialize(spec, 7);
    const auto dir = std::filesystem::temp_directory_path() / "atp_ckpt_test";
    std::filesystem::create_directories(dir);
    for (auto fmt : {CheckpointFormat::split, CheckpointFormat::single_json}) {
        const auto path = dir / (fmt == CheckpointFormat::split ? "split.json" : "single.json");
        save_checkpoint(m, path, fmt);
        const auto back = load_checkpoint(path);
        EXPECT_EQ(back, m);
        EXPECT_EQ(back.checksum(), m.checksum());
    }
    std::filesystem::remove_all(dir);
}

TEST(Model, InitializationIsDeterministic) {
    const auto spec = make_mlp(5, std::vector<std::size_t>{6}, 3);
    EXPECT_EQ(ParameterStore::initialize(spec, 3), ParameterStore::initialize(spec, 3));
    EXPECT_NE(ParameterStore::initialize(spec, 3).checksum(), ParameterStore::initialize(spec, 4).checksum());
    const auto m = ParameterStore::initialize(spec, 3);
    for (double v : m.module("layer1.bn.running_var")) EXPECT_EQ(v, 1.0);
    for (double v : m.module("layer1.bn.weight")) EXPECT_EQ(v, 1.0);
}

TEST(ModelSpec, ValidationRejectsBadChains) {
    ModelSpec s;
    s.layers = {{LayerKind::affine, 3, 2}, {LayerKind::softmax, 3, 3}};
    EXPECT_THROW(s.validate(), ConfigError);
    s.layers = {{LayerKind::softmax, 2, 2}, {LayerKind::affine, 2, 2}};
    EXPECT_THROW(s.validate(), ConfigError);
    s = make_mlp(2, std::vector<std::size_t>{2}, 2);
    s.bn_epsilon = 0.0;
    EXPECT_THROW(s.validate(), ConfigError);
}
