#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "atp/analysis.hpp"
#include "atp/errors.hpp"
#include "atp/nn.hpp"
#include "../support/oracles.hpp"

using namespace atp;
using namespace atp::analysis;

namespace {

// Bayes posterior of an isotropic Gaussian mixture, evaluated from the
// densities one sample at a time.
std::vector<double> bayes_posterior(const std::vector<double>& x, const Tensor& means, double sd,
                                    const std::vector<double>& prior) {
    std::vector<double> joint(prior.size());
    double z = 0.0;
    for (std::size_t c = 0; c < prior.size(); ++c) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) d2 += (x[j] - means(c, j)) * (x[j] - means(c, j));
        joint[c] = prior[c] * std::exp(-d2 / (2.0 * sd * sd));
        z += joint[c];
    }
    for (auto& v : joint) v /= z;
    return joint;
}

Tensor axis_means(std::size_t classes, std::size_t dim, double scale) {
    Tensor m = Tensor::matrix(classes, dim);
    for (std::size_t c = 0; c < classes; ++c) m(c, c % dim) = scale * (c < dim ? 1.0 : -1.0);
    return m;
}

double direct_bound(const BoundInput& b) {
    const double sk = std::sqrt(b.batches) + 1.0;
    return std::pow(12.0 * b.lipschitz * b.h_bound * b.radius / b.epsilon, b.modules) * 4.0 *
           std::exp(-b.sources * b.batches * b.epsilon * b.epsilon / (2.0 * sk * sk));
}

}  // namespace

TEST(Calibration, EqualPriorsLeaveModelUnchanged) {
    std::mt19937_64 rng(1);
    ParameterStore m(make_mlp(3, std::vector<std::size_t>{4}, 3));
    oracle::randomize(m, rng);
    const std::vector<double> p{0.2, 0.3, 0.5};
    EXPECT_EQ(calibrate_last_layer(m, p, p), m);
}

TEST(Calibration, BinaryHandExample) {
    ModelSpec spec;
    spec.layers = {{LayerKind::affine, 1, 2}, {LayerKind::softmax, 2, 2}};
    const ParameterStore m(spec);  // all zeros: posterior (0.5, 0.5) everywhere
    const auto cal = calibrate_last_layer(m, std::vector<double>{0.5, 0.5}, std::vector<double>{0.2, 0.8});
    const auto out = nn::predict(cal, Tensor({1, 1}, {0.7}));
    EXPECT_NEAR(out(0, 0), 0.2, 1e-15);
    EXPECT_NEAR(out(0, 1), 0.8, 1e-15);
}

TEST(Calibration, SwappedPriorsUndoEachOther) {
    std::mt19937_64 rng(2);
    ParameterStore m(make_mlp(3, std::vector<std::size_t>{4}, 3));
    oracle::randomize(m, rng);
    const std::vector<double> p{0.2, 0.3, 0.5}, q{0.6, 0.1, 0.3};
    const auto back = calibrate_last_layer(calibrate_last_layer(m, p, q), q, p);
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(back.values()[i], m.values()[i], 1e-15);
}

TEST(Calibration, Errors) {
    ParameterStore m(make_mlp(2, std::vector<std::size_t>{2}, 2));
    EXPECT_THROW(calibrate_last_layer(m, std::vector<double>{0.0, 1.0}, std::vector<double>{0.5, 0.5}), DomainError);
    EXPECT_THROW(calibrate_last_layer(m, std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 0.0}), DomainError);
    EXPECT_THROW(calibrate_last_layer(m, std::vector<double>{1.0}, std::vector<double>{1.0}), DimensionError);
    ModelSpec relu_last;  // the final affine does not feed the softmax directly
    relu_last.layers = {{LayerKind::affine, 2, 2}, {LayerKind::relu, 2, 2}, {LayerKind::softmax, 2, 2}};
    EXPECT_THROW(calibrate_last_layer(ParameterStore(relu_last), std::vector<double>{0.5, 0.5},
                                      std::vector<double>{0.5, 0.5}),
                 UsageError);
}

TEST(Calibration, CalibratedClassifierMatchesBayesPosteriorUnderShiftedPrior) {
    const auto means = axis_means(4, 3, 1.5);
    const std::vector<double> p{0.25, 0.25, 0.25, 0.25}, q{0.1, 0.2, 0.3, 0.4};
    const auto model = calibrated_gaussian_classifier(means, 0.9, p);
    const auto shifted = calibrate_last_layer(model, p, q);
    std::mt19937_64 rng(3);
    const auto x = oracle::random_batch(200, 3, rng, 2.0);
    const auto out = nn::predict(shifted, x);
    const auto lib = gaussian_mixture_posterior(x, means, 0.9, q);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto ref = bayes_posterior({x(r, 0), x(r, 1), x(r, 2)}, means, 0.9, q);
        for (std::size_t c = 0; c < 4; ++c) {
            EXPECT_NEAR(out(r, c), ref[c], 1e-12);
            EXPECT_NEAR(lib(r, c), ref[c], 1e-12);
        }
    }
}

TEST(Calibration, MonteCarloCrossEntropyMatchesBayes) {
    const auto means = axis_means(3, 3, 2.0);
    const std::vector<double> p{1.0 / 3, 1.0 / 3, 1.0 / 3}, q{0.7, 0.2, 0.1};
    const auto r = label_shift_calibration_check(means, 1.0, p, q, 100000, 5);
    EXPECT_EQ(r.samples, 100000u);
    EXPECT_LT(std::abs(r.model_ce - r.bayes_ce), 1e-3);
    EXPECT_LT(r.max_posterior_deviation, 1e-9);
    EXPECT_GT(r.uncalibrated_ce, r.bayes_ce + 0.01);  // skipping calibration costs something
}

TEST(Alignment, AffineShiftAlignsAfterRenormalization) {
    const auto r = bn_align_check(0.0, 1.0, 2.0, 3.0, 10000, 7);
    EXPECT_NEAR(r.expected_mean, 3.0, 1e-15);
    EXPECT_NEAR(r.expected_std, 2.0, 1e-15);
    EXPECT_NEAR(r.adapted_mean, 3.0, 0.05);
    EXPECT_NEAR(r.adapted_std, 2.0, 0.05);
    EXPECT_LT(r.ks, 0.02);
}

TEST(Alignment, IdentityShiftGivesNearZeroKs) {
    const auto r = bn_align_check(0.0, 1.0, 1.0, 0.0, 10000, 8);
    EXPECT_NEAR(r.adapted_mean, 0.0, 0.05);
    EXPECT_NEAR(r.adapted_std, 1.0, 0.05);
    EXPECT_LT(r.ks, 0.01);
}

TEST(Alignment, CubingFallsOutsideTheAffineModel) {
    const auto r = bn_align_check(0.0, 1.0, 1.0, 0.0, 10000, 9, FeatureTransform::cube);
    EXPECT_GT(r.ks, 0.05);
}

TEST(Alignment, KsStatisticExamples) {
    EXPECT_DOUBLE_EQ(ks_statistic({1, 2, 3}, {1, 2, 3}), 0.0);
    EXPECT_DOUBLE_EQ(ks_statistic({1, 2, 3}, {4, 5, 6}), 1.0);
    EXPECT_DOUBLE_EQ(ks_statistic({1, 2, 3, 4}, {3, 4, 5, 6}), 0.5);
    EXPECT_DOUBLE_EQ(ks_statistic({1, 1, 1}, {1, 1, 2}), 1.0 / 3.0);  // ties
}

TEST(Bound, ReferenceValue) {
    BoundInput b{1.0, 1.0, 1.0, 2.0, 100.0, 4.0, 0.5};
    const auto v = generalization_bound(b);
    EXPECT_NEAR(v.value, 8.91, 0.01);
    EXPECT_NEAR(v.value, 576.0 * 4.0 * std::exp(-100.0 / 18.0), 1e-12);
    EXPECT_EQ(v.probability, 1.0);
}

TEST(Bound, DecaysInSourcesWithoutUnderflowInLogSpace) {
    BoundInput b{1.0, 1.0, 1.0, 2.0, 1e9, 4.0, 0.5};
    const auto v = generalization_bound(b);
    EXPECT_LT(v.log_bound, std::log(1e-100));
    EXPECT_TRUE(std::isfinite(v.log_bound));
    // huge polynomial factor with a tiny exponential: finite log where the naive product is inf * 0
    BoundInput big{10.0, 10.0, 10.0, 400.0, 1e7, 4.0, 0.01};
    const auto w = generalization_bound(big);
    EXPECT_TRUE(std::isfinite(w.log_bound));
    EXPECT_NEAR(w.log_bound, 400.0 * std::log(12e3 / 0.01) + std::log(4.0) - 1e7 * 4.0 * 1e-4 / 18.0, 1e-6);
}

TEST(Bound, MatchesDirectFormulaAndMonotonicOnRandomGrid) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        BoundInput b{0.5 + u(rng), 0.5 + u(rng), 0.5 + u(rng), std::floor(1.0 + 5.0 * u(rng)),
                     std::floor(10.0 + 500.0 * u(rng)), std::floor(1.0 + 10.0 * u(rng)), 0.05 + 0.9 * u(rng)};
        const auto v = generalization_bound(b);
        EXPECT_NEAR(v.log_bound, std::log(direct_bound(b)), 1e-9 * std::max(1.0, std::abs(v.log_bound)));
        EXPECT_EQ(v.probability, std::min(1.0, v.value));
        auto step = [&](double BoundInput::*field, double factor) {
            BoundInput c = b;
            c.*field *= factor;
            return generalization_bound(c).log_bound;
        };
        EXPECT_LT(step(&BoundInput::sources, 2.0), v.log_bound);
        EXPECT_LT(step(&BoundInput::epsilon, 1.05), v.log_bound);
        EXPECT_GE(step(&BoundInput::modules, 2.0), v.log_bound);  // 12LHR/eps > 1 on this grid
        EXPECT_GT(step(&BoundInput::radius, 1.5), v.log_bound);
        EXPECT_GT(step(&BoundInput::lipschitz, 1.5), v.log_bound);
        EXPECT_GT(step(&BoundInput::h_bound, 1.5), v.log_bound);
    }
}

TEST(Bound, RejectsNonPositiveInputs) {
    BoundInput b{1.0, 1.0, 1.0, 2.0, 100.0, 4.0, 0.5};
    for (double BoundInput::*f : {&BoundInput::lipschitz, &BoundInput::h_bound, &BoundInput::radius,
                                  &BoundInput::modules, &BoundInput::sources, &BoundInput::batches,
                                  &BoundInput::epsilon}) {
        BoundInput c = b;
        c.*f = 0.0;
        EXPECT_THROW(generalization_bound(c), DomainError);
    }
}

TEST(Toy, ModelMatchesTrainingSetup) {
    const auto m = toy_model(0.0, 1.64);
    EXPECT_EQ(m.spec().layers.front().kind, LayerKind::batchnorm);
    const auto p = nn::predict(m, Tensor({2, 1}, {-0.3, 0.4}));
    EXPECT_GT(p(0, 0), 0.5);  // negative side -> class -1 (index 0)
    EXPECT_GT(p(1, 1), 0.5);
}

TEST(Toy, AccuraciesForTheAlphaGrid) {
    const auto r = toy_experiment(ToyConfig{});
    EXPECT_NEAR(r.running_mean, 0.0, 0.01);
    EXPECT_NEAR(r.running_var, 1.64, 0.02);
    EXPECT_NEAR(r.train_accuracy, 0.89, 0.02);
    std::map<double, double> acc;
    for (const auto& row : r.rows) acc[row.alpha] = row.accuracy;
    EXPECT_NEAR(acc.at(0.0), 0.89, 0.02);
    EXPECT_NEAR(acc.at(1.0), 0.73, 0.02);
    EXPECT_NEAR(acc.at(0.5), 0.83, 0.02);
    EXPECT_NEAR(acc.at(-0.5), 0.92, 0.02);
    for (const auto& row : r.rows) {
        // adapted mean moves linearly from the running mean toward the test mean 2/3
        EXPECT_NEAR(row.adapted_mean, r.running_mean + row.alpha * (2.0 / 3.0 - r.running_mean), 0.02);
    }
}

TEST(AlphaReport, ZeroRatesGiveZeroGroups) {
    const auto man = build_manifest(make_mlp(4, std::vector<std::size_t>{5, 5}, 3));
    const auto rep = alpha_report(AdaptationRates::zeros(man), man);
    EXPECT_EQ(rep.rows.size(), man.num_modules());
    for (const auto& g : rep.groups) {
        EXPECT_EQ(g.mean, 0.0);
        EXPECT_EQ(g.min, 0.0);
        EXPECT_EQ(g.max, 0.0);
        EXPECT_EQ(g.sign, 0);
    }
}

TEST(AlphaReport, GroupsFollowManifest) {
    const auto man = build_manifest(make_mlp(2, std::vector<std::size_t>{3}, 2));
    auto rates = AdaptationRates::zeros(man);
    for (std::size_t l = 0; l < man.num_modules(); ++l) rates.alpha[l] = static_cast<double>(l) - 3.0;
    const auto rep = alpha_report(rates, man);

    std::map<std::string, std::vector<double>> expected;
    for (std::size_t l = 0; l < man.num_modules(); ++l) {
        const auto& e = man[l];
        expected["kind=" + to_string(e.kind)].push_back(rates.alpha[l]);
        expected["role=" + to_string(e.role)].push_back(rates.alpha[l]);
        expected["depth=" + std::to_string(e.depth) + "/kind=" + to_string(e.kind)].push_back(rates.alpha[l]);
    }
    ASSERT_EQ(rep.groups.size(), expected.size());
    for (const auto& g : rep.groups) {
        const auto& v = expected.at(g.key);
        double mean = 0.0;
        for (double a : v) mean += a;
        mean /= static_cast<double>(v.size());
        EXPECT_EQ(g.count, v.size()) << g.key;
        EXPECT_DOUBLE_EQ(g.mean, mean) << g.key;
        EXPECT_EQ(g.min, *std::min_element(v.begin(), v.end()));
        EXPECT_EQ(g.max, *std::max_element(v.begin(), v.end()));
        EXPECT_EQ(g.sign, mean > 0 ? 1 : (mean < 0 ? -1 : 0));
    }
    // layer1 BN running mean / var are modules 2 and 3 -> alphas -1 and 0
    EXPECT_DOUBLE_EQ(rep.group_mean("kind=running_stat"), -0.5);
    EXPECT_THROW(rep.group_mean("kind=nothing"), UsageError);
    EXPECT_EQ(rep.rows_csv().substr(0, 29), "module,kind,role,depth,alpha\n");
    EXPECT_NE(rep.groups_csv().find("kind=running_stat,2,-0.5"), std::string::npos);
    EXPECT_THROW(alpha_report(AdaptationRates{{1.0}, {true}}, man), DimensionError);
}
