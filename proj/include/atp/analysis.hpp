#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "atp/adaptation.hpp"
#include "atp/model.hpp"
#include "atp/tensor.hpp"

namespace atp::analysis {

// -- label-shift calibration of the last layer ------------------------------

/// Adds log(q_c / p_c) to the bias of the final affine layer. Priors must be
/// strictly positive (DomainError otherwise).
ParameterStore calibrate_last_layer(const ParameterStore& model, std::span<const double> p_prior,
                                    std::span<const double> q_prior);

/// affine + softmax model whose output is exactly the Bayes posterior of an
/// isotropic Gaussian mixture with the given class means, std and prior.
ParameterStore calibrated_gaussian_classifier(const Tensor& class_means, double std, std::span<const double> prior);

/// Bayes posterior of the same mixture evaluated directly from the densities.
Tensor gaussian_mixture_posterior(const Tensor& x, const Tensor& class_means, double std,
                                  std::span<const double> prior);

struct CalibrationCheck {
    double max_posterior_deviation = 0.0;  ///< calibrated model vs Bayes posterior under q
    double model_ce = 0.0;                 ///< Monte-Carlo CE of the calibrated model under q
    double bayes_ce = 0.0;                 ///< Monte-Carlo CE of the Bayes posterior under q
    double uncalibrated_ce = 0.0;
    std::size_t samples = 0;
};

/// Samples `samples` points from the mixture under q and compares the
/// calibrated model with the Bayes posterior.
CalibrationCheck label_shift_calibration_check(const Tensor& class_means, double std, std::span<const double> p_prior,
                                               std::span<const double> q_prior, std::size_t samples,
                                               std::uint64_t seed);

// -- BN alignment under feature shift ---------------------------------------

enum class FeatureTransform { affine, cube };

struct AlignmentReport {
    double adapted_mean = 0.0;
    double adapted_std = 0.0;
    double expected_mean = 0.0;  ///< r * mu_p + delta
    double expected_std = 0.0;   ///< r * sigma_p
    double ks = 0.0;             ///< normalized target vs normalized source
    std::size_t samples = 0;
};

/// Source features ~ N(source_mean, source_std^2) are normalized with the
/// source statistics; target features (the transform of the same draws) are
/// normalized with statistics re-estimated on the target sample.
AlignmentReport bn_align_check(double source_mean, double source_std, double scale, double offset,
                               std::size_t samples, std::uint64_t seed,
                               FeatureTransform transform = FeatureTransform::affine);

/// Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|.
double ks_statistic(std::vector<double> a, std::vector<double> b);

// -- generalization bound ----------------------------------------------------

struct BoundInput {
    double lipschitz = 1.0;  ///< L
    double h_bound = 1.0;    ///< H
    double radius = 1.0;     ///< R
    double modules = 1.0;    ///< d
    double sources = 1.0;    ///< N
    double batches = 1.0;    ///< K
    double epsilon = 0.1;
};

struct BoundValue {
    double log_bound = 0.0;    ///< natural log of the right-hand side
    double value = 0.0;        ///< exp(log_bound); may exceed 1 or underflow to 0
    double probability = 0.0;  ///< min(1, value)
};

/// (12 L H R / eps)^d * 4 exp(-N K eps^2 / (2 (sqrt K + 1)^2)), evaluated in
/// log space. Throws DomainError for non-positive inputs.
BoundValue generalization_bound(const BoundInput& b);

// -- toy experiment: one BN layer under label shift ---------------------------

struct ToyConfig {
    double negative_mean = -1.0;
    double positive_mean = 1.0;
    double class_std = 0.8;
    double train_prior = 0.5;      ///< Pr(y = +1) during training
    double test_prior = 5.0 / 6.0; ///< Pr(y = +1) at test time
    std::vector<double> alphas{1.0, 0.5, 0.0, -0.5};
    std::size_t samples = 100000;
    std::uint64_t seed = 0;
};

struct ToyRow {
    double alpha = 0.0;
    double accuracy = 0.0;
    double adapted_mean = 0.0;
    double adapted_var = 0.0;
};

struct ToyResult {
    double running_mean = 0.0;
    double running_var = 0.0;
    double train_accuracy = 0.0;
    std::vector<ToyRow> rows;
};

/// Single-feature BN model (running stats from training data, gamma = 1,
/// beta = 0) whose running statistics are moved toward the test batch
/// statistics with rate alpha.
ToyResult toy_experiment(const ToyConfig& cfg);

ParameterStore toy_model(double running_mean, double running_var);

// -- adaptation-rate report ----------------------------------------------------

struct AlphaRow {
    std::string module;
    ModuleKind kind;
    ModuleRole role;
    std::size_t depth;
    double alpha;
};

struct AlphaGroup {
    std::string key;  ///< "kind=<k>", "role=<r>" or "depth=<n>/kind=<k>"
    std::size_t count = 0;
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
    int sign = 0;  ///< sign of the mean
};

struct AlphaReport {
    std::vector<AlphaRow> rows;
    std::vector<AlphaGroup> groups;

    /// Mean over the group named `key`; throws UsageError if absent.
    double group_mean(const std::string& key) const;
    std::string rows_csv() const;
    std::string groups_csv() const;
};

AlphaReport alpha_report(const AdaptationRates& alpha, const ModuleManifest& manifest);

}  // namespace atp::analysis
