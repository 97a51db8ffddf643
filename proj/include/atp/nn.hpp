#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "atp/model.hpp"
#include "atp/tensor.hpp"

namespace atp::nn {

/// train_stats normalizes every BN layer with the statistics of the current
/// batch and reports them; frozen_stats uses the stored running statistics.
enum class StatsMode { train_stats, frozen_stats };

enum class LossKind { cross_entropy, entropy };

/// Probability floor used when losses are evaluated on supplied probabilities.
inline constexpr double kProbFloor = 1e-12;

/// Per-feature batch mean and biased (1/B) variance of a BN layer's input.
struct BatchStats {
    std::size_t layer;
    std::vector<double> mean;
    std::vector<double> var;
};

struct BnCache {
    Tensor xhat;
    std::vector<double> inv_std;
    std::vector<bool> var_clamped;  ///< frozen mode: stored variance was negative
};

/// Intermediates of one forward pass. Only valid for the parameter values it
/// was produced from; backward checks this through a checksum.
struct ForwardCache {
    StatsMode mode = StatsMode::frozen_stats;
    std::uint64_t model_checksum = 0;
    std::size_t batch_size = 0;
    std::vector<Tensor> inputs;    ///< input of each layer
    std::vector<BnCache> bn;       ///< indexed like `inputs`; empty for non-BN layers
    Tensor logits;
    Tensor log_probs;
    std::vector<BatchStats> batch_stats;  ///< train_stats mode only, in layer order
};

struct ForwardResult {
    Tensor predictions;
    ForwardCache cache;
};

ForwardResult forward(const ParameterStore& model, const Tensor& batch, StatsMode mode);

/// Forward without keeping the cache.
Tensor predict(const ParameterStore& model, const Tensor& batch, StatsMode mode = StatsMode::frozen_stats);

/// Row-wise argmax; ties go to the lowest index.
std::vector<int> argmax_rows(const Tensor& predictions);

double accuracy(std::span<const int> predicted, std::span<const int> labels);

/// Mean cross-entropy of probability rows against integer labels. Probabilities
/// below kProbFloor at the true label are clamped; their count is written to
/// `clamped` when given.
double cross_entropy(const Tensor& predictions, std::span<const int> labels, std::size_t* clamped = nullptr);

/// Mean Shannon entropy of probability rows with 0 log 0 = 0.
double entropy_loss(const Tensor& predictions);

/// Gradient of the chosen loss with respect to the whole flat parameter
/// vector. Running-statistic slices are zero in train_stats mode (the output
/// does not depend on them) and hold the exact derivative in frozen_stats mode.
/// The loss gradient is taken through the logits.
std::vector<double> backward(const ParameterStore& model, const ForwardCache& cache, LossKind loss,
                             std::span<const int> labels = {});

}  // namespace atp::nn
