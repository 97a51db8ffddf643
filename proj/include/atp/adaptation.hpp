#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "atp/model.hpp"
#include "atp/tensor.hpp"

namespace atp {

/// Which module kinds receive a learnable rate. params_only and stats_only
/// are the two ablations.
enum class AlphaMask { all, params_only, stats_only };

std::string to_string(AlphaMask m);
AlphaMask alpha_mask_from_string(const std::string& s);

/// One scalar adaptation rate per module. Modules with mask == false keep a
/// rate of exactly zero.
struct AdaptationRates {
    std::vector<double> alpha;
    std::vector<bool> mask;

    static AdaptationRates zeros(const ModuleManifest& manifest, AlphaMask which = AlphaMask::all);

    std::size_t size() const noexcept { return alpha.size(); }
    double norm() const;
};

/// Unsupervised update direction h for one batch, length D. Trainable slices
/// hold the negative entropy gradient, running-statistic slices hold
/// batch statistic minus stored statistic.
struct UpdateDirection {
    std::vector<double> h;
    double entropy = 0.0;  ///< entropy of the global model on the batch (train-stats forward)
};

/// Labels are never read: the function only receives features.
/// Throws DegenerateBatchError for batches with fewer than 2 rows.
UpdateDirection compute_update_direction(const ParameterStore& global, const Tensor& batch);

/// w = w_G + (A alpha) * h. `global` is not modified.
ParameterStore apply_adaptation(const ParameterStore& global, std::span<const double> alpha,
                                std::span<const double> h);
inline ParameterStore apply_adaptation(const ParameterStore& global, const AdaptationRates& rates,
                                       const UpdateDirection& dir) {
    return apply_adaptation(global, rates.alpha, dir.h);
}

struct AlphaGradient {
    std::vector<double> grad;  ///< one entry per module
    double loss = 0.0;         ///< cross-entropy of the adapted model on the batch
    double accuracy = 0.0;
};

/// Gradient of the cross-entropy of f(X; w_k) with respect to alpha:
/// module-wise inner products <h^[l], dCE/dw_k^[l]>, each divided by
/// sqrt(module length) when `sqrt_normalize` is set. First order only.
AlphaGradient alpha_gradient(const ParameterStore& adapted, std::span<const double> h, const Tensor& batch,
                             std::span<const int> labels, bool sqrt_normalize = true);

/// alpha <- alpha - eta * grad on unmasked coordinates.
AdaptationRates refine_alpha(const AdaptationRates& rates, std::span<const double> grad, double eta);

/// JSON array of {module, kind, alpha, learnable}.
void save_alpha(const AdaptationRates& rates, const ModuleManifest& manifest, const std::filesystem::path& path);
AdaptationRates load_alpha(const ModuleManifest& manifest, const std::filesystem::path& path);

}  // namespace atp
