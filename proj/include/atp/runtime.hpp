#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atp/adaptation.hpp"
#include "atp/model.hpp"
#include "atp/population.hpp"
#include "atp/tensor.hpp"
#include "json.hpp"

namespace atp::tta {

enum class Mode { batch, online };

/// Test-time adaptation state for one target client. Only ever receives
/// features. Every prediction is made with a model exactly one adaptation
/// step away from w_G.
class AdaptationSession {
public:
    AdaptationSession(const ParameterStore& global, AdaptationRates alpha, Mode mode);

    /// Adapts to `batch` (ATP-batch) or to the running mean of all directions
    /// so far (ATP-online) and returns predictions of the adapted model.
    Tensor adapt_and_predict(const Tensor& batch);

    Mode mode() const noexcept { return mode_; }
    std::size_t steps() const noexcept { return steps_; }
    /// Cumulative moving average of the directions (online mode).
    const std::vector<double>& history() const noexcept { return history_; }
    /// The adapted model used for the last prediction.
    const ParameterStore& last_model() const;

private:
    const ParameterStore* global_;
    AdaptationRates alpha_;
    Mode mode_;
    std::vector<double> history_;
    std::size_t steps_ = 0;
    std::optional<ParameterStore> last_;
};

enum class Method { no_adapt, bn_adapt, tent, em_prior, atp_batch, atp_online };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

/// BN statistics replaced by the current batch statistics (momentum 1).
Tensor baseline_bn_adapt(const ParameterStore& global, const Tensor& batch);

/// Entropy minimization on BN affine parameters only. With `replace_stats`
/// the batch statistics are used (standard); otherwise running statistics.
Tensor baseline_tent(const ParameterStore& global, const Tensor& batch, double lr, std::size_t steps = 1,
                     bool replace_stats = true);

struct EmResult {
    Tensor predictions;
    std::vector<double> prior;
    std::size_t iterations = 0;
};

/// EM label-prior re-estimation on posteriors computed under `train_prior`.
/// Stops when the L1 change of the prior estimate falls below `tol`.
EmResult em_prior_adjust(const Tensor& posteriors, std::span<const double> train_prior, std::size_t max_iterations = 50,
                         double tol = 1e-6);

EmResult baseline_em_prior(const ParameterStore& global, const Tensor& features, std::span<const double> train_prior,
                           std::size_t max_iterations = 50, double tol = 1e-6);

struct EvalOptions {
    std::size_t batch_size = 20;
    double tent_lr = 0.01;
    std::size_t tent_steps = 1;
    std::size_t em_iterations = 50;
    double em_tol = 1e-6;
    std::vector<double> train_prior;  ///< required for em_prior
};

struct BatchRecord {
    std::size_t index = 0;
    std::size_t size = 0;
    double accuracy = 0.0;
    double ce = 0.0;
};

struct ClientReport {
    std::size_t client_id = 0;
    Method method = Method::no_adapt;
    double accuracy = 0.0;
    double ce = 0.0;
    std::vector<BatchRecord> batches;
};

/// Streams the client's data in stored order. Labels are used only here to
/// score predictions; adaptation code receives features alone.
ClientReport evaluate_client(const fedsim::ClientSpec& client, const ParameterStore& global,
                             const AdaptationRates* alpha, Method method, const EvalOptions& options);

nlohmann::json to_json(const ClientReport& r);

struct Summary {
    double mean = 0.0;
    double sd = 0.0;  ///< sample standard deviation (n - 1)
    std::size_t n = 0;
};

Summary summarize(std::span<const double> values);

}  // namespace atp::tta
