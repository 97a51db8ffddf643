#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "atp/adaptation.hpp"
#include "atp/model.hpp"
#include "atp/population.hpp"

namespace atp::fedsim {

/// How BN layers behave while the global model is pretrained.
enum class BnTraining {
    local_batch,  ///< batch statistics in every local step; running stats by momentum
    global_stats  ///< normalize with population statistics re-estimated by the server each round
};

std::string to_string(BnTraining m);
BnTraining bn_training_from_string(const std::string& s);

struct PretrainConfig {
    std::size_t rounds = 100;
    std::size_t cohort = 10;
    double lr = 0.05;
    std::size_t batch_size = 20;
    std::size_t local_epochs = 1;
    double bn_momentum = 0.1;
    BnTraining bn_mode = BnTraining::global_stats;
    std::uint64_t seed = 0;
};

struct PretrainRound {
    std::size_t round = 0;
    double train_loss = 0.0;  ///< sample-weighted mean local training loss
};

struct PretrainResult {
    ParameterStore model;
    std::vector<PretrainRound> rounds;
};

/// FedAvg over the sources' training splits, starting from `init`.
/// Throws NumericError (with the round index) when the loss diverges.
PretrainResult fedavg_pretrain(std::span<const ClientSpec> sources, const ParameterStore& init,
                               const PretrainConfig& config, std::size_t jobs = 1);

/// Sets every BN running mean/variance to the pooled statistics of the
/// clients' training data, layer by layer, as a server would by averaging
/// per-client first and second moments.
void estimate_global_bn_stats(ParameterStore& model, std::span<const ClientSpec> clients,
                              std::span<const std::size_t> which);

/// Which part of a source client's data alpha is learned on.
enum class AtpSplit { validation, train, all };

struct AtpConfig {
    std::size_t rounds = 100;
    std::size_t cohort = 10;
    double eta = 0.1;
    std::size_t batch_size = 20;
    std::size_t local_epochs = 1;
    AlphaMask mask = AlphaMask::all;
    bool sqrt_normalize = true;
    bool shuffle = true;
    AtpSplit split = AtpSplit::validation;
    std::uint64_t seed = 0;
};

std::string to_string(AtpSplit s);
AtpSplit atp_split_from_string(const std::string& s);

/// Scalar traffic of ATP training. Counts are in scalars; bytes assume float64.
struct CommLedger {
    std::size_t num_params = 0;   ///< D
    std::size_t num_modules = 0;  ///< d
    std::size_t rounds = 0;       ///< T
    std::size_t cohort = 0;
    std::size_t num_sources = 0;
    std::size_t model_broadcast_scalars = 0;  ///< D per source, once
    std::size_t alpha_scalars_exchanged = 0;  ///< download + upload of alpha per participant per round

    /// D + 2Td: one client that takes part in every round.
    std::size_t atp_scalars_per_path() const { return num_params + 2 * rounds * num_modules; }
    /// 2TD: the same client under FedAvg, which ships the full model both ways.
    std::size_t fedavg_scalars_per_path() const { return 2 * rounds * num_params; }
    std::size_t bytes_model_broadcast() const { return model_broadcast_scalars * sizeof(double); }
    std::size_t bytes_alpha_exchanged() const { return alpha_scalars_exchanged * sizeof(double); }
};

CommLedger make_ledger(std::size_t num_params, std::size_t num_modules, std::size_t rounds, std::size_t cohort,
                       std::size_t num_sources);

struct ClientRoundResult {
    AdaptationRates alpha;
    double mean_ce = 0.0;        ///< post-adaptation CE on the batches seen, before each alpha step
    double mean_accuracy = 0.0;
    std::size_t batches = 0;
};

/// Local ATP training on one source client; w_G is only read.
ClientRoundResult client_train_round(const ClientSpec& client, const ParameterStore& global,
                                     const AdaptationRates& alpha_in, const AtpConfig& config,
                                     std::size_t round = 0);

/// Coordinate-wise mean, accumulated in list order.
std::vector<double> server_aggregate(std::span<const std::vector<double>> alphas);

struct AtpRound {
    std::size_t round = 0;
    double mean_ce = 0.0;
    double mean_accuracy = 0.0;
    double alpha_norm = 0.0;
};

struct AtpResult {
    AdaptationRates alpha;
    std::vector<AtpRound> rounds;
    CommLedger ledger;
};

AtpResult atp_train(std::span<const ClientSpec> sources, const ParameterStore& global, const AtpConfig& config,
                    std::size_t jobs = 1);

/// Cohort of `cohort` distinct indices out of n for a round, deterministic in (seed, tag, round).
std::vector<std::size_t> sample_cohort(std::size_t n, std::size_t cohort, std::uint64_t seed, std::uint64_t tag,
                                       std::size_t round);

}  // namespace atp::fedsim
