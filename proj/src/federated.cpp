#include "atp/federated.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "atp/errors.hpp"
#include "atp/nn.hpp"
#include "atp/parallel.hpp"

namespace atp::fedsim {

std::string to_string(BnTraining m) { return m == BnTraining::local_batch ? "local_batch" : "global_stats"; }

BnTraining bn_training_from_string(const std::string& s) {
    if (s == "local_batch") return BnTraining::local_batch;
    if (s == "global_stats") return BnTraining::global_stats;
    throw ConfigError("pretrain.bn_mode: unknown value '" + s + "' (expected local_batch or global_stats)");
}

std::string to_string(AtpSplit s) {
    switch (s) {
        case AtpSplit::validation: return "validation";
        case AtpSplit::train: return "train";
        case AtpSplit::all: return "all";
    }
    return "?";
}

AtpSplit atp_split_from_string(const std::string& s) {
    for (auto v : {AtpSplit::validation, AtpSplit::train, AtpSplit::all}) {
        if (to_string(v) == s) return v;
    }
    throw ConfigError("atp.split: unknown value '" + s + "' (expected validation, train or all)");
}

std::vector<std::size_t> sample_cohort(std::size_t n, std::size_t cohort, std::uint64_t seed, std::uint64_t tag,
                                       std::size_t round) {
    if (cohort == 0 || cohort > n) {
        throw ConfigError("cohort size " + std::to_string(cohort) + " must lie in [1, " + std::to_string(n) + "]");
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = make_rng(seed, tag, {round});
    for (std::size_t i = 0; i < cohort; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(cohort);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// ---------------------------------------------------------------------------
// FedAvg pretraining

namespace {

struct LocalUpdate {
    ParameterStore model;
    double loss_sum = 0.0;
    std::size_t batches = 0;
};

LocalUpdate local_train(const ClientSpec& client, const ParameterStore& global, const PretrainConfig& cfg,
                        std::size_t round) {
    LocalUpdate out{global};
    const Dataset data = client.train();
    const auto& manifest = global.manifest();
    const auto mode =
        cfg.bn_mode == BnTraining::local_batch ? nn::StatsMode::train_stats : nn::StatsMode::frozen_stats;
    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        Rng rng = make_rng(cfg.seed, stream::pretrain_shuffle, {round, client.id, epoch});
        for (const auto& batch : make_batches(data, cfg.batch_size, &rng)) {
            auto fwd = nn::forward(out.model, batch.x, mode);
            out.loss_sum += nn::cross_entropy(fwd.predictions, batch.y);
            ++out.batches;
            const auto grad = nn::backward(out.model, fwd.cache, nn::LossKind::cross_entropy, batch.y);
            auto w = out.model.values();
            for (const auto& e : manifest.entries()) {
                if (e.kind != ModuleKind::trainable) continue;
                for (std::size_t i = e.offset; i < e.offset + e.length; ++i) w[i] -= cfg.lr * grad[i];
            }
            if (mode == nn::StatsMode::train_stats) {
                for (const auto& e : manifest.entries()) {
                    if (e.kind != ModuleKind::running_stat) continue;
                    for (const auto& s : fwd.cache.batch_stats) {
                        if (s.layer != e.layer) continue;
                        const auto& src = e.role == ModuleRole::bn_running_mean ? s.mean : s.var;
                        for (std::size_t i = 0; i < e.length; ++i) {
                            double& v = w[e.offset + i];
                            v = (1.0 - cfg.bn_momentum) * v + cfg.bn_momentum * src[i];
                        }
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace

void estimate_global_bn_stats(ParameterStore& model, std::span<const ClientSpec> clients,
                              std::span<const std::size_t> which) {
    const auto& spec = model.spec();
    std::vector<Dataset> data;
    for (auto i : which) {
        auto d = clients[i].train();
        if (d.size() > 0) data.push_back(std::move(d));
    }
    if (data.empty()) return;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        if (spec.layers[li].kind != LayerKind::batchnorm) continue;
        const std::size_t f = spec.layers[li].output_dim;
        // Chan et al. pairwise combination of per-client (n, mean, M2)
        double n = 0.0;
        std::vector<double> mean(f, 0.0), m2(f, 0.0);
        for (const auto& d : data) {
            auto fwd = nn::forward(model, d.x, nn::StatsMode::frozen_stats);
            const Tensor& x = fwd.cache.inputs[li];
            const double nk = static_cast<double>(x.rows());
            for (std::size_t j = 0; j < f; ++j) {
                double mk = 0.0;
                for (std::size_t r = 0; r < x.rows(); ++r) mk += x(r, j);
                mk /= nk;
                double m2k = 0.0;
                for (std::size_t r = 0; r < x.rows(); ++r) m2k += (x(r, j) - mk) * (x(r, j) - mk);
                const double delta = mk - mean[j];
                const double tot = n + nk;
                mean[j] += delta * nk / tot;
                m2[j] += m2k + delta * delta * n * nk / tot;
            }
            n += nk;
        }
        auto rm = model.module("layer" + std::to_string(li) + ".bn.running_mean");
        auto rv = model.module("layer" + std::to_string(li) + ".bn.running_var");
        for (std::size_t j = 0; j < f; ++j) {
            rm[j] = mean[j];
            rv[j] = m2[j] / n;
        }
    }
}

PretrainResult fedavg_pretrain(std::span<const ClientSpec> sources, const ParameterStore& init,
                               const PretrainConfig& config, std::size_t jobs) {
    if (sources.empty()) throw ConfigError("pretrain: no source clients");
    if (config.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
    if (!(config.lr >= 0.0)) throw ConfigError("pretrain.lr must be >= 0");
    PretrainResult result{init, {}};
    ParameterStore& global = result.model;
    const bool has_bn = std::any_of(global.spec().layers.begin(), global.spec().layers.end(),
                                    [](const LayerSpec& l) { return l.kind == LayerKind::batchnorm; });

    for (std::size_t round = 1; round <= config.rounds; ++round) {
        const auto cohort = sample_cohort(sources.size(), config.cohort, config.seed, stream::pretrain_cohort, round);
        if (has_bn && config.bn_mode == BnTraining::global_stats) {
            estimate_global_bn_stats(global, sources, cohort);
        }
        std::vector<LocalUpdate> updates(cohort.size(), LocalUpdate{global});
        try {
            parallel_for(cohort.size(), jobs,
                         [&](std::size_t i) { updates[i] = local_train(sources[cohort[i]], global, config, round); });
        } catch (const NumericError& e) {
            throw NumericError("pretrain: divergence in round " + std::to_string(round) + ": " + e.what());
        }

        double total_n = 0.0, loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            total_n += static_cast<double>(sources[cohort[i]].train_count);
            loss += updates[i].loss_sum;
            batches += updates[i].batches;
        }
        if (batches == 0) throw ConfigError("pretrain: no client has a full training batch");
        std::vector<double> avg(global.size(), 0.0);
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            const double wgt = static_cast<double>(sources[cohort[i]].train_count) / total_n;
            const auto v = updates[i].model.values();
            for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += wgt * v[k];
        }
        std::copy(avg.begin(), avg.end(), global.values().begin());

        const double round_loss = loss / static_cast<double>(batches);
        if (!std::isfinite(round_loss)) {
            throw NumericError("pretrain: loss diverged in round " + std::to_string(round));
        }
        result.rounds.push_back({round, round_loss});
    }
    if (has_bn && config.bn_mode == BnTraining::global_stats && config.rounds > 0) {
        std::vector<std::size_t> all(sources.size());
        std::iota(all.begin(), all.end(), 0);
        estimate_global_bn_stats(global, sources, all);
    }
    return result;
}

// ---------------------------------------------------------------------------
// ATP training

CommLedger make_ledger(std::size_t num_params, std::size_t num_modules, std::size_t rounds, std::size_t cohort,
                       std::size_t num_sources) {
    CommLedger l;
    l.num_params = num_params;
    l.num_modules = num_modules;
    l.rounds = rounds;
    l.cohort = cohort;
    l.num_sources = num_sources;
    l.model_broadcast_scalars = num_params * num_sources;
    l.alpha_scalars_exchanged = 2 * rounds * num_modules * cohort;
    return l;
}

namespace {

Dataset atp_data(const ClientSpec& client, AtpSplit split) {
    switch (split) {
        case AtpSplit::validation: return client.validation();
        case AtpSplit::train: return client.train();
        case AtpSplit::all: return client.data;
    }
    return client.data;
}

}  // namespace

ClientRoundResult client_train_round(const ClientSpec& client, const ParameterStore& global,
                                     const AdaptationRates& alpha_in, const AtpConfig& config, std::size_t round) {
    if (client.role != Role::source) throw UsageError("client_train_round: client " + std::to_string(client.id) +
                                                      " is not a source client");
    const Dataset data = atp_data(client, config.split);
    if (data.size() < config.batch_size || config.batch_size == 0) {
        throw ConfigError("client_train_round: client " + std::to_string(client.id) + " has no full batch of size " +
                          std::to_string(config.batch_size));
    }
    ClientRoundResult out{alpha_in};
    double ce = 0.0, acc = 0.0;
    for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
        Rng rng = make_rng(config.seed, stream::atp_shuffle, {round, client.id, epoch});
        for (const auto& batch : make_batches(data, config.batch_size, config.shuffle ? &rng : nullptr)) {
            const auto dir = compute_update_direction(global, batch.x);
            const auto adapted = apply_adaptation(global, out.alpha, dir);
            const auto g = alpha_gradient(adapted, dir.h, batch.x, batch.y, config.sqrt_normalize);
            out.alpha = refine_alpha(out.alpha, g.grad, config.eta);
            ce += g.loss;
            acc += g.accuracy;
            ++out.batches;
        }
    }
    if (out.batches > 0) {
        out.mean_ce = ce / static_cast<double>(out.batches);
        out.mean_accuracy = acc / static_cast<double>(out.batches);
    }
    return out;
}

std::vector<double> server_aggregate(std::span<const std::vector<double>> alphas) {
    if (alphas.empty()) throw DimensionError("server_aggregate: no client rates");
    const std::size_t d = alphas.front().size();
    std::vector<double> sum(d, 0.0);
    for (const auto& a : alphas) {
        if (a.size() != d) throw DimensionError("server_aggregate: clients sent rates of different lengths");
        for (std::size_t l = 0; l < d; ++l) sum[l] += a[l];
    }
    for (double& s : sum) s /= static_cast<double>(alphas.size());
    return sum;
}

AtpResult atp_train(std::span<const ClientSpec> sources, const ParameterStore& global, const AtpConfig& config,
                    std::size_t jobs) {
    if (sources.empty()) throw ConfigError("atp: no source clients");
    if (config.cohort > sources.size()) {
        throw ConfigError("atp.cohort (" + std::to_string(config.cohort) + ") exceeds the number of sources (" +
                          std::to_string(sources.size()) + ")");
    }
    if (!(config.eta >= 0.0)) throw ConfigError("atp.eta must be >= 0");
    AtpResult result;
    result.alpha = AdaptationRates::zeros(global.manifest(), config.mask);
    result.ledger = make_ledger(global.size(), global.manifest().num_modules(), config.rounds, config.cohort,
                                sources.size());

    for (std::size_t round = 1; round <= config.rounds; ++round) {
        const auto cohort = sample_cohort(sources.size(), config.cohort, config.seed, stream::atp_cohort, round);
        std::vector<ClientRoundResult> local(cohort.size());
        parallel_for(cohort.size(), jobs, [&](std::size_t i) {
            local[i] = client_train_round(sources[cohort[i]], global, result.alpha, config, round);
        });
        std::vector<std::vector<double>> alphas;
        alphas.reserve(local.size());
        double ce = 0.0, acc = 0.0, nb = 0.0;
        for (const auto& r : local) {
            alphas.push_back(r.alpha.alpha);
            ce += r.mean_ce * static_cast<double>(r.batches);
            acc += r.mean_accuracy * static_cast<double>(r.batches);
            nb += static_cast<double>(r.batches);
        }
        result.alpha.alpha = server_aggregate(alphas);
        for (double a : result.alpha.alpha) {
            if (!std::isfinite(a)) throw NumericError("atp: adaptation rates diverged in round " + std::to_string(round));
        }
        result.rounds.push_back({round, ce / nb, acc / nb, result.alpha.norm()});
    }
    return result;
}

}  // namespace atp::fedsim
