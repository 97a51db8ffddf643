#include "atp/runtime.hpp"

#include <cmath>
#include <numeric>

#include "atp/errors.hpp"
#include "atp/nn.hpp"

namespace atp::tta {

AdaptationSession::AdaptationSession(const ParameterStore& global, AdaptationRates alpha, Mode mode)
    : global_(&global), alpha_(std::move(alpha)), mode_(mode) {
    if (alpha_.size() != global.manifest().num_modules()) {
        throw DimensionError("session: alpha has " + std::to_string(alpha_.size()) + " entries for " +
                             std::to_string(global.manifest().num_modules()) + " modules");
    }
}

Tensor AdaptationSession::adapt_and_predict(const Tensor& batch) {
    // directions are always taken at the fixed global model
    auto dir = compute_update_direction(*global_, batch);
    ++steps_;
    if (mode_ == Mode::online) {
        if (history_.empty()) history_.assign(dir.h.size(), 0.0);
        if (history_.size() != dir.h.size()) throw UsageError("session: direction length changed mid-stream");
        const double k = static_cast<double>(steps_);
        for (std::size_t i = 0; i < history_.size(); ++i) {
            history_[i] = ((k - 1.0) / k) * history_[i] + dir.h[i] / k;
        }
        last_ = apply_adaptation(*global_, alpha_.alpha, history_);
    } else {
        last_ = apply_adaptation(*global_, alpha_.alpha, dir.h);
    }
    return nn::predict(*last_, batch, nn::StatsMode::frozen_stats);
}

const ParameterStore& AdaptationSession::last_model() const {
    if (!last_) throw UsageError("session: no batch processed yet");
    return *last_;
}

std::string to_string(Method m) {
    switch (m) {
        case Method::no_adapt: return "no_adapt";
        case Method::bn_adapt: return "bn_adapt";
        case Method::tent: return "tent";
        case Method::em_prior: return "em";
        case Method::atp_batch: return "atp_batch";
        case Method::atp_online: return "atp_online";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    for (auto m : {Method::no_adapt, Method::bn_adapt, Method::tent, Method::em_prior, Method::atp_batch,
                   Method::atp_online}) {
        if (to_string(m) == s) return m;
    }
    throw ConfigError("unknown evaluation method '" + s + "'");
}

Tensor baseline_bn_adapt(const ParameterStore& global, const Tensor& batch) {
    return nn::predict(global, batch, nn::StatsMode::train_stats);
}

Tensor baseline_tent(const ParameterStore& global, const Tensor& batch, double lr, std::size_t steps,
                     bool replace_stats) {
    const auto mode = replace_stats ? nn::StatsMode::train_stats : nn::StatsMode::frozen_stats;
    ParameterStore model = global;
    for (std::size_t s = 0; s < steps && lr != 0.0; ++s) {
        auto fwd = nn::forward(model, batch, mode);
        auto g = nn::backward(model, fwd.cache, nn::LossKind::entropy);
        auto w = model.values();
        for (const auto& e : model.manifest().entries()) {
            if (e.role != ModuleRole::bn_weight && e.role != ModuleRole::bn_bias) continue;
            for (std::size_t i = e.offset; i < e.offset + e.length; ++i) w[i] -= lr * g[i];
        }
    }
    return nn::predict(model, batch, mode);
}

EmResult em_prior_adjust(const Tensor& posteriors, std::span<const double> train_prior, std::size_t max_iterations,
                         double tol) {
    const std::size_t n = posteriors.rows(), c = posteriors.cols();
    if (train_prior.size() != c) throw DimensionError("em: prior length differs from class count");
    for (double p : train_prior) {
        if (!(p > 0.0)) throw DomainError("em: training prior must be strictly positive");
    }
    EmResult out;
    out.prior.assign(train_prior.begin(), train_prior.end());
    out.predictions = posteriors;
    if (n == 0) return out;
    auto reweight = [&](const std::vector<double>& q) {
        for (std::size_t r = 0; r < n; ++r) {
            double z = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                out.predictions(r, j) = posteriors(r, j) * q[j] / train_prior[j];
                z += out.predictions(r, j);
            }
            if (z > 0.0) {
                for (std::size_t j = 0; j < c; ++j) out.predictions(r, j) /= z;
            }
        }
    };
    for (std::size_t it = 0; it < max_iterations; ++it) {
        std::vector<double> q(c, 0.0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) q[j] += out.predictions(r, j);
        double l1 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            q[j] /= static_cast<double>(n);
            l1 += std::abs(q[j] - out.prior[j]);
        }
        out.prior = q;
        reweight(out.prior);
        out.iterations = it + 1;
        if (l1 < tol) break;
    }
    return out;
}

EmResult baseline_em_prior(const ParameterStore& global, const Tensor& features, std::span<const double> train_prior,
                           std::size_t max_iterations, double tol) {
    return em_prior_adjust(nn::predict(global, features, nn::StatsMode::frozen_stats), train_prior, max_iterations,
                           tol);
}

ClientReport evaluate_client(const fedsim::ClientSpec& client, const ParameterStore& global,
                             const AdaptationRates* alpha, Method method, const EvalOptions& options) {
    ClientReport report;
    report.client_id = client.id;
    report.method = method;
    const auto batches = fedsim::unlabeled_batches(client.data, options.batch_size);
    if (batches.empty()) return report;

    std::vector<Tensor> predictions(batches.size());
    switch (method) {
        case Method::no_adapt:
            for (std::size_t k = 0; k < batches.size(); ++k) predictions[k] = nn::predict(global, batches[k]);
            break;
        case Method::bn_adapt:
            for (std::size_t k = 0; k < batches.size(); ++k) predictions[k] = baseline_bn_adapt(global, batches[k]);
            break;
        case Method::tent:
            for (std::size_t k = 0; k < batches.size(); ++k) {
                predictions[k] = baseline_tent(global, batches[k], options.tent_lr, options.tent_steps);
            }
            break;
        case Method::em_prior: {
            if (options.train_prior.empty()) throw UsageError("evaluate: EM baseline needs the training label prior");
            const Tensor all = concat_rows(batches);
            const auto em = baseline_em_prior(global, all, options.train_prior, options.em_iterations, options.em_tol);
            for (std::size_t k = 0; k < batches.size(); ++k) {
                predictions[k] = em.predictions.slice_rows(k * options.batch_size, options.batch_size);
            }
            break;
        }
        case Method::atp_batch:
        case Method::atp_online: {
            if (!alpha) throw UsageError("evaluate: ATP needs adaptation rates");
            AdaptationSession session(global, *alpha, method == Method::atp_online ? Mode::online : Mode::batch);
            for (std::size_t k = 0; k < batches.size(); ++k) predictions[k] = session.adapt_and_predict(batches[k]);
            break;
        }
    }

    double hits = 0.0, ce = 0.0;
    std::size_t total = 0;
    for (std::size_t k = 0; k < batches.size(); ++k) {
        const std::span<const int> labels(client.data.y.data() + k * options.batch_size, options.batch_size);
        BatchRecord rec;
        rec.index = k;
        rec.size = options.batch_size;
        rec.accuracy = nn::accuracy(nn::argmax_rows(predictions[k]), labels);
        rec.ce = nn::cross_entropy(predictions[k], labels);
        hits += rec.accuracy * static_cast<double>(rec.size);
        ce += rec.ce * static_cast<double>(rec.size);
        total += rec.size;
        report.batches.push_back(rec);
    }
    report.accuracy = hits / static_cast<double>(total);
    report.ce = ce / static_cast<double>(total);
    return report;
}

nlohmann::json to_json(const ClientReport& r) {
    nlohmann::json batches = nlohmann::json::array();
    for (const auto& b : r.batches) {
        batches.push_back({{"batch", b.index}, {"size", b.size}, {"accuracy", b.accuracy}, {"ce", b.ce}});
    }
    return {{"client", r.client_id},
            {"method", to_string(r.method)},
            {"mode", r.method == Method::atp_online ? "online" : "batch"},
            {"accuracy", r.accuracy},
            {"ce", r.ce},
            {"batches", batches}};
}

Summary summarize(std::span<const double> values) {
    Summary s;
    s.n = values.size();
    if (values.empty()) return s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
    if (s.n > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    }
    return s;
}

}  // namespace atp::tta
