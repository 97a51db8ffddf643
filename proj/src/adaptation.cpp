#include "atp/adaptation.hpp"

#include <cmath>
#include <fstream>

#include "atp/errors.hpp"
#include "atp/nn.hpp"
#include "json.hpp"

namespace atp {

std::string to_string(AlphaMask m) {
    switch (m) {
        case AlphaMask::all: return "all";
        case AlphaMask::params_only: return "params";
        case AlphaMask::stats_only: return "stats";
    }
    return "?";
}

AlphaMask alpha_mask_from_string(const std::string& s) {
    if (s == "all") return AlphaMask::all;
    if (s == "params") return AlphaMask::params_only;
    if (s == "stats") return AlphaMask::stats_only;
    throw ConfigError("unknown alpha mask '" + s + "' (expected all, params or stats)");
}

AdaptationRates AdaptationRates::zeros(const ModuleManifest& manifest, AlphaMask which) {
    AdaptationRates r;
    r.alpha.assign(manifest.num_modules(), 0.0);
    r.mask.resize(manifest.num_modules());
    for (std::size_t l = 0; l < manifest.num_modules(); ++l) {
        const bool trainable = manifest[l].kind == ModuleKind::trainable;
        r.mask[l] = which == AlphaMask::all || (which == AlphaMask::params_only && trainable) ||
                    (which == AlphaMask::stats_only && !trainable);
    }
    return r;
}

double AdaptationRates::norm() const {
    double s = 0.0;
    for (double a : alpha) s += a * a;
    return std::sqrt(s);
}

UpdateDirection compute_update_direction(const ParameterStore& global, const Tensor& batch) {
    if (batch.rank() == 2 && batch.rows() < 2) {
        throw DegenerateBatchError("update direction: batch statistics need at least 2 samples");
    }
    auto fwd = nn::forward(global, batch, nn::StatsMode::train_stats);
    auto grad = nn::backward(global, fwd.cache, nn::LossKind::entropy);

    UpdateDirection dir;
    dir.entropy = nn::entropy_loss(fwd.predictions);
    dir.h.resize(global.size());
    const auto& manifest = global.manifest();
    const auto w = global.values();
    for (const auto& e : manifest.entries()) {
        if (e.kind == ModuleKind::trainable) {
            for (std::size_t i = 0; i < e.length; ++i) dir.h[e.offset + i] = -grad[e.offset + i];
            continue;
        }
        const nn::BatchStats* stats = nullptr;
        for (const auto& s : fwd.cache.batch_stats) {
            if (s.layer == e.layer) stats = &s;
        }
        if (!stats) throw UsageError("update direction: no batch statistics for module '" + e.name + "'");
        const auto& src = e.role == ModuleRole::bn_running_mean ? stats->mean : stats->var;
        for (std::size_t i = 0; i < e.length; ++i) dir.h[e.offset + i] = src[i] - w[e.offset + i];
    }
    return dir;
}

ParameterStore apply_adaptation(const ParameterStore& global, std::span<const double> alpha,
                                std::span<const double> h) {
    const auto& manifest = global.manifest();
    if (alpha.size() != manifest.num_modules()) {
        throw DimensionError("apply_adaptation: alpha has " + std::to_string(alpha.size()) + " entries for " +
                             std::to_string(manifest.num_modules()) + " modules");
    }
    if (h.size() != global.size()) throw DimensionError("apply_adaptation: direction length differs from model");
    ParameterStore out = global;
    auto w = out.values();
    for (std::size_t l = 0; l < manifest.num_modules(); ++l) {
        const double a = alpha[l];
        if (a == 0.0) continue;  // keeps w_G bit-identical
        const auto& e = manifest[l];
        for (std::size_t i = e.offset; i < e.offset + e.length; ++i) w[i] += a * h[i];
    }
    return out;
}

AlphaGradient alpha_gradient(const ParameterStore& adapted, std::span<const double> h, const Tensor& batch,
                             std::span<const int> labels, bool sqrt_normalize) {
    if (h.size() != adapted.size()) throw UsageError("alpha_gradient: direction does not match the model");
    auto fwd = nn::forward(adapted, batch, nn::StatsMode::frozen_stats);
    auto g = nn::backward(adapted, fwd.cache, nn::LossKind::cross_entropy, labels);

    AlphaGradient out;
    out.loss = nn::cross_entropy(fwd.predictions, labels);
    out.accuracy = nn::accuracy(nn::argmax_rows(fwd.predictions), labels);
    const auto& manifest = adapted.manifest();
    out.grad.resize(manifest.num_modules());
    for (std::size_t l = 0; l < manifest.num_modules(); ++l) {
        const auto& e = manifest[l];
        double dot = 0.0;
        for (std::size_t i = e.offset; i < e.offset + e.length; ++i) dot += h[i] * g[i];
        out.grad[l] = sqrt_normalize ? dot / std::sqrt(static_cast<double>(e.length)) : dot;
    }
    return out;
}

AdaptationRates refine_alpha(const AdaptationRates& rates, std::span<const double> grad, double eta) {
    if (grad.size() != rates.alpha.size()) throw DimensionError("refine_alpha: gradient length mismatch");
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw DomainError("refine_alpha: learning rate must be >= 0");
    AdaptationRates out = rates;
    for (std::size_t l = 0; l < out.alpha.size(); ++l) {
        if (out.mask[l]) out.alpha[l] -= eta * grad[l];
    }
    return out;
}

void save_alpha(const AdaptationRates& rates, const ModuleManifest& manifest, const std::filesystem::path& path) {
    if (rates.size() != manifest.num_modules()) throw DimensionError("save_alpha: alpha/manifest mismatch");
    nlohmann::json doc = nlohmann::json::array();
    for (std::size_t l = 0; l < rates.size(); ++l) {
        doc.push_back({{"module", manifest[l].name},
                       {"kind", to_string(manifest[l].kind)},
                       {"alpha", rates.alpha[l]},
                       {"learnable", static_cast<bool>(rates.mask[l])}});
    }
    std::ofstream out(path);
    if (!out) throw ConfigError("save_alpha: cannot open " + path.string());
    out << doc.dump(2) << '\n';
}

AdaptationRates load_alpha(const ModuleManifest& manifest, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("load_alpha: cannot open " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("load_alpha: " + std::string(e.what()));
    }
    auto rates = AdaptationRates::zeros(manifest);
    if (doc.size() != manifest.num_modules()) throw DimensionError("load_alpha: entry count differs from manifest");
    for (std::size_t l = 0; l < doc.size(); ++l) {
        if (doc[l].at("module").get<std::string>() != manifest[l].name) {
            throw UsageError("load_alpha: entry " + std::to_string(l) + " names a different module");
        }
        rates.alpha[l] = doc[l].at("alpha").get<double>();
        rates.mask[l] = doc[l].value("learnable", true);
    }
    return rates;
}

}  // namespace atp
