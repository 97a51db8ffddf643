#include "atp/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "atp/errors.hpp"
#include "atp/nn.hpp"
#include "atp/random.hpp"

namespace atp::analysis {

namespace {

std::size_t final_affine_layer(const ModelSpec& spec) {
    for (std::size_t i = spec.layers.size(); i-- > 0;) {
        if (spec.layers[i].kind == LayerKind::affine) {
            if (i + 2 != spec.layers.size()) {
                throw UsageError("calibrate: the final affine layer must feed the softmax directly");
            }
            return i;
        }
    }
    throw UsageError("calibrate: model has no affine layer");
}

void check_prior(std::span<const double> prior, std::size_t classes, const char* name) {
    if (prior.size() != classes) throw DimensionError(std::string("calibrate: ") + name + " has wrong length");
    for (double p : prior) {
        if (!(p > 0.0)) throw DomainError(std::string("calibrate: ") + name + " must be strictly positive");
    }
}

}  // namespace

ParameterStore calibrate_last_layer(const ParameterStore& model, std::span<const double> p_prior,
                                    std::span<const double> q_prior) {
    const std::size_t c = model.spec().num_classes();
    check_prior(p_prior, c, "p");
    check_prior(q_prior, c, "q");
    ParameterStore out = model;
    auto bias = out.module("layer" + std::to_string(final_affine_layer(model.spec())) + ".affine.bias");
    for (std::size_t j = 0; j < c; ++j) {
        if (p_prior[j] != q_prior[j]) bias[j] += std::log(q_prior[j] / p_prior[j]);
    }
    return out;
}

ParameterStore calibrated_gaussian_classifier(const Tensor& class_means, double std, std::span<const double> prior) {
    const std::size_t c = class_means.rows(), p = class_means.cols();
    check_prior(prior, c, "prior");
    ModelSpec spec;
    spec.layers = {{LayerKind::affine, p, c}, {LayerKind::softmax, c, c}};
    ParameterStore model(spec);
    auto w = model.module("layer0.affine.weight");
    auto b = model.module("layer0.affine.bias");
    const double inv_var = 1.0 / (std * std);
    for (std::size_t k = 0; k < c; ++k) {
        double sq = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            w[k * p + j] = class_means(k, j) * inv_var;
            sq += class_means(k, j) * class_means(k, j);
        }
        b[k] = -0.5 * sq * inv_var + std::log(prior[k]);
    }
    return model;
}

Tensor gaussian_mixture_posterior(const Tensor& x, const Tensor& class_means, double std,
                                  std::span<const double> prior) {
    const std::size_t n = x.rows(), c = class_means.rows(), p = class_means.cols();
    Tensor post = Tensor::matrix(n, c);
    std::vector<double> logd(c);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t k = 0; k < c; ++k) {
            double sq = 0.0;
            for (std::size_t j = 0; j < p; ++j) {
                const double dlt = x(r, j) - class_means(k, j);
                sq += dlt * dlt;
            }
            logd[k] = -sq / (2.0 * std * std) + std::log(prior[k]);
        }
        const double mx = *std::max_element(logd.begin(), logd.end());
        double z = 0.0;
        for (std::size_t k = 0; k < c; ++k) z += std::exp(logd[k] - mx);
        for (std::size_t k = 0; k < c; ++k) post(r, k) = std::exp(logd[k] - mx) / z;
    }
    return post;
}

CalibrationCheck label_shift_calibration_check(const Tensor& class_means, double std, std::span<const double> p_prior,
                                               std::span<const double> q_prior, std::size_t samples,
                                               std::uint64_t seed) {
    const std::size_t c = class_means.rows(), p = class_means.cols();
    check_prior(p_prior, c, "p");
    check_prior(q_prior, c, "q");
    Rng rng = make_rng(seed, stream::analysis, {31});
    std::discrete_distribution<int> label_dist(q_prior.begin(), q_prior.end());
    std::normal_distribution<double> noise(0.0, std);
    Tensor x = Tensor::matrix(samples, p);
    std::vector<int> y(samples);
    for (std::size_t r = 0; r < samples; ++r) {
        y[r] = label_dist(rng);
        for (std::size_t j = 0; j < p; ++j) x(r, j) = class_means(static_cast<std::size_t>(y[r]), j) + noise(rng);
    }
    const auto model = calibrated_gaussian_classifier(class_means, std, p_prior);
    const auto calibrated = calibrate_last_layer(model, p_prior, q_prior);
    const Tensor pred = nn::predict(calibrated, x);
    const Tensor bayes = gaussian_mixture_posterior(x, class_means, std, q_prior);

    CalibrationCheck out;
    out.samples = samples;
    for (std::size_t k = 0; k < pred.size(); ++k) {
        out.max_posterior_deviation = std::max(out.max_posterior_deviation, std::abs(pred.data()[k] - bayes.data()[k]));
    }
    out.model_ce = nn::cross_entropy(pred, y);
    out.bayes_ce = nn::cross_entropy(bayes, y);
    out.uncalibrated_ce = nn::cross_entropy(nn::predict(model, x), y);
    return out;
}

double ks_statistic(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw DimensionError("ks: empty sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        const double v = std::min(a[i], b[j]);
        while (i < a.size() && a[i] == v) ++i;
        while (j < b.size() && b[j] == v) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    return d;
}

AlignmentReport bn_align_check(double source_mean, double source_std, double scale, double offset,
                               std::size_t samples, std::uint64_t seed, FeatureTransform transform) {
    if (!(source_std > 0.0)) throw DomainError("bn_align_check: source std must be positive");
    if (samples < 2) throw DegenerateBatchError("bn_align_check: need at least 2 samples");
    Rng rng = make_rng(seed, stream::analysis, {32});
    std::normal_distribution<double> n(source_mean, source_std);
    std::vector<double> src(samples), tgt(samples);
    for (std::size_t i = 0; i < samples; ++i) {
        src[i] = n(rng);
        const double base = transform == FeatureTransform::cube ? src[i] * src[i] * src[i] : src[i];
        tgt[i] = scale * base + offset;
    }
    double mean = 0.0;
    for (double v : tgt) mean += v;
    mean /= static_cast<double>(samples);
    double var = 0.0;
    for (double v : tgt) var += (v - mean) * (v - mean);
    var /= static_cast<double>(samples);

    AlignmentReport rep;
    rep.samples = samples;
    rep.adapted_mean = mean;
    rep.adapted_std = std::sqrt(var);
    rep.expected_mean = scale * source_mean + offset;
    rep.expected_std = std::abs(scale) * source_std;
    std::vector<double> zs(samples), zt(samples);
    for (std::size_t i = 0; i < samples; ++i) {
        zs[i] = (src[i] - source_mean) / source_std;
        zt[i] = (tgt[i] - rep.adapted_mean) / rep.adapted_std;
    }
    rep.ks = ks_statistic(std::move(zs), std::move(zt));
    return rep;
}

BoundValue generalization_bound(const BoundInput& b) {
    for (double v : {b.lipschitz, b.h_bound, b.radius, b.modules, b.sources, b.batches, b.epsilon}) {
        if (!(v > 0.0) || !std::isfinite(v)) throw DomainError("generalization_bound: inputs must be positive");
    }
    const double sqrt_k = std::sqrt(b.batches);
    BoundValue out;
    out.log_bound = b.modules * std::log(12.0 * b.lipschitz * b.h_bound * b.radius / b.epsilon) + std::log(4.0) -
                    b.sources * b.batches * b.epsilon * b.epsilon / (2.0 * (sqrt_k + 1.0) * (sqrt_k + 1.0));
    out.value = std::exp(out.log_bound);
    out.probability = out.log_bound >= 0.0 ? 1.0 : out.value;
    return out;
}

ParameterStore toy_model(double running_mean, double running_var) {
    ModelSpec spec;
    spec.layers = {{LayerKind::batchnorm, 1, 1}, {LayerKind::affine, 1, 2}, {LayerKind::softmax, 2, 2}};
    ParameterStore model(spec);
    model.module("layer0.bn.running_mean")[0] = running_mean;
    model.module("layer0.bn.running_var")[0] = running_var;
    model.module("layer0.bn.weight")[0] = 1.0;
    model.module("layer0.bn.bias")[0] = 0.0;
    // class 1 (y = +1) wins iff the BN output is positive
    auto w = model.module("layer1.affine.weight");
    w[0] = -1.0;
    w[1] = 1.0;
    return model;
}

ToyResult toy_experiment(const ToyConfig& cfg) {
    if (!(cfg.class_std > 0.0)) throw DomainError("toy: class std must be positive");
    for (double p : {cfg.train_prior, cfg.test_prior}) {
        if (!(p > 0.0 && p < 1.0)) throw DomainError("toy: priors must lie in (0, 1)");
    }
    if (cfg.samples < 2) throw DegenerateBatchError("toy: need at least 2 samples");
    auto draw = [&](double prior, std::uint64_t tag) {
        Rng rng = make_rng(cfg.seed, stream::analysis, {tag});
        std::bernoulli_distribution pos(prior);
        std::normal_distribution<double> noise(0.0, cfg.class_std);
        Tensor x = Tensor::matrix(cfg.samples, 1);
        std::vector<int> y(cfg.samples);
        for (std::size_t i = 0; i < cfg.samples; ++i) {
            y[i] = pos(rng) ? 1 : 0;
            x(i, 0) = (y[i] == 1 ? cfg.positive_mean : cfg.negative_mean) + noise(rng);
        }
        return std::pair{std::move(x), std::move(y)};
    };
    const auto [train_x, train_y] = draw(cfg.train_prior, 41);
    const auto [test_x, test_y] = draw(cfg.test_prior, 42);

    ToyResult out;
    for (std::size_t i = 0; i < cfg.samples; ++i) out.running_mean += train_x(i, 0);
    out.running_mean /= static_cast<double>(cfg.samples);
    for (std::size_t i = 0; i < cfg.samples; ++i) {
        out.running_var += (train_x(i, 0) - out.running_mean) * (train_x(i, 0) - out.running_mean);
    }
    out.running_var /= static_cast<double>(cfg.samples);

    const auto model = toy_model(out.running_mean, out.running_var);
    out.train_accuracy = nn::accuracy(nn::argmax_rows(nn::predict(model, train_x)), train_y);

    const auto dir = compute_update_direction(model, test_x);
    const auto& manifest = model.manifest();
    for (double a : cfg.alphas) {
        auto rates = AdaptationRates::zeros(manifest, AlphaMask::stats_only);
        for (std::size_t l = 0; l < manifest.num_modules(); ++l) {
            if (rates.mask[l]) rates.alpha[l] = a;
        }
        const auto adapted = apply_adaptation(model, rates, dir);
        ToyRow row;
        row.alpha = a;
        row.accuracy = nn::accuracy(nn::argmax_rows(nn::predict(adapted, test_x)), test_y);
        row.adapted_mean = adapted.module("layer0.bn.running_mean")[0];
        row.adapted_var = adapted.module("layer0.bn.running_var")[0];
        out.rows.push_back(row);
    }
    return out;
}

double AlphaReport::group_mean(const std::string& key) const {
    for (const auto& g : groups) {
        if (g.key == key) return g.mean;
    }
    throw UsageError("alpha report: no group '" + key + "'");
}

std::string AlphaReport::rows_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "module,kind,role,depth,alpha\n";
    for (const auto& r : rows) {
        os << r.module << ',' << to_string(r.kind) << ',' << to_string(r.role) << ',' << r.depth << ',' << r.alpha
           << '\n';
    }
    return os.str();
}

std::string AlphaReport::groups_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "group,count,mean,min,max,sign\n";
    for (const auto& g : groups) {
        os << g.key << ',' << g.count << ',' << g.mean << ',' << g.min << ',' << g.max << ',' << g.sign << '\n';
    }
    return os.str();
}

AlphaReport alpha_report(const AdaptationRates& alpha, const ModuleManifest& manifest) {
    if (alpha.size() != manifest.num_modules()) throw DimensionError("alpha report: alpha/manifest mismatch");
    AlphaReport rep;
    std::map<std::string, std::vector<double>> buckets;
    std::vector<std::string> order;
    auto put = [&](const std::string& key, double v) {
        if (!buckets.contains(key)) order.push_back(key);
        buckets[key].push_back(v);
    };
    for (std::size_t l = 0; l < manifest.num_modules(); ++l) {
        const auto& e = manifest[l];
        rep.rows.push_back({e.name, e.kind, e.role, e.depth, alpha.alpha[l]});
        put("kind=" + to_string(e.kind), alpha.alpha[l]);
        put("role=" + to_string(e.role), alpha.alpha[l]);
        put("depth=" + std::to_string(e.depth) + "/kind=" + to_string(e.kind), alpha.alpha[l]);
    }
    for (const auto& key : order) {
        const auto& v = buckets[key];
        AlphaGroup g;
        g.key = key;
        g.count = v.size();
        double s = 0.0;
        for (double x : v) s += x;
        g.mean = s / static_cast<double>(v.size());
        g.min = *std::min_element(v.begin(), v.end());
        g.max = *std::max_element(v.begin(), v.end());
        g.sign = g.mean > 0.0 ? 1 : (g.mean < 0.0 ? -1 : 0);
        rep.groups.push_back(g);
    }
    return rep;
}

}  // namespace atp::analysis
