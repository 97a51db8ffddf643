#include "atp/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "atp/errors.hpp"

namespace atp::nn {

namespace {

/// Offsets of a layer's modules within the flat vector.
struct LayerSlots {
    std::size_t weight = 0, bias = 0, running_mean = 0, running_var = 0;
};

std::vector<LayerSlots> layer_slots(const ParameterStore& model) {
    std::vector<LayerSlots> slots(model.spec().layers.size());
    for (const auto& e : model.manifest().entries()) {
        auto& s = slots[e.layer];
        switch (e.role) {
            case ModuleRole::affine_weight:
            case ModuleRole::bn_weight: s.weight = e.offset; break;
            case ModuleRole::affine_bias:
            case ModuleRole::bn_bias: s.bias = e.offset; break;
            case ModuleRole::bn_running_mean: s.running_mean = e.offset; break;
            case ModuleRole::bn_running_var: s.running_var = e.offset; break;
        }
    }
    return slots;
}

Tensor affine_forward(const Tensor& x, const double* w, const double* b, std::size_t out) {
    const std::size_t batch = x.rows(), in = x.cols();
    Tensor y = Tensor::matrix(batch, out);
    for (std::size_t r = 0; r < batch; ++r) {
        const double* xr = x.row(r).data();
        for (std::size_t o = 0; o < out; ++o) {
            const double* wo = w + o * in;
            double acc = b[o];
            for (std::size_t i = 0; i < in; ++i) acc += wo[i] * xr[i];
            y(r, o) = acc;
        }
    }
    return y;
}

void softmax_rows(const Tensor& logits, Tensor& probs, Tensor& log_probs) {
    const std::size_t batch = logits.rows(), c = logits.cols();
    probs = Tensor::matrix(batch, c);
    log_probs = Tensor::matrix(batch, c);
    for (std::size_t r = 0; r < batch; ++r) {
        double mx = logits(r, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(r, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(logits(r, j) - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < c; ++j) {
            log_probs(r, j) = logits(r, j) - lse;
            probs(r, j) = std::exp(log_probs(r, j));
        }
    }
}

}  // namespace

ForwardResult forward(const ParameterStore& model, const Tensor& batch, StatsMode mode) {
    const auto& spec = model.spec();
    if (batch.rank() != 2 || batch.cols() != spec.input_dim()) {
        throw DimensionError("forward: batch must have shape (B, " + std::to_string(spec.input_dim()) + ")");
    }
    const std::size_t bsz = batch.rows();
    if (bsz == 0) throw DimensionError("forward: empty batch");
    if (!batch.all_finite()) throw NumericError("forward: non-finite input");
    if (mode == StatsMode::train_stats && bsz < 2) {
        throw DegenerateBatchError("forward: train-stats mode needs at least 2 samples per batch");
    }

    const auto slots = layer_slots(model);
    const auto w = model.values();
    ForwardResult result;
    auto& cache = result.cache;
    cache.mode = mode;
    cache.model_checksum = model.checksum();
    cache.batch_size = bsz;
    cache.inputs.reserve(spec.layers.size());
    cache.bn.resize(spec.layers.size());

    Tensor x = batch;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const auto& layer = spec.layers[li];
        cache.inputs.push_back(x);
        switch (layer.kind) {
            case LayerKind::affine:
                x = affine_forward(x, &w[slots[li].weight], &w[slots[li].bias], layer.output_dim);
                break;
            case LayerKind::relu:
                for (double& v : x.data()) v = std::max(v, 0.0);
                break;
            case LayerKind::batchnorm: {
                const std::size_t f = layer.output_dim;
                std::vector<double> mean(f, 0.0), var(f, 0.0);
                BnCache bc;
                bc.inv_std.resize(f);
                bc.var_clamped.assign(f, false);
                if (mode == StatsMode::train_stats) {
                    for (std::size_t r = 0; r < bsz; ++r)
                        for (std::size_t j = 0; j < f; ++j) mean[j] += x(r, j);
                    for (double& m : mean) m /= static_cast<double>(bsz);
                    for (std::size_t r = 0; r < bsz; ++r)
                        for (std::size_t j = 0; j < f; ++j) {
                            const double dlt = x(r, j) - mean[j];
                            var[j] += dlt * dlt;
                        }
                    for (double& v : var) v /= static_cast<double>(bsz);
                    for (std::size_t j = 0; j < f; ++j) bc.inv_std[j] = 1.0 / std::sqrt(var[j] + spec.bn_epsilon);
                    cache.batch_stats.push_back({li, mean, var});
                } else {
                    for (std::size_t j = 0; j < f; ++j) {
                        mean[j] = w[slots[li].running_mean + j];
                        double v = w[slots[li].running_var + j];
                        if (v < 0.0) {
                            bc.var_clamped[j] = true;
                            v = 0.0;
                        }
                        bc.inv_std[j] = 1.0 / std::sqrt(v + spec.bn_epsilon);
                    }
                }
                bc.xhat = Tensor::matrix(bsz, f);
                const double* gamma = &w[slots[li].weight];
                const double* beta = &w[slots[li].bias];
                for (std::size_t r = 0; r < bsz; ++r)
                    for (std::size_t j = 0; j < f; ++j) {
                        const double xh = (x(r, j) - mean[j]) * bc.inv_std[j];
                        bc.xhat(r, j) = xh;
                        x(r, j) = gamma[j] * xh + beta[j];
                    }
                cache.bn[li] = std::move(bc);
                break;
            }
            case LayerKind::softmax:
                cache.logits = x;
                softmax_rows(cache.logits, result.predictions, cache.log_probs);
                break;
        }
    }
    if (!result.predictions.all_finite() || !cache.logits.all_finite()) {
        throw NumericError("forward: non-finite activations");
    }
    return result;
}

Tensor predict(const ParameterStore& model, const Tensor& batch, StatsMode mode) {
    return forward(model, batch, mode).predictions;
}

std::vector<int> argmax_rows(const Tensor& predictions) {
    std::vector<int> out(predictions.rows());
    for (std::size_t r = 0; r < predictions.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < predictions.cols(); ++j) {
            if (predictions(r, j) > predictions(r, best)) best = j;
        }
        out[r] = static_cast<int>(best);
    }
    return out;
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
    if (predicted.size() != labels.size()) throw DimensionError("accuracy: length mismatch");
    if (labels.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double cross_entropy(const Tensor& predictions, std::span<const int> labels, std::size_t* clamped) {
    if (predictions.rows() != labels.size()) throw DimensionError("cross_entropy: label count mismatch");
    if (!predictions.all_finite()) throw NumericError("cross_entropy: non-finite predictions");
    std::size_t n_clamped = 0;
    double total = 0.0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= predictions.cols()) {
            throw DimensionError("cross_entropy: label out of range");
        }
        double p = predictions(r, static_cast<std::size_t>(labels[r]));
        if (p < kProbFloor) {
            p = kProbFloor;
            ++n_clamped;
        }
        total -= std::log(p);
    }
    if (clamped) *clamped = n_clamped;
    return labels.empty() ? 0.0 : total / static_cast<double>(labels.size());
}

double entropy_loss(const Tensor& predictions) {
    if (!predictions.all_finite()) throw NumericError("entropy_loss: non-finite predictions");
    const std::size_t batch = predictions.rows();
    double total = 0.0;
    for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t j = 0; j < predictions.cols(); ++j) {
            const double p = predictions(r, j);
            if (p > 0.0) total -= p * std::log(std::max(p, kProbFloor));
        }
    return batch == 0 ? 0.0 : total / static_cast<double>(batch);
}

std::vector<double> backward(const ParameterStore& model, const ForwardCache& cache, LossKind loss,
                             std::span<const int> labels) {
    const auto& spec = model.spec();
    if (cache.inputs.size() != spec.layers.size() || cache.model_checksum != model.checksum()) {
        throw UsageError("backward: cache was not produced by a forward pass on these parameters");
    }
    const std::size_t bsz = cache.batch_size;
    const std::size_t c = spec.num_classes();
    const double inv_b = 1.0 / static_cast<double>(bsz);

    // gradient with respect to the logits
    Tensor dy = Tensor::matrix(bsz, c);
    if (loss == LossKind::cross_entropy) {
        if (labels.size() != bsz) throw UsageError("backward: cross-entropy needs one label per sample");
        for (std::size_t r = 0; r < bsz; ++r) {
            if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
                throw DimensionError("backward: label out of range");
            }
            for (std::size_t j = 0; j < c; ++j) dy(r, j) = std::exp(cache.log_probs(r, j)) * inv_b;
            dy(r, static_cast<std::size_t>(labels[r])) -= inv_b;
        }
    } else {
        // dH/dz_j = -p_j (log p_j + H)
        for (std::size_t r = 0; r < bsz; ++r) {
            double h = 0.0;
            for (std::size_t j = 0; j < c; ++j) h -= std::exp(cache.log_probs(r, j)) * cache.log_probs(r, j);
            for (std::size_t j = 0; j < c; ++j) {
                const double p = std::exp(cache.log_probs(r, j));
                dy(r, j) = -p * (cache.log_probs(r, j) + h) * inv_b;
            }
        }
    }

    const auto slots = layer_slots(model);
    const auto w = model.values();
    std::vector<double> grad(model.size(), 0.0);

    // the softmax layer is folded into dy above
    for (std::size_t li = spec.layers.size() - 1; li-- > 0;) {
        const auto& layer = spec.layers[li];
        const Tensor& x = cache.inputs[li];
        const bool need_dx = li > 0;
        switch (layer.kind) {
            case LayerKind::affine: {
                const std::size_t in = layer.input_dim, out = layer.output_dim;
                double* gw = &grad[slots[li].weight];
                double* gb = &grad[slots[li].bias];
                const double* wt = &w[slots[li].weight];
                Tensor dx = need_dx ? Tensor::matrix(bsz, in) : Tensor();
                for (std::size_t r = 0; r < bsz; ++r) {
                    const double* xr = x.row(r).data();
                    for (std::size_t o = 0; o < out; ++o) {
                        const double g = dy(r, o);
                        if (g == 0.0) continue;
                        gb[o] += g;
                        double* gwo = gw + o * in;
                        for (std::size_t i = 0; i < in; ++i) gwo[i] += g * xr[i];
                        if (need_dx) {
                            const double* wo = wt + o * in;
                            double* dxr = &dx(r, 0);
                            for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wo[i];
                        }
                    }
                }
                dy = std::move(dx);
                break;
            }
            case LayerKind::relu:
                if (need_dx) {
                    for (std::size_t k = 0; k < dy.size(); ++k) {
                        if (x.data()[k] <= 0.0) dy.data()[k] = 0.0;
                    }
                }
                break;
            case LayerKind::batchnorm: {
                const std::size_t f = layer.output_dim;
                const auto& bc = cache.bn[li];
                const double* gamma = &w[slots[li].weight];
                double* ggamma = &grad[slots[li].weight];
                double* gbeta = &grad[slots[li].bias];
                Tensor dxhat = Tensor::matrix(bsz, f);
                for (std::size_t r = 0; r < bsz; ++r)
                    for (std::size_t j = 0; j < f; ++j) {
                        ggamma[j] += dy(r, j) * bc.xhat(r, j);
                        gbeta[j] += dy(r, j);
                        dxhat(r, j) = dy(r, j) * gamma[j];
                    }
                if (cache.mode == StatsMode::train_stats) {
                    if (!need_dx) break;
                    Tensor dx = Tensor::matrix(bsz, f);
                    for (std::size_t j = 0; j < f; ++j) {
                        double sum = 0.0, sum_x = 0.0;
                        for (std::size_t r = 0; r < bsz; ++r) {
                            sum += dxhat(r, j);
                            sum_x += dxhat(r, j) * bc.xhat(r, j);
                        }
                        for (std::size_t r = 0; r < bsz; ++r) {
                            dx(r, j) = bc.inv_std[j] * inv_b *
                                       (static_cast<double>(bsz) * dxhat(r, j) - sum - bc.xhat(r, j) * sum_x);
                        }
                    }
                    dy = std::move(dx);
                } else {
                    double* gmean = &grad[slots[li].running_mean];
                    double* gvar = &grad[slots[li].running_var];
                    for (std::size_t j = 0; j < f; ++j) {
                        const double is = bc.inv_std[j];
                        double sum = 0.0, sum_x = 0.0;
                        for (std::size_t r = 0; r < bsz; ++r) {
                            sum += dxhat(r, j);
                            sum_x += dxhat(r, j) * bc.xhat(r, j);
                        }
                        gmean[j] += -sum * is;
                        // xhat = (x - mu) * is, d is / d var = -is^3 / 2
                        if (!bc.var_clamped[j]) gvar[j] += -0.5 * sum_x * is * is;
                    }
                    if (need_dx) {
                        for (std::size_t r = 0; r < bsz; ++r)
                            for (std::size_t j = 0; j < f; ++j) dxhat(r, j) *= bc.inv_std[j];
                        dy = std::move(dxhat);
                    }
                }
                break;
            }
            case LayerKind::softmax:
                throw UsageError("backward: softmax may only be the final layer");
        }
    }
    return grad;
}

}  // namespace atp::nn
