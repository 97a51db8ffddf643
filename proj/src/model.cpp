#include "atp/model.hpp"

#include <cmath>
#include <random>

#include "atp/errors.hpp"
#include "atp/random.hpp"

namespace atp {

ModuleManifest::ModuleManifest(std::vector<ModuleEntry> entries) : entries_(std::move(entries)) {
    std::size_t expected = 0;
    for (const auto& e : entries_) {
        if (e.offset != expected) {
            throw UsageError("manifest: module '" + e.name + "' does not start where the previous one ends");
        }
        if (e.length == 0) throw UsageError("manifest: module '" + e.name + "' is empty");
        expected += e.length;
    }
    total_ = expected;
}

std::size_t ModuleManifest::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].name == name) return i;
    }
    throw UsageError("manifest: no module named '" + name + "'");
}

std::vector<double> ModuleManifest::expand(std::span<const double> per_module) const {
    if (per_module.size() != entries_.size()) throw DimensionError("manifest: expand expects one value per module");
    std::vector<double> out(total_);
    for (std::size_t l = 0; l < entries_.size(); ++l) {
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(entries_[l].offset), entries_[l].length, per_module[l]);
    }
    return out;
}

std::vector<double> ModuleManifest::reduce(std::span<const double> per_param) const {
    if (per_param.size() != total_) throw DimensionError("manifest: reduce expects one value per parameter");
    std::vector<double> out(entries_.size(), 0.0);
    for (std::size_t l = 0; l < entries_.size(); ++l) {
        double s = 0.0;
        for (std::size_t i = 0; i < entries_[l].length; ++i) s += per_param[entries_[l].offset + i];
        out[l] = s;
    }
    return out;
}

void ModelSpec::validate() const {
    if (layers.empty()) throw ConfigError("model: no layers");
    if (!(bn_epsilon > 0.0)) throw ConfigError("model: bn_epsilon must be positive");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string where = "model: layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
        if (l.input_dim == 0 || l.output_dim == 0) throw ConfigError(where + ": dimensions must be positive");
        if (l.kind != LayerKind::affine && l.input_dim != l.output_dim) {
            throw ConfigError(where + ": input and output dims must match");
        }
        if (i > 0 && layers[i - 1].output_dim != l.input_dim) {
            throw ConfigError(where + ": input dim does not match previous output dim");
        }
        if (l.kind == LayerKind::softmax && i + 1 != layers.size()) {
            throw ConfigError(where + ": softmax may only be the final layer");
        }
    }
    if (layers.back().kind != LayerKind::softmax) throw ConfigError("model: final layer must be softmax");
    if (layers.size() < 2) throw ConfigError("model: softmax needs a preceding layer");
}

ModelSpec make_mlp(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t num_classes,
                   bool batchnorm, double bn_epsilon) {
    ModelSpec spec;
    spec.bn_epsilon = bn_epsilon;
    std::size_t in = input_dim;
    for (std::size_t h : hidden) {
        spec.layers.push_back({LayerKind::affine, in, h});
        if (batchnorm) spec.layers.push_back({LayerKind::batchnorm, h, h});
        spec.layers.push_back({LayerKind::relu, h, h});
        in = h;
    }
    spec.layers.push_back({LayerKind::affine, in, num_classes});
    spec.layers.push_back({LayerKind::softmax, num_classes, num_classes});
    spec.validate();
    return spec;
}

ModuleManifest build_manifest(const ModelSpec& spec) {
    spec.validate();
    std::vector<ModuleEntry> entries;
    std::size_t offset = 0;
    std::size_t depth = 0;
    auto add = [&](std::size_t layer, const std::string& suffix, ModuleKind kind, ModuleRole role,
                   std::vector<std::size_t> shape) {
        std::size_t len = 1;
        for (auto s : shape) len *= s;
        entries.push_back({"layer" + std::to_string(layer) + "." + suffix, kind, role, layer, depth, offset, len,
                           std::move(shape)});
        offset += len;
    };
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        switch (l.kind) {
            case LayerKind::affine:
                ++depth;
                add(i, "affine.weight", ModuleKind::trainable, ModuleRole::affine_weight, {l.output_dim, l.input_dim});
                add(i, "affine.bias", ModuleKind::trainable, ModuleRole::affine_bias, {l.output_dim});
                break;
            case LayerKind::batchnorm:
                // a BN layer before any affine layer belongs to block 1
                if (depth == 0) depth = 1;
                add(i, "bn.running_mean", ModuleKind::running_stat, ModuleRole::bn_running_mean, {l.output_dim});
                add(i, "bn.running_var", ModuleKind::running_stat, ModuleRole::bn_running_var, {l.output_dim});
                add(i, "bn.weight", ModuleKind::trainable, ModuleRole::bn_weight, {l.output_dim});
                add(i, "bn.bias", ModuleKind::trainable, ModuleRole::bn_bias, {l.output_dim});
                break;
            case LayerKind::relu:
            case LayerKind::softmax:
                break;
        }
    }
    return ModuleManifest(std::move(entries));
}

ParameterStore::ParameterStore(const ModelSpec& spec) {
    auto arch = std::make_shared<Architecture>();
    arch->spec = spec;
    arch->manifest = build_manifest(spec);
    values_.assign(arch->manifest.num_params(), 0.0);
    arch_ = std::move(arch);
}

ParameterStore::ParameterStore(std::shared_ptr<const Architecture> arch, std::vector<double> values)
    : arch_(std::move(arch)), values_(std::move(values)) {
    if (!arch_) throw UsageError("parameter store: null architecture");
    if (values_.size() != arch_->manifest.num_params()) {
        throw DimensionError("parameter store: expected " + std::to_string(arch_->manifest.num_params()) +
                             " values, got " + std::to_string(values_.size()));
    }
}

ParameterStore ParameterStore::initialize(const ModelSpec& spec, std::uint64_t seed) {
    ParameterStore store(spec);
    Rng rng = make_rng(seed, stream::model_init);
    for (std::size_t m = 0; m < store.manifest().num_modules(); ++m) {
        const auto& e = store.manifest()[m];
        auto slot = store.module(m);
        switch (e.role) {
            case ModuleRole::affine_weight: {
                const double fan_in = static_cast<double>(e.shape[1]);
                std::uniform_real_distribution<double> u(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
                for (double& v : slot) v = u(rng);
                break;
            }
            case ModuleRole::bn_running_var:
            case ModuleRole::bn_weight:
                std::fill(slot.begin(), slot.end(), 1.0);
                break;
            case ModuleRole::affine_bias:
            case ModuleRole::bn_running_mean:
            case ModuleRole::bn_bias:
                std::fill(slot.begin(), slot.end(), 0.0);
                break;
        }
    }
    return store;
}

std::span<double> ParameterStore::module(std::size_t index) {
    const auto& e = manifest()[index];
    return {values_.data() + e.offset, e.length};
}

std::span<const double> ParameterStore::module(std::size_t index) const {
    const auto& e = manifest()[index];
    return {values_.data() + e.offset, e.length};
}

std::uint64_t ParameterStore::checksum() const noexcept {
    return fnv1a({reinterpret_cast<const unsigned char*>(values_.data()), values_.size() * sizeof(double)});
}

bool ParameterStore::same_architecture(const ParameterStore& other) const {
    if (arch_ == other.arch_) return true;
    if (!arch_ || !other.arch_) return false;
    return arch_->spec == other.arch_->spec && arch_->manifest == other.arch_->manifest;
}

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::affine: return "affine";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::relu: return "relu";
        case LayerKind::softmax: return "softmax";
    }
    return "?";
}

std::string to_string(ModuleKind kind) { return kind == ModuleKind::trainable ? "trainable" : "running_stat"; }

std::string to_string(ModuleRole role) {
    switch (role) {
        case ModuleRole::affine_weight: return "affine_weight";
        case ModuleRole::affine_bias: return "affine_bias";
        case ModuleRole::bn_running_mean: return "bn_running_mean";
        case ModuleRole::bn_running_var: return "bn_running_var";
        case ModuleRole::bn_weight: return "bn_weight";
        case ModuleRole::bn_bias: return "bn_bias";
    }
    return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
    for (auto k : {LayerKind::affine, LayerKind::batchnorm, LayerKind::relu, LayerKind::softmax}) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("unknown layer kind '" + s + "'");
}

ModuleKind module_kind_from_string(const std::string& s) {
    if (s == "trainable") return ModuleKind::trainable;
    if (s == "running_stat") return ModuleKind::running_stat;
    throw ConfigError("unknown module kind '" + s + "'");
}

ModuleRole module_role_from_string(const std::string& s) {
    for (auto r : {ModuleRole::affine_weight, ModuleRole::affine_bias, ModuleRole::bn_running_mean,
                   ModuleRole::bn_running_var, ModuleRole::bn_weight, ModuleRole::bn_bias}) {
        if (to_string(r) == s) return r;
    }
    throw ConfigError("unknown module role '" + s + "'");
}

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed) noexcept {
    std::uint64_t h = seed;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace atp
