#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace atp {

enum class LayerKind { affine, batchnorm, relu, softmax };

struct LayerSpec {
    LayerKind kind;
    std::size_t input_dim;
    std::size_t output_dim;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Whether a module's update direction comes from the entropy gradient or
/// from the batch-minus-running statistic difference.
enum class ModuleKind { trainable, running_stat };

/// Finer role of a module, used for reporting and for baselines that touch
/// only part of a layer.
enum class ModuleRole { affine_weight, affine_bias, bn_running_mean, bn_running_var, bn_weight, bn_bias };

struct ModuleEntry {
    std::string name;
    ModuleKind kind;
    ModuleRole role;
    std::size_t layer;   ///< index into the layer list
    std::size_t depth;   ///< 1-based block index (one block per affine layer)
    std::size_t offset;
    std::size_t length;
    std::vector<std::size_t> shape;

    friend bool operator==(const ModuleEntry&, const ModuleEntry&) = default;
};

/// Ordered partition of the flat parameter vector into named modules. Plays
/// the role of the 0-1 assignment matrix: scatter/segmented-reduce over the
/// ranges replaces multiplication by A and A^T.
class ModuleManifest {
public:
    ModuleManifest() = default;
    explicit ModuleManifest(std::vector<ModuleEntry> entries);

    std::size_t num_modules() const noexcept { return entries_.size(); }
    std::size_t num_params() const noexcept { return total_; }
    const std::vector<ModuleEntry>& entries() const noexcept { return entries_; }
    const ModuleEntry& operator[](std::size_t i) const { return entries_[i]; }

    /// Index of the module named `name`; throws UsageError if absent.
    std::size_t index_of(const std::string& name) const;

    /// Scatter a per-module vector to a per-parameter vector (A * v).
    std::vector<double> expand(std::span<const double> per_module) const;
    /// Segmented sum of a per-parameter vector (A^T * v).
    std::vector<double> reduce(std::span<const double> per_param) const;

    friend bool operator==(const ModuleManifest&, const ModuleManifest&) = default;

private:
    std::vector<ModuleEntry> entries_;
    std::size_t total_ = 0;
};

struct ModelSpec {
    std::vector<LayerSpec> layers;
    double bn_epsilon = 1e-5;

    std::size_t input_dim() const { return layers.front().input_dim; }
    std::size_t num_classes() const { return layers.back().output_dim; }

    /// Throws ConfigError when the layer chain is malformed.
    void validate() const;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// affine(in->h1), bn, relu, ..., affine(->classes), softmax.
ModelSpec make_mlp(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t num_classes,
                   bool batchnorm = true, double bn_epsilon = 1e-5);

ModuleManifest build_manifest(const ModelSpec& spec);

struct Architecture {
    ModelSpec spec;
    ModuleManifest manifest;
};

/// Flat parameter vector w in R^D together with the architecture that gives it
/// meaning. Copies share the architecture.
class ParameterStore {
public:
    ParameterStore() = default;
    explicit ParameterStore(const ModelSpec& spec);
    ParameterStore(std::shared_ptr<const Architecture> arch, std::vector<double> values);

    /// Deterministic initialization: He-style uniform affine weights, zero
    /// biases, identity batch norm.
    static ParameterStore initialize(const ModelSpec& spec, std::uint64_t seed);

    const ModelSpec& spec() const { return arch_->spec; }
    const ModuleManifest& manifest() const { return arch_->manifest; }
    const std::shared_ptr<const Architecture>& architecture() const noexcept { return arch_; }

    std::size_t size() const noexcept { return values_.size(); }
    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }

    std::span<double> module(std::size_t index);
    std::span<const double> module(std::size_t index) const;
    std::span<const double> module(const std::string& name) const { return module(manifest().index_of(name)); }
    std::span<double> module(const std::string& name) { return module(manifest().index_of(name)); }

    /// FNV-1a hash of the raw parameter bytes.
    std::uint64_t checksum() const noexcept;

    bool same_architecture(const ParameterStore& other) const;

    friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
        return a.same_architecture(b) && a.values_ == b.values_;
    }

private:
    std::shared_ptr<const Architecture> arch_;
    std::vector<double> values_;
};

std::string to_string(LayerKind kind);
std::string to_string(ModuleKind kind);
std::string to_string(ModuleRole role);
LayerKind layer_kind_from_string(const std::string& s);
ModuleKind module_kind_from_string(const std::string& s);
ModuleRole module_role_from_string(const std::string& s);

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed = 1469598103934665603ULL) noexcept;

}  // namespace atp
