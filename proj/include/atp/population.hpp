#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atp/random.hpp"
#include "atp/tensor.hpp"
#include "json.hpp"

namespace atp::fedsim {

enum class ShiftKind { none, label, feature, hybrid };

std::string to_string(ShiftKind k);
ShiftKind shift_kind_from_string(const std::string& s);

/// Ranges from which a client's affine corruption x -> r*x + offset + noise
/// is drawn. r is log-uniform in [scale_min, scale_max], each offset
/// coordinate is N(0, offset_std^2), the noise std is uniform in
/// [noise_min, noise_max].
struct CorruptionRange {
    double scale_min = 1.0;
    double scale_max = 1.0;
    double offset_std = 0.0;
    double noise_min = 0.0;
    double noise_max = 0.0;
};

struct ShiftConfig {
    ShiftKind kind = ShiftKind::none;
    std::size_t num_classes = 10;
    std::size_t feature_dim = 20;

    // step partition (label / hybrid)
    std::size_t major_classes = 2;
    std::size_t major_count = 80;
    std::size_t minor_classes = 8;
    std::size_t minor_count = 5;
    /// per-class count when there is no label shift
    std::size_t uniform_count = 20;

    // Gaussian class-conditional base model
    double class_separation = 3.0;  ///< pairwise distance between class means
    double class_std = 1.0;         ///< shared isotropic std

    CorruptionRange source_corruption;
    CorruptionRange target_corruption;

    /// Size of the finite per-class pool clients are dealt from; 0 draws
    /// fresh samples from the generator.
    std::size_t pool_per_class = 0;
    /// Fraction of each source client's samples held out for learning alpha.
    double validation_fraction = 0.2;

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

nlohmann::json to_json(const ShiftConfig& c);
ShiftConfig shift_config_from_json(const nlohmann::json& j);

enum class Role { source, target };

struct Corruption {
    double scale = 1.0;
    std::vector<double> offset;
    double noise = 0.0;

    bool is_identity() const;
};

struct Dataset {
    Tensor x;
    std::vector<int> y;

    std::size_t size() const { return y.size(); }
};

struct ClientSpec {
    std::size_t id = 0;
    Role role = Role::source;
    std::vector<double> label_prior;
    Corruption corruption;
    Dataset data;                 ///< all samples, in stream order
    std::size_t train_count = 0;  ///< sources: first train_count samples train, the rest validate

    Dataset train() const;
    Dataset validation() const;
};

struct Population {
    ShiftConfig config;
    std::vector<ClientSpec> sources;
    std::vector<ClientSpec> targets;
    Tensor class_means;  ///< C x p, empty for ingested datasets
};

/// Deterministic in (config, N, M, seed).
Population sample_population(const ShiftConfig& config, std::size_t num_sources, std::size_t num_targets,
                             std::uint64_t seed);

/// Same partitioning, but samples are dealt from an external labeled pool
/// (CSV: feature columns followed by an integer label column, optional header).
Population population_from_csv(const std::filesystem::path& csv, ShiftConfig config, std::size_t num_sources,
                               std::size_t num_targets, std::uint64_t seed);

Dataset read_labeled_csv(const std::filesystem::path& csv);

struct Batch {
    Tensor x;
    std::vector<int> y;
};

/// Splits into batches of `batch_size` (final short batch dropped). With an
/// engine the order is shuffled first.
std::vector<Batch> make_batches(const Dataset& data, std::size_t batch_size, Rng* shuffle = nullptr);

/// Features only, for code paths that must not see labels.
std::vector<Tensor> unlabeled_batches(const Dataset& data, std::size_t batch_size);

/// Class-count-weighted mean label prior over clients' training data.
std::vector<double> pooled_label_prior(std::span<const ClientSpec> clients, std::size_t num_classes);

}  // namespace atp::fedsim
