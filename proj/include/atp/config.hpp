#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "atp/federated.hpp"
#include "atp/population.hpp"
#include "json.hpp"

namespace atp {

struct PopulationBlock {
    std::size_t sources = 40;
    std::size_t targets = 10;
    fedsim::ShiftConfig shift;
    std::optional<std::filesystem::path> csv;  ///< external labeled pool instead of the generator
};

struct ModelBlock {
    std::vector<std::size_t> hidden{32, 32};
    bool batchnorm = true;
    double bn_epsilon = 1e-5;
};

struct EvalBlock {
    std::size_t batch_size = 20;
    std::vector<std::string> methods{"no_adapt", "bn_adapt", "tent", "em", "atp_batch", "atp_online"};
    /// Also train alpha with the "params" and "stats" masks and evaluate them in batch mode.
    bool ablations = false;
    std::vector<double> tent_lrs{0.001, 0.01, 0.1};
    std::size_t tent_steps = 1;
    std::size_t em_iterations = 50;
    double em_tol = 1e-6;
};

struct RunConfig {
    std::uint64_t seed = 0;
    PopulationBlock population;
    ModelBlock model;
    fedsim::PretrainConfig pretrain;
    fedsim::AtpConfig atp;
    EvalBlock eval;
    std::filesystem::path output_dir = "runs/default";

    /// Canonical JSON with every default filled in.
    nlohmann::json to_json() const;
    /// 16 hex digits of FNV-1a over the canonical JSON, output_dir excluded.
    std::string hash() const;
};

/// Strict parse: unknown keys, missing blocks and ill-typed values raise
/// ConfigError with the JSON path of the offending field.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace atp
