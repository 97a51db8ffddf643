#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "atp/analysis.hpp"
#include "atp/config.hpp"
#include "atp/errors.hpp"
#include "atp/federated.hpp"
#include "atp/runtime.hpp"

namespace atp {

/// Failure inside one pipeline stage ("population", "pretrain", "atp",
/// "eval", "output"); wraps the original message.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what, bool numeric)
        : Error("[" + stage + "] " + what), stage_(std::move(stage)), numeric_(numeric) {}
    const std::string& stage() const noexcept { return stage_; }
    bool numeric() const noexcept { return numeric_; }

private:
    std::string stage_;
    bool numeric_;
};

struct PipelineOptions {
    std::size_t jobs = 0;  ///< 0 = hardware concurrency
    bool write_outputs = true;
    std::ostream* log = nullptr;
};

struct MethodResult {
    std::string name;  ///< eval method name, or "atp_params" / "atp_stats" for ablations
    tta::Summary accuracy;
    tta::Summary ce;
    std::vector<tta::ClientReport> clients;
};

struct PipelineResult {
    std::string config_hash;
    fedsim::Population population;
    std::optional<ParameterStore> global;
    std::vector<fedsim::PretrainRound> pretrain_rounds;
    fedsim::AtpResult atp;
    std::map<std::string, fedsim::AtpResult> ablations;  ///< keyed "atp_params" / "atp_stats"
    analysis::AlphaReport alpha_report;
    std::vector<MethodResult> methods;
    double tent_lr = 0.0;
    double source_no_adapt_accuracy = 0.0;  ///< on source validation streams
    double source_atp_accuracy = 0.0;

    const MethodResult& method(const std::string& name) const;
};

/// population -> FedAvg pretraining -> ATP training -> target evaluation.
/// Writes artifacts under config.output_dir when options.write_outputs.
PipelineResult run_pipeline(const RunConfig& config, const PipelineOptions& options = {});

/// Evaluates previously saved artifacts (checkpoint + alpha) on the targets
/// of `config`'s population.
std::vector<MethodResult> evaluate_saved(const RunConfig& config, const std::filesystem::path& checkpoint,
                                         const std::optional<std::filesystem::path>& alpha_file,
                                         const PipelineOptions& options = {});

std::string rounds_csv(const std::vector<fedsim::PretrainRound>& rounds);
std::string rounds_csv(const std::vector<fedsim::AtpRound>& rounds);
std::string aggregate_csv(const std::vector<MethodResult>& methods);

}  // namespace atp
