// atp: command-line driver for the ATP simulator.
//
//   atp pipeline --config configs/hybrid.json [--seed N] [--jobs N] [--out DIR]
//   atp eval --config CFG --checkpoint DIR/checkpoint/global.json [--alpha DIR/alpha.json]
//   atp analysis toy|bound|prop31|prop32 [options]
//
// Exit status: 0 success, 1 a check missed its tolerance, 2 invalid config or
// usage, 3 numeric divergence, 4 any other failure.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "atp/analysis.hpp"
#include "atp/config.hpp"
#include "atp/errors.hpp"
#include "atp/nn.hpp"
#include "atp/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kCheckFailed = 1;
constexpr int kBadInput = 2;
constexpr int kNumeric = 3;
constexpr int kOther = 4;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 0;
    std::string out;
};

fs::path output_dir(const std::string& flag, const fs::path& fallback) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("ATP_OUT_DIR"); env && *env) return env;
    return fallback;
}

atp::RunConfig resolve_config(const Common& c) {
    auto cfg = atp::load_run_config(c.config);
    if (c.seed) {
        cfg.seed = *c.seed;
        cfg.pretrain.seed = *c.seed;
        cfg.atp.seed = *c.seed;
    }
    cfg.output_dir = output_dir(c.out, cfg.output_dir);
    return cfg;
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            throw atp::UsageError("cannot parse '" + item + "' as a number");
        }
        if (used != item.size()) throw atp::UsageError("cannot parse '" + item + "' as a number");
        out.push_back(v);
    }
    return out;
}

void write_file(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    out << text;
    if (!out) throw atp::Error("cannot write " + p.string());
}

bool within(double got, double want, double tol) { return std::abs(got - want) <= tol; }

int run_pipeline(const Common& c) {
    const auto cfg = resolve_config(c);
    atp::PipelineOptions opts;
    opts.jobs = c.jobs;
    opts.log = &std::cerr;
    const auto r = atp::run_pipeline(cfg, opts);
    std::cout << atp::aggregate_csv(r.methods);
    return 0;
}

int run_eval(const Common& c, const std::string& checkpoint, const std::string& alpha) {
    const auto cfg = resolve_config(c);
    atp::PipelineOptions opts;
    opts.jobs = c.jobs;
    const auto methods = atp::evaluate_saved(cfg, checkpoint, alpha.empty() ? std::nullopt : std::optional<fs::path>(alpha), opts);
    const std::string csv = atp::aggregate_csv(methods);
    if (!c.out.empty() || std::getenv("ATP_OUT_DIR")) write_file(output_dir(c.out, ".") / "eval_aggregate.csv", csv);
    std::cout << csv;
    return 0;
}

int analysis_toy(std::size_t samples, std::uint64_t seed, const fs::path& out) {
    atp::analysis::ToyConfig cfg;
    cfg.samples = samples;
    cfg.seed = seed;
    const auto res = atp::analysis::toy_experiment(cfg);
    const std::map<double, double> expected{{0.0, 0.89}, {1.0, 0.73}, {0.5, 0.83}, {-0.5, 0.92}};
    bool ok = within(res.train_accuracy, 0.89, 0.02);
    std::ostringstream csv;
    csv << std::setprecision(6) << "alpha,accuracy,running_mean,running_var\n";
    std::cout << std::fixed << std::setprecision(4) << "train accuracy " << res.train_accuracy << " (running mean "
              << res.running_mean << ", var " << res.running_var << ")\n";
    for (const auto& row : res.rows) {
        csv << row.alpha << ',' << row.accuracy << ',' << row.adapted_mean << ',' << row.adapted_var << '\n';
        std::cout << "alpha " << std::setw(7) << row.alpha << "  accuracy " << row.accuracy;
        if (auto it = expected.find(row.alpha); it != expected.end()) {
            const bool hit = within(row.accuracy, it->second, 0.02);
            ok = ok && hit;
            std::cout << "  expected " << it->second << (hit ? "  ok" : "  MISS");
        }
        std::cout << '\n';
    }
    write_file(out / "toy.csv", csv.str());
    return ok ? 0 : kCheckFailed;
}

int analysis_bound(const atp::analysis::BoundInput& b, std::optional<double> expect, double tol) {
    const auto v = atp::analysis::generalization_bound(b);
    std::cout << std::setprecision(10) << "log_bound " << v.log_bound << "\nbound " << v.value << "\nprobability "
              << v.probability << '\n';
    if (expect && !within(v.value, *expect, tol)) {
        std::cout << "MISS: expected " << *expect << " +- " << tol << '\n';
        return kCheckFailed;
    }
    return 0;
}

int analysis_prop31(const std::string& p_arg, const std::string& q_arg, std::size_t samples, std::uint64_t seed,
                    double separation, double std) {
    const auto p = parse_list(p_arg), q = parse_list(q_arg);
    if (p.size() != q.size() || p.size() < 2) throw atp::UsageError("--p and --q need the same length >= 2");
    const std::size_t c = p.size();
    atp::Tensor means = atp::Tensor::matrix(c, c);
    for (std::size_t k = 0; k < c; ++k) means(k, k) = separation / std::sqrt(2.0);
    const auto model = atp::analysis::calibrated_gaussian_classifier(means, std, p);
    const auto calibrated = atp::analysis::calibrate_last_layer(model, p, q);
    if (calibrated == model) {
        std::cout << "identity, max deviation 0\n";
        return 0;
    }
    const auto chk = atp::analysis::label_shift_calibration_check(means, std, p, q, samples, seed);
    std::cout << std::setprecision(6) << "max posterior deviation " << chk.max_posterior_deviation << "\nmodel CE "
              << chk.model_ce << "\nBayes CE " << chk.bayes_ce << "\nuncalibrated CE " << chk.uncalibrated_ce << '\n';
    const bool ok = chk.max_posterior_deviation < 1e-6 && std::abs(chk.model_ce - chk.bayes_ce) < 1e-3;
    std::cout << (ok ? "ok\n" : "MISS\n");
    return ok ? 0 : kCheckFailed;
}

int analysis_prop32(double r, double delta, std::size_t samples, std::uint64_t seed, bool cube) {
    const auto rep = atp::analysis::bn_align_check(0.0, 1.0, r, delta, samples, seed,
                                                   cube ? atp::analysis::FeatureTransform::cube
                                                        : atp::analysis::FeatureTransform::affine);
    std::cout << std::setprecision(6) << "adapted mean " << rep.adapted_mean << " (expected " << rep.expected_mean
              << ")\nadapted std " << rep.adapted_std << " (expected " << rep.expected_std << ")\nKS " << rep.ks << '\n';
    const bool ok = rep.ks < 0.05;
    std::cout << (ok ? "aligned\n" : "not aligned\n");
    return ok ? 0 : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ATP: learned per-module adaptation rates for test-time personalized federated learning"};
    app.require_subcommand(1);

    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", common.seed, "override the config seed");
        sub->add_option("--jobs", common.jobs, "worker threads (0 = all cores)");
        sub->add_option("--out", common.out, "output directory (overrides ATP_OUT_DIR and the config)");
    };

    auto* pipeline = app.add_subcommand("pipeline", "population, pretraining, ATP training and evaluation");
    add_common(pipeline);

    std::string checkpoint, alpha_file;
    auto* eval = app.add_subcommand("eval", "evaluate a saved checkpoint and alpha on the config's targets");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "checkpoint manifest (.json)")->required()->check(CLI::ExistingFile);
    eval->add_option("--alpha", alpha_file, "alpha file written by pipeline")->check(CLI::ExistingFile);

    auto* analysis = app.add_subcommand("analysis", "analytical checks");
    analysis->require_subcommand(1);
    std::string analysis_out;
    std::uint64_t seed = 0;
    analysis->add_option("--out", analysis_out, "directory for CSV reports");
    analysis->add_option("--seed", seed, "Monte-Carlo seed");

    std::size_t toy_samples = 100000;
    auto* toy = analysis->add_subcommand("toy", "single-BN toy experiment under label shift");
    toy->add_option("--samples", toy_samples, "Monte-Carlo samples");

    atp::analysis::BoundInput bound_in{1.0, 1.0, 1.0, 2.0, 100.0, 4.0, 0.5};
    std::optional<double> bound_expect;
    double bound_tol = 0.01;
    auto* bound = analysis->add_subcommand("bound", "generalization bound calculator");
    bound->add_option("--L", bound_in.lipschitz, "Lipschitz constant");
    bound->add_option("--H", bound_in.h_bound, "update-direction norm bound");
    bound->add_option("--R", bound_in.radius, "alpha-norm radius");
    bound->add_option("--d", bound_in.modules, "number of modules");
    bound->add_option("--N", bound_in.sources, "number of source clients");
    bound->add_option("--K", bound_in.batches, "batches per source");
    bound->add_option("--eps", bound_in.epsilon, "error tolerance");
    bound->add_option("--expect", bound_expect, "fail unless the bound equals this value");
    bound->add_option("--tol", bound_tol, "tolerance for --expect");

    std::string p_prior = "0.5,0.5", q_prior = "0.2,0.8";
    std::size_t prop31_samples = 100000;
    double separation = 3.0, class_std = 1.0;
    auto* prop31 = analysis->add_subcommand("prop31", "last-layer bias calibration under label shift");
    prop31->add_option("--p", p_prior, "training prior, comma separated");
    prop31->add_option("--q", q_prior, "test prior, comma separated");
    prop31->add_option("--samples", prop31_samples, "Monte-Carlo samples");
    prop31->add_option("--separation", separation, "distance between class means");
    prop31->add_option("--std", class_std, "class std");

    double r = 2.0, delta = 3.0;
    std::size_t prop32_samples = 10000;
    bool cube = false;
    auto* prop32 = analysis->add_subcommand("prop32", "BN statistic alignment under affine feature shift");
    prop32->add_option("--r", r, "scale");
    prop32->add_option("--delta", delta, "offset");
    prop32->add_option("--samples", prop32_samples, "samples");
    prop32->add_flag("--cube", cube, "cube the features before the affine map");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kBadInput;
    }

    try {
        if (*pipeline) return run_pipeline(common);
        if (*eval) return run_eval(common, checkpoint, alpha_file);
        const fs::path out = output_dir(analysis_out, "analysis_out");
        if (*toy) return analysis_toy(toy_samples, seed, out);
        if (*bound) return analysis_bound(bound_in, bound_expect, bound_tol);
        if (*prop31) return analysis_prop31(p_prior, q_prior, prop31_samples, seed, separation, class_std);
        if (*prop32) return analysis_prop32(r, delta, prop32_samples, seed, cube);
    } catch (const atp::StageError& e) {
        std::cerr << "error " << e.what() << '\n';
        if (e.numeric()) return kNumeric;
        return e.stage() == "population" ? kBadInput : kOther;
    } catch (const atp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kBadInput;
    } catch (const atp::UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kBadInput;
    } catch (const atp::DomainError& e) {
        std::cerr << "domain error: " << e.what() << '\n';
        return kBadInput;
    } catch (const atp::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kOther;
    }
    return kOther;
}
