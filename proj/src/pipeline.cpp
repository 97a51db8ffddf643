#include "atp/pipeline.hpp"

#include <fstream>
#include <ostream>
#include <sstream>

#include "atp/checkpoint.hpp"
#include "atp/parallel.hpp"

namespace atp {

namespace fs = std::filesystem;
using nlohmann::json;

const MethodResult& PipelineResult::method(const std::string& name) const {
    for (const auto& m : methods) {
        if (m.name == name) return m;
    }
    throw UsageError("pipeline result has no method '" + name + "'");
}

namespace {

template <class Fn>
auto stage(const char* name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const NumericError& e) {
        throw StageError(name, e.what(), true);
    } catch (const std::exception& e) {
        throw StageError(name, e.what(), false);
    }
}

void log_line(const PipelineOptions& o, const std::string& s) {
    if (o.log) *o.log << s << '\n';
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
    if (!out) throw Error("write failed for " + p.string());
}

fedsim::Population make_population(const RunConfig& c) {
    if (c.population.csv) {
        return fedsim::population_from_csv(*c.population.csv, c.population.shift, c.population.sources,
                                           c.population.targets, c.seed);
    }
    return fedsim::sample_population(c.population.shift, c.population.sources, c.population.targets, c.seed);
}

ModelSpec make_model_spec(const RunConfig& c, std::size_t input_dim, std::size_t classes) {
    return make_mlp(input_dim, c.model.hidden, classes, c.model.batchnorm, c.model.bn_epsilon);
}

tta::EvalOptions eval_options(const RunConfig& c, std::span<const fedsim::ClientSpec> sources, double tent_lr) {
    tta::EvalOptions o;
    o.batch_size = c.eval.batch_size;
    o.tent_lr = tent_lr;
    o.tent_steps = c.eval.tent_steps;
    o.em_iterations = c.eval.em_iterations;
    o.em_tol = c.eval.em_tol;
    o.train_prior = fedsim::pooled_label_prior(sources, c.population.shift.num_classes);
    return o;
}

struct EvalJob {
    std::string name;
    tta::Method method;
    const AdaptationRates* alpha;
};

std::vector<MethodResult> run_eval(const std::vector<EvalJob>& jobs, std::span<const fedsim::ClientSpec> clients,
                                   const ParameterStore& global, const tta::EvalOptions& opts, std::size_t threads) {
    std::vector<MethodResult> out(jobs.size());
    for (std::size_t m = 0; m < jobs.size(); ++m) {
        out[m].name = jobs[m].name;
        out[m].clients.resize(clients.size());
    }
    parallel_for(jobs.size() * clients.size(), threads, [&](std::size_t t) {
        const std::size_t m = t / clients.size(), c = t % clients.size();
        out[m].clients[c] = tta::evaluate_client(clients[c], global, jobs[m].alpha, jobs[m].method, opts);
    });
    for (auto& r : out) {
        std::vector<double> acc, ce;
        for (const auto& c : r.clients) {
            if (c.batches.empty()) continue;
            acc.push_back(c.accuracy);
            ce.push_back(c.ce);
        }
        r.accuracy = tta::summarize(acc);
        r.ce = tta::summarize(ce);
    }
    return out;
}

std::vector<fedsim::ClientSpec> validation_streams(std::span<const fedsim::ClientSpec> sources) {
    std::vector<fedsim::ClientSpec> out;
    out.reserve(sources.size());
    for (const auto& s : sources) {
        fedsim::ClientSpec v;
        v.id = s.id;
        v.role = fedsim::Role::target;
        v.label_prior = s.label_prior;
        v.corruption = s.corruption;
        v.data = s.validation();
        out.push_back(std::move(v));
    }
    return out;
}

json ledger_json(const fedsim::CommLedger& l) {
    return {{"D", l.num_params},
            {"d", l.num_modules},
            {"T", l.rounds},
            {"cohort", l.cohort},
            {"sources", l.num_sources},
            {"model_broadcast_scalars", l.model_broadcast_scalars},
            {"alpha_scalars_exchanged", l.alpha_scalars_exchanged},
            {"bytes_model_broadcast", l.bytes_model_broadcast()},
            {"bytes_alpha_exchanged", l.bytes_alpha_exchanged()},
            {"atp_scalars_per_path", l.atp_scalars_per_path()},
            {"fedavg_scalars_per_path", l.fedavg_scalars_per_path()}};
}

void write_outputs(const RunConfig& c, const PipelineResult& r) {
    const fs::path dir = c.output_dir;
    fs::create_directories(dir / "eval");
    fs::create_directories(dir / "checkpoint");
    const auto& manifest = r.global->manifest();

    write_text(dir / "config.resolved.json", c.to_json().dump(2) + "\n");
    save_checkpoint(*r.global, dir / "checkpoint" / "global.json");
    save_alpha(r.atp.alpha, manifest, dir / "alpha.json");
    write_text(dir / "pretrain_rounds.csv", rounds_csv(r.pretrain_rounds));
    write_text(dir / "atp_rounds.csv", rounds_csv(r.atp.rounds));
    for (const auto& [name, res] : r.ablations) {
        save_alpha(res.alpha, manifest, dir / ("alpha_" + name.substr(4) + ".json"));
        write_text(dir / (name + "_rounds.csv"), rounds_csv(res.rounds));
    }
    write_text(dir / "alpha_modules.csv", r.alpha_report.rows_csv());
    write_text(dir / "alpha_groups.csv", r.alpha_report.groups_csv());
    write_text(dir / "ledger.json", ledger_json(r.atp.ledger).dump(2) + "\n");
    for (const auto& m : r.methods) {
        json arr = json::array();
        for (const auto& cl : m.clients) {
            json j = tta::to_json(cl);
            j["method"] = m.name;
            arr.push_back(std::move(j));
        }
        write_text(dir / "eval" / (m.name + ".json"), arr.dump(2) + "\n");
    }
    write_text(dir / "aggregate.csv", aggregate_csv(r.methods));

    json methods = json::object();
    for (const auto& m : r.methods) {
        methods[m.name] = {{"accuracy_mean", m.accuracy.mean},
                           {"accuracy_sd", m.accuracy.sd},
                           {"ce_mean", m.ce.mean},
                           {"ce_sd", m.ce.sd},
                           {"clients", m.accuracy.n}};
    }
    json groups = json::object();
    for (const auto& g : r.alpha_report.groups) groups[g.key] = g.mean;
    json summary{{"config_hash", r.config_hash},
                 {"seed", c.seed},
                 {"D", manifest.num_params()},
                 {"d", manifest.num_modules()},
                 {"final_pretrain_loss", r.pretrain_rounds.empty() ? 0.0 : r.pretrain_rounds.back().train_loss},
                 {"alpha_norm", r.atp.alpha.norm()},
                 {"alpha_groups", groups},
                 {"tent_lr", r.tent_lr},
                 {"source_validation",
                  {{"no_adapt", r.source_no_adapt_accuracy}, {"atp_batch", r.source_atp_accuracy}}},
                 {"methods", methods}};
    write_text(dir / "summary.json", summary.dump(2) + "\n");
}

}  // namespace

std::string rounds_csv(const std::vector<fedsim::PretrainRound>& rounds) {
    std::string s = "round,train_loss\n";
    for (const auto& r : rounds) s += std::to_string(r.round) + "," + fmt(r.train_loss) + "\n";
    return s;
}

std::string rounds_csv(const std::vector<fedsim::AtpRound>& rounds) {
    std::string s = "round,mean_ce,mean_accuracy,alpha_norm\n";
    for (const auto& r : rounds) {
        s += std::to_string(r.round) + "," + fmt(r.mean_ce) + "," + fmt(r.mean_accuracy) + "," + fmt(r.alpha_norm) +
             "\n";
    }
    return s;
}

std::string aggregate_csv(const std::vector<MethodResult>& methods) {
    std::string s = "method,clients,accuracy_mean,accuracy_sd,ce_mean,ce_sd\n";
    for (const auto& m : methods) {
        s += m.name + "," + std::to_string(m.accuracy.n) + "," + fmt(m.accuracy.mean) + "," + fmt(m.accuracy.sd) +
             "," + fmt(m.ce.mean) + "," + fmt(m.ce.sd) + "\n";
    }
    return s;
}

PipelineResult run_pipeline(const RunConfig& c, const PipelineOptions& options) {
    const std::size_t jobs = resolve_jobs(options.jobs);
    PipelineResult r;
    r.config_hash = c.hash();
    log_line(options, "config " + r.config_hash + ", seed " + std::to_string(c.seed) + ", jobs " + std::to_string(jobs));

    r.population = stage("population", [&] { return make_population(c); });
    const auto& sources = r.population.sources;
    const std::size_t classes = r.population.config.num_classes;
    const std::size_t input_dim = sources.front().data.x.cols();
    log_line(options, "population: " + std::to_string(sources.size()) + " sources, " +
                          std::to_string(r.population.targets.size()) + " targets");

    r.global = stage("pretrain", [&] {
        const auto init = ParameterStore::initialize(make_model_spec(c, input_dim, classes), c.seed);
        auto res = fedsim::fedavg_pretrain(sources, init, c.pretrain, jobs);
        r.pretrain_rounds = std::move(res.rounds);
        return std::move(res.model);
    });
    const ParameterStore& global = *r.global;
    log_line(options, "pretrain: D=" + std::to_string(global.size()) +
                          " d=" + std::to_string(global.manifest().num_modules()) + " final loss " +
                          (r.pretrain_rounds.empty() ? std::string("n/a") : fmt(r.pretrain_rounds.back().train_loss)));

    stage("atp", [&] {
        r.atp = fedsim::atp_train(sources, global, c.atp, jobs);
        if (c.eval.ablations) {
            for (auto [name, mask] : {std::pair{"atp_params", AlphaMask::params_only},
                                      std::pair{"atp_stats", AlphaMask::stats_only}}) {
                auto cfg = c.atp;
                cfg.mask = mask;
                r.ablations.emplace(name, fedsim::atp_train(sources, global, cfg, jobs));
            }
        }
        r.alpha_report = analysis::alpha_report(r.atp.alpha, global.manifest());
        return 0;
    });
    log_line(options, "atp: |alpha| = " + fmt(r.atp.alpha.norm()));

    stage("eval", [&] {
        // baselines are tuned on the sources' held-out data, never on targets
        const auto val = validation_streams(sources);
        auto opts = eval_options(c, sources, 0.0);
        std::vector<EvalJob> tuning;
        for (double lr : c.eval.tent_lrs) tuning.push_back({fmt(lr), tta::Method::tent, nullptr});
        tuning.push_back({"no_adapt", tta::Method::no_adapt, nullptr});
        tuning.push_back({"atp_batch", tta::Method::atp_batch, &r.atp.alpha});
        const auto tuned = run_eval(tuning, val, global, opts, jobs);
        double best = -1.0;
        for (std::size_t i = 0; i < c.eval.tent_lrs.size(); ++i) {
            if (tuned[i].accuracy.mean > best) {
                best = tuned[i].accuracy.mean;
                r.tent_lr = c.eval.tent_lrs[i];
            }
        }
        r.source_no_adapt_accuracy = tuned[c.eval.tent_lrs.size()].accuracy.mean;
        r.source_atp_accuracy = tuned[c.eval.tent_lrs.size() + 1].accuracy.mean;
        opts.tent_lr = r.tent_lr;

        std::vector<EvalJob> eval_jobs;
        for (const auto& name : c.eval.methods) {
            const auto m = tta::method_from_string(name);
            const bool atp = m == tta::Method::atp_batch || m == tta::Method::atp_online;
            eval_jobs.push_back({name, m, atp ? &r.atp.alpha : nullptr});
        }
        for (const auto& [name, res] : r.ablations) eval_jobs.push_back({name, tta::Method::atp_batch, &res.alpha});
        r.methods = run_eval(eval_jobs, r.population.targets, global, opts, jobs);
        return 0;
    });
    for (const auto& m : r.methods) {
        log_line(options, "eval " + m.name + ": accuracy " + fmt(m.accuracy.mean) + " +- " + fmt(m.accuracy.sd));
    }

    if (options.write_outputs) {
        stage("output", [&] {
            write_outputs(c, r);
            return 0;
        });
        log_line(options, "outputs written to " + c.output_dir.string());
    }
    return r;
}

std::vector<MethodResult> evaluate_saved(const RunConfig& c, const fs::path& checkpoint,
                                         const std::optional<fs::path>& alpha_file, const PipelineOptions& options) {
    const auto population = stage("population", [&] { return make_population(c); });
    const auto global = stage("eval", [&] { return load_checkpoint(checkpoint); });
    return stage("eval", [&] {
        std::optional<AdaptationRates> alpha;
        if (alpha_file) alpha = load_alpha(global.manifest(), *alpha_file);
        const auto opts = eval_options(c, population.sources, c.eval.tent_lrs.front());
        std::vector<EvalJob> jobs;
        for (const auto& name : c.eval.methods) {
            const auto m = tta::method_from_string(name);
            const bool atp = m == tta::Method::atp_batch || m == tta::Method::atp_online;
            if (atp && !alpha) throw UsageError("method '" + name + "' needs --alpha");
            jobs.push_back({name, m, atp ? &*alpha : nullptr});
        }
        return run_eval(jobs, population.targets, global, opts, resolve_jobs(options.jobs));
    });
}

}  // namespace atp
