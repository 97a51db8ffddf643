#include "atp/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "atp/errors.hpp"
#include "atp/model.hpp"

namespace atp {

using nlohmann::json;

namespace {

// Parsed text yields unsigned numbers, JSON built in code yields signed ones.
bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_, "expected an object");
    }

    [[noreturn]] static void fail(const std::string& where, const std::string& what) {
        throw ConfigError(where + ": " + what);
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    const json& object(const std::string& key) {
        if (!has(key)) fail(at(key), "required block is missing");
        return j_.at(key);
    }

    void count(const std::string& key, std::size_t& out, bool positive = false) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!non_negative_integer(v)) fail(at(key), "expected a non-negative integer");
        out = v.get<std::size_t>();
        if (positive && out == 0) fail(at(key), "must be positive");
    }

    void u64(const std::string& key, std::uint64_t& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!non_negative_integer(v)) fail(at(key), "expected a non-negative integer");
        out = v.get<std::uint64_t>();
    }

    void real(const std::string& key, double& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number()) fail(at(key), "expected a number");
        out = v.get<double>();
        if (!std::isfinite(out)) fail(at(key), "must be finite");
    }

    void boolean(const std::string& key, bool& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_boolean()) fail(at(key), "expected true or false");
        out = v.get<bool>();
    }

    void string(const std::string& key, std::string& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_string()) fail(at(key), "expected a string");
        out = v.get<std::string>();
    }

    template <class Enum, class Parse>
    void enumeration(const std::string& key, Enum& out, Parse parse) {
        std::string s;
        if (!has(key)) return;
        string(key, s);
        try {
            out = parse(s);
        } catch (const Error& e) {
            fail(at(key), e.what());
        }
    }

    void reals(const std::string& key, std::vector<double>& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_array()) fail(at(key), "expected an array of numbers");
        out.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number()) fail(at(key) + "[" + std::to_string(i) + "]", "expected a number");
            out.push_back(v[i].get<double>());
        }
    }

    void counts(const std::string& key, std::vector<std::size_t>& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_array()) fail(at(key), "expected an array of positive integers");
        out.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!non_negative_integer(v[i]) || v[i].get<std::size_t>() == 0) {
                fail(at(key) + "[" + std::to_string(i) + "]", "expected a positive integer");
            }
            out.push_back(v[i].get<std::size_t>());
        }
    }

    void strings(const std::string& key, std::vector<std::string>& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_array()) fail(at(key), "expected an array of strings");
        out.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_string()) fail(at(key) + "[" + std::to_string(i) + "]", "expected a string");
            out.push_back(v[i].get<std::string>());
        }
    }

    void finish() const {
        for (const auto& [k, _] : j_.items()) {
            if (!seen_.contains(k)) fail(at(k), "unknown field");
        }
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

fedsim::CorruptionRange parse_range(const json& j, const std::string& path) {
    Reader r(j, path);
    fedsim::CorruptionRange c;
    r.real("scale_min", c.scale_min);
    r.real("scale_max", c.scale_max);
    r.real("offset_std", c.offset_std);
    r.real("noise_min", c.noise_min);
    r.real("noise_max", c.noise_max);
    r.finish();
    return c;
}

fedsim::ShiftConfig parse_shift(const json& j, const std::string& path) {
    Reader r(j, path);
    fedsim::ShiftConfig c;
    r.enumeration("kind", c.kind, fedsim::shift_kind_from_string);
    r.count("num_classes", c.num_classes);
    r.count("feature_dim", c.feature_dim);
    r.count("major_classes", c.major_classes);
    r.count("major_count", c.major_count);
    r.count("minor_classes", c.minor_classes);
    r.count("minor_count", c.minor_count);
    r.count("uniform_count", c.uniform_count);
    r.real("class_separation", c.class_separation);
    r.real("class_std", c.class_std);
    if (r.has("source_corruption")) c.source_corruption = parse_range(j.at("source_corruption"), r.at("source_corruption"));
    if (r.has("target_corruption")) c.target_corruption = parse_range(j.at("target_corruption"), r.at("target_corruption"));
    r.count("pool_per_class", c.pool_per_class);
    r.real("validation_fraction", c.validation_fraction);
    r.finish();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        Reader::fail(path, e.what());
    }
    return c;
}

const std::set<std::string> kKnownMethods{"no_adapt", "bn_adapt", "tent", "em", "atp_batch", "atp_online"};

}  // namespace

RunConfig parse_run_config(const json& j) {
    Reader root(j, "");
    RunConfig c;
    if (!root.has("seed")) Reader::fail("seed", "required field is missing (runs are never seeded from the clock)");
    root.u64("seed", c.seed);

    {
        const json& pj = root.object("population");
        Reader r(pj, "population");
        r.count("sources", c.population.sources, true);
        r.count("targets", c.population.targets, true);
        c.population.shift = parse_shift(r.object("shift"), "population.shift");
        if (r.has("csv")) {
            std::string s;
            r.string("csv", s);
            c.population.csv = s;
        }
        r.finish();
    }
    {
        Reader r(root.object("model"), "model");
        r.counts("hidden", c.model.hidden);
        r.boolean("batchnorm", c.model.batchnorm);
        r.real("bn_epsilon", c.model.bn_epsilon);
        if (!(c.model.bn_epsilon > 0.0)) Reader::fail("model.bn_epsilon", "must be positive");
        r.finish();
    }
    {
        Reader r(root.object("pretrain"), "pretrain");
        auto& p = c.pretrain;
        r.count("rounds", p.rounds);
        r.count("cohort", p.cohort, true);
        r.real("lr", p.lr);
        r.count("batch_size", p.batch_size, true);
        r.count("local_epochs", p.local_epochs, true);
        r.real("bn_momentum", p.bn_momentum);
        r.enumeration("bn_mode", p.bn_mode, fedsim::bn_training_from_string);
        r.finish();
        if (p.lr < 0.0) Reader::fail("pretrain.lr", "must be non-negative");
        if (p.cohort > c.population.sources) Reader::fail("pretrain.cohort", "exceeds population.sources");
        if (p.batch_size < 2) Reader::fail("pretrain.batch_size", "must be at least 2");
        if (!(p.bn_momentum >= 0.0 && p.bn_momentum <= 1.0)) Reader::fail("pretrain.bn_momentum", "must lie in [0, 1]");
    }
    {
        Reader r(root.object("atp"), "atp");
        auto& a = c.atp;
        r.count("rounds", a.rounds);
        r.count("cohort", a.cohort, true);
        r.real("eta", a.eta);
        r.count("batch_size", a.batch_size, true);
        r.count("local_epochs", a.local_epochs, true);
        r.enumeration("mask", a.mask, alpha_mask_from_string);
        r.boolean("sqrt_normalize", a.sqrt_normalize);
        r.boolean("shuffle", a.shuffle);
        r.enumeration("split", a.split, fedsim::atp_split_from_string);
        r.finish();
        if (a.eta < 0.0) Reader::fail("atp.eta", "must be non-negative");
        if (a.cohort > c.population.sources) Reader::fail("atp.cohort", "exceeds population.sources");
        if (a.batch_size < 2) Reader::fail("atp.batch_size", "must be at least 2");
    }
    {
        Reader r(root.object("eval"), "eval");
        auto& e = c.eval;
        r.count("batch_size", e.batch_size, true);
        r.strings("methods", e.methods);
        r.boolean("ablations", e.ablations);
        r.reals("tent_lrs", e.tent_lrs);
        r.count("tent_steps", e.tent_steps, true);
        r.count("em_iterations", e.em_iterations, true);
        r.real("em_tol", e.em_tol);
        r.finish();
        if (e.batch_size < 2) Reader::fail("eval.batch_size", "must be at least 2");
        for (std::size_t i = 0; i < e.methods.size(); ++i) {
            if (!kKnownMethods.contains(e.methods[i])) {
                Reader::fail("eval.methods[" + std::to_string(i) + "]", "unknown method '" + e.methods[i] + "'");
            }
        }
        if (e.tent_lrs.empty()) Reader::fail("eval.tent_lrs", "must not be empty");
        for (double lr : e.tent_lrs) {
            if (lr < 0.0) Reader::fail("eval.tent_lrs", "learning rates must be non-negative");
        }
    }
    if (root.has("output_dir")) {
        std::string s;
        root.string("output_dir", s);
        c.output_dir = s;
    }
    root.finish();
    c.pretrain.seed = c.seed;
    c.atp.seed = c.seed;
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ": cannot open config file");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": invalid JSON: " + e.what());
    }
    return parse_run_config(j);
}

json RunConfig::to_json() const {
    json pop{{"sources", population.sources},
             {"targets", population.targets},
             {"shift", fedsim::to_json(population.shift)}};
    if (population.csv) pop["csv"] = population.csv->string();
    return {{"seed", seed},
            {"population", pop},
            {"model", {{"hidden", model.hidden}, {"batchnorm", model.batchnorm}, {"bn_epsilon", model.bn_epsilon}}},
            {"pretrain",
             {{"rounds", pretrain.rounds},
              {"cohort", pretrain.cohort},
              {"lr", pretrain.lr},
              {"batch_size", pretrain.batch_size},
              {"local_epochs", pretrain.local_epochs},
              {"bn_momentum", pretrain.bn_momentum},
              {"bn_mode", fedsim::to_string(pretrain.bn_mode)}}},
            {"atp",
             {{"rounds", atp.rounds},
              {"cohort", atp.cohort},
              {"eta", atp.eta},
              {"batch_size", atp.batch_size},
              {"local_epochs", atp.local_epochs},
              {"mask", to_string(atp.mask)},
              {"sqrt_normalize", atp.sqrt_normalize},
              {"shuffle", atp.shuffle},
              {"split", fedsim::to_string(atp.split)}}},
            {"eval",
             {{"batch_size", eval.batch_size},
              {"methods", eval.methods},
              {"ablations", eval.ablations},
              {"tent_lrs", eval.tent_lrs},
              {"tent_steps", eval.tent_steps},
              {"em_iterations", eval.em_iterations},
              {"em_tol", eval.em_tol}}},
            {"output_dir", output_dir.string()}};
}

std::string RunConfig::hash() const {
    json j = to_json();
    j.erase("output_dir");
    const std::string s = j.dump();
    const auto h = fnv1a({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace atp
