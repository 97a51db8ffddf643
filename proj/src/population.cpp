#include "atp/population.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "atp/errors.hpp"

namespace atp::fedsim {

using nlohmann::json;

std::string to_string(ShiftKind k) {
    switch (k) {
        case ShiftKind::none: return "none";
        case ShiftKind::label: return "label";
        case ShiftKind::feature: return "feature";
        case ShiftKind::hybrid: return "hybrid";
    }
    return "?";
}

ShiftKind shift_kind_from_string(const std::string& s) {
    for (auto k : {ShiftKind::none, ShiftKind::label, ShiftKind::feature, ShiftKind::hybrid}) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("shift.kind: unknown value '" + s + "' (expected none, label, feature or hybrid)");
}

namespace {

bool has_label_shift(ShiftKind k) { return k == ShiftKind::label || k == ShiftKind::hybrid; }
bool has_feature_shift(ShiftKind k) { return k == ShiftKind::feature || k == ShiftKind::hybrid; }

void validate_range(const CorruptionRange& r, const std::string& field) {
    if (!(r.scale_min > 0.0) || !(r.scale_max >= r.scale_min)) {
        throw ConfigError(field + ": need 0 < scale_min <= scale_max");
    }
    if (!(r.offset_std >= 0.0)) throw ConfigError(field + ".offset_std must be >= 0");
    if (!(r.noise_min >= 0.0) || !(r.noise_max >= r.noise_min)) {
        throw ConfigError(field + ": need 0 <= noise_min <= noise_max");
    }
}

std::vector<std::size_t> class_counts(const ShiftConfig& cfg, Rng& rng) {
    std::vector<std::size_t> counts(cfg.num_classes, cfg.uniform_count);
    if (!has_label_shift(cfg.kind)) return counts;
    std::vector<std::size_t> order(cfg.num_classes);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < cfg.num_classes; ++i) {
        counts[order[i]] = i < cfg.major_classes ? cfg.major_count : cfg.minor_count;
    }
    return counts;
}

Corruption draw_corruption(const ShiftConfig& cfg, const CorruptionRange& range, Rng& rng) {
    Corruption c;
    c.offset.assign(cfg.feature_dim, 0.0);
    if (!has_feature_shift(cfg.kind)) return c;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double lo = std::log(range.scale_min), hi = std::log(range.scale_max);
    c.scale = std::exp(lo + (hi - lo) * u(rng));
    std::normal_distribution<double> n(0.0, 1.0);
    for (double& o : c.offset) o = range.offset_std * n(rng);
    c.noise = range.noise_min + (range.noise_max - range.noise_min) * u(rng);
    return c;
}

/// Source of clean class-conditional samples: either the Gaussian generator
/// or a finite pool dealt without replacement.
class SampleSource {
public:
    SampleSource(const ShiftConfig& cfg, Tensor means, std::uint64_t seed) : cfg_(cfg), means_(std::move(means)) {
        if (cfg.pool_per_class == 0) return;
        Rng rng = make_rng(seed, stream::population, {0xB001});
        pool_.resize(cfg.num_classes);
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
            for (std::size_t k = 0; k < cfg.pool_per_class; ++k) pool_[c].push_back(draw_gaussian(c, rng));
        }
        cursor_.assign(cfg.num_classes, 0);
    }

    SampleSource(const ShiftConfig& cfg, std::vector<std::vector<std::vector<double>>> pool)
        : cfg_(cfg), pool_(std::move(pool)), cursor_(pool_.size(), 0) {}

    std::vector<double> next(std::size_t cls, Rng& rng) {
        if (pool_.empty()) return draw_gaussian(cls, rng);
        if (cursor_[cls] >= pool_[cls].size()) {
            throw ConfigError("population: class " + std::to_string(cls) + " needs more than the " +
                              std::to_string(pool_[cls].size()) + " samples available in its pool");
        }
        return pool_[cls][cursor_[cls]++];
    }

private:
    std::vector<double> draw_gaussian(std::size_t cls, Rng& rng) const {
        std::normal_distribution<double> n(0.0, cfg_.class_std);
        std::vector<double> x(cfg_.feature_dim);
        for (std::size_t j = 0; j < x.size(); ++j) x[j] = means_(cls, j) + n(rng);
        return x;
    }

    const ShiftConfig& cfg_;
    Tensor means_;
    std::vector<std::vector<std::vector<double>>> pool_;
    std::vector<std::size_t> cursor_;
};

Population build_population(const ShiftConfig& cfg, SampleSource& source, std::size_t num_sources,
                            std::size_t num_targets, std::uint64_t seed) {
    if (num_sources == 0 || num_targets == 0) throw ConfigError("population: need at least one source and one target");
    Population pop;
    pop.config = cfg;
    for (std::size_t i = 0; i < num_sources + num_targets; ++i) {
        Rng rng = make_rng(seed, stream::client_data, {i});
        ClientSpec client;
        client.role = i < num_sources ? Role::source : Role::target;
        client.id = i;
        const auto counts = class_counts(cfg, rng);
        const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
        client.label_prior.resize(cfg.num_classes);
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
            client.label_prior[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
        }
        client.corruption = draw_corruption(
            cfg, client.role == Role::source ? cfg.source_corruption : cfg.target_corruption, rng);

        std::vector<std::pair<std::vector<double>, int>> samples;
        samples.reserve(total);
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
            for (std::size_t k = 0; k < counts[c]; ++k) samples.emplace_back(source.next(c, rng), static_cast<int>(c));
        }
        std::shuffle(samples.begin(), samples.end(), rng);

        std::normal_distribution<double> noise(0.0, 1.0);
        const auto& cor = client.corruption;
        Tensor x = Tensor::matrix(total, cfg.feature_dim);
        client.data.y.resize(total);
        for (std::size_t r = 0; r < total; ++r) {
            for (std::size_t j = 0; j < cfg.feature_dim; ++j) {
                double v = cor.scale * samples[r].first[j] + cor.offset[j];
                if (cor.noise > 0.0) v += cor.noise * noise(rng);
                x(r, j) = v;
            }
            client.data.y[r] = samples[r].second;
        }
        client.data.x = std::move(x);
        client.train_count = client.role == Role::source
                                 ? total - static_cast<std::size_t>(std::llround(cfg.validation_fraction *
                                                                                 static_cast<double>(total)))
                                 : total;
        (client.role == Role::source ? pop.sources : pop.targets).push_back(std::move(client));
    }
    return pop;
}

Dataset slice(const Dataset& d, std::size_t first, std::size_t count) {
    Dataset out;
    out.x = d.x.slice_rows(first, count);
    out.y.assign(d.y.begin() + static_cast<std::ptrdiff_t>(first),
                 d.y.begin() + static_cast<std::ptrdiff_t>(first + count));
    return out;
}

}  // namespace

void ShiftConfig::validate() const {
    if (num_classes < 2) throw ConfigError("shift.num_classes must be >= 2");
    if (feature_dim == 0) throw ConfigError("shift.feature_dim must be positive");
    if (has_label_shift(kind)) {
        if (major_classes + minor_classes != num_classes) {
            throw ConfigError("shift: major_classes + minor_classes must equal num_classes");
        }
        if (major_classes == 0 || minor_classes == 0 || major_count == 0 || minor_count == 0) {
            throw ConfigError("shift: step-partition counts must be positive");
        }
    } else if (uniform_count == 0) {
        throw ConfigError("shift.uniform_count must be positive");
    }
    if (!(class_std > 0.0)) throw ConfigError("shift.class_std must be positive");
    if (!(class_separation >= 0.0)) throw ConfigError("shift.class_separation must be >= 0");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
        throw ConfigError("shift.validation_fraction must lie in [0, 1)");
    }
    validate_range(source_corruption, "shift.source_corruption");
    validate_range(target_corruption, "shift.target_corruption");
}

bool Corruption::is_identity() const {
    return scale == 1.0 && noise == 0.0 && std::all_of(offset.begin(), offset.end(), [](double o) { return o == 0.0; });
}

Dataset ClientSpec::train() const { return slice(data, 0, train_count); }

Dataset ClientSpec::validation() const { return slice(data, train_count, data.size() - train_count); }

namespace {

json range_to_json(const CorruptionRange& r) {
    return {{"scale_min", r.scale_min},
            {"scale_max", r.scale_max},
            {"offset_std", r.offset_std},
            {"noise_min", r.noise_min},
            {"noise_max", r.noise_max}};
}

CorruptionRange range_from_json(const json& j) {
    CorruptionRange r;
    r.scale_min = j.value("scale_min", r.scale_min);
    r.scale_max = j.value("scale_max", r.scale_max);
    r.offset_std = j.value("offset_std", r.offset_std);
    r.noise_min = j.value("noise_min", r.noise_min);
    r.noise_max = j.value("noise_max", r.noise_max);
    return r;
}

}  // namespace

json to_json(const ShiftConfig& c) {
    return {{"kind", to_string(c.kind)},
            {"num_classes", c.num_classes},
            {"feature_dim", c.feature_dim},
            {"major_classes", c.major_classes},
            {"major_count", c.major_count},
            {"minor_classes", c.minor_classes},
            {"minor_count", c.minor_count},
            {"uniform_count", c.uniform_count},
            {"class_separation", c.class_separation},
            {"class_std", c.class_std},
            {"source_corruption", range_to_json(c.source_corruption)},
            {"target_corruption", range_to_json(c.target_corruption)},
            {"pool_per_class", c.pool_per_class},
            {"validation_fraction", c.validation_fraction}};
}

ShiftConfig shift_config_from_json(const json& j) {
    ShiftConfig c;
    try {
        c.kind = shift_kind_from_string(j.value("kind", std::string("none")));
        c.num_classes = j.value("num_classes", c.num_classes);
        c.feature_dim = j.value("feature_dim", c.feature_dim);
        c.major_classes = j.value("major_classes", c.major_classes);
        c.major_count = j.value("major_count", c.major_count);
        c.minor_classes = j.value("minor_classes", c.minor_classes);
        c.minor_count = j.value("minor_count", c.minor_count);
        c.uniform_count = j.value("uniform_count", c.uniform_count);
        c.class_separation = j.value("class_separation", c.class_separation);
        c.class_std = j.value("class_std", c.class_std);
        if (j.contains("source_corruption")) c.source_corruption = range_from_json(j.at("source_corruption"));
        if (j.contains("target_corruption")) c.target_corruption = range_from_json(j.at("target_corruption"));
        c.pool_per_class = j.value("pool_per_class", c.pool_per_class);
        c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("shift: ") + e.what());
    }
    c.validate();
    return c;
}

Population sample_population(const ShiftConfig& config, std::size_t num_sources, std::size_t num_targets,
                             std::uint64_t seed) {
    config.validate();
    if (config.num_classes > config.feature_dim) {
        throw ConfigError("shift: num_classes must not exceed feature_dim (class means sit on simplex vertices)");
    }
    // vertex c of the simplex: scaled unit vector e_c, pairwise distance = separation
    Tensor means = Tensor::matrix(config.num_classes, config.feature_dim);
    for (std::size_t c = 0; c < config.num_classes; ++c) means(c, c) = config.class_separation / std::sqrt(2.0);
    SampleSource source(config, means, seed);
    auto pop = build_population(config, source, num_sources, num_targets, seed);
    pop.class_means = std::move(means);
    return pop;
}

Dataset read_labeled_csv(const std::filesystem::path& csv) {
    std::ifstream in(csv);
    if (!in) throw ConfigError("csv: cannot open " + csv.string());
    std::vector<double> values;
    std::vector<int> labels;
    std::size_t cols = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        std::vector<double> row;
        try {
            for (const auto& s : fields) {
                std::size_t used = 0;
                row.push_back(std::stod(s, &used));
            }
        } catch (const std::exception&) {
            if (line_no == 1) continue;  // header
            throw ConfigError("csv: non-numeric field on line " + std::to_string(line_no));
        }
        if (row.size() < 2) throw ConfigError("csv: line " + std::to_string(line_no) + " needs features and a label");
        if (cols == 0) cols = row.size();
        if (row.size() != cols) throw ConfigError("csv: ragged row on line " + std::to_string(line_no));
        const double lbl = row.back();
        if (lbl < 0 || lbl != std::floor(lbl)) {
            throw ConfigError("csv: label on line " + std::to_string(line_no) + " is not a non-negative integer");
        }
        labels.push_back(static_cast<int>(lbl));
        values.insert(values.end(), row.begin(), row.end() - 1);
    }
    if (labels.empty()) throw ConfigError("csv: no rows in " + csv.string());
    Dataset d;
    d.x = Tensor({labels.size(), cols - 1}, std::move(values));
    d.y = std::move(labels);
    return d;
}

Population population_from_csv(const std::filesystem::path& csv, ShiftConfig config, std::size_t num_sources,
                               std::size_t num_targets, std::uint64_t seed) {
    Dataset raw = read_labeled_csv(csv);
    config.feature_dim = raw.x.cols();
    const int max_label = *std::max_element(raw.y.begin(), raw.y.end());
    if (static_cast<std::size_t>(max_label) >= config.num_classes) {
        throw ConfigError("csv: label " + std::to_string(max_label) + " exceeds shift.num_classes - 1");
    }
    config.validate();
    std::vector<std::vector<std::vector<double>>> pool(config.num_classes);
    for (std::size_t r = 0; r < raw.size(); ++r) {
        auto row = raw.x.row(r);
        pool[static_cast<std::size_t>(raw.y[r])].emplace_back(row.begin(), row.end());
    }
    Rng rng = make_rng(seed, stream::population, {0xC5F});
    for (auto& cls : pool) std::shuffle(cls.begin(), cls.end(), rng);
    SampleSource source(config, std::move(pool));
    return build_population(config, source, num_sources, num_targets, seed);
}

std::vector<Batch> make_batches(const Dataset& data, std::size_t batch_size, Rng* shuffle) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    if (shuffle) std::shuffle(order.begin(), order.end(), *shuffle);
    std::vector<Batch> out;
    for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size) {
        std::span<const std::size_t> idx(order.data() + start, batch_size);
        Batch b;
        b.x = data.x.gather_rows(idx);
        b.y.reserve(batch_size);
        for (auto i : idx) b.y.push_back(data.y[i]);
        out.push_back(std::move(b));
    }
    return out;
}

std::vector<Tensor> unlabeled_batches(const Dataset& data, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    std::vector<Tensor> out;
    for (std::size_t start = 0; start + batch_size <= data.size(); start += batch_size) {
        out.push_back(data.x.slice_rows(start, batch_size));
    }
    return out;
}

std::vector<double> pooled_label_prior(std::span<const ClientSpec> clients, std::size_t num_classes) {
    std::vector<double> counts(num_classes, 0.0);
    double total = 0.0;
    for (const auto& c : clients) {
        for (std::size_t i = 0; i < c.train_count; ++i) {
            counts[static_cast<std::size_t>(c.data.y[i])] += 1.0;
            total += 1.0;
        }
    }
    if (total > 0) {
        for (double& v : counts) v /= total;
    }
    return counts;
}

}  // namespace atp::fedsim
