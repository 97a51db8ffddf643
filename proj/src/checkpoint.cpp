#include "atp/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include "atp/errors.hpp"

namespace atp {

using nlohmann::json;

json model_spec_to_json(const ModelSpec& spec) {
    json layers = json::array();
    for (const auto& l : spec.layers) {
        layers.push_back({{"kind", to_string(l.kind)}, {"input_dim", l.input_dim}, {"output_dim", l.output_dim}});
    }
    return {{"layers", layers}, {"bn_epsilon", spec.bn_epsilon}};
}

ModelSpec model_spec_from_json(const json& j) {
    ModelSpec spec;
    try {
        for (const auto& l : j.at("layers")) {
            spec.layers.push_back({layer_kind_from_string(l.at("kind").get<std::string>()),
                                   l.at("input_dim").get<std::size_t>(), l.at("output_dim").get<std::size_t>()});
        }
        spec.bn_epsilon = j.value("bn_epsilon", 1e-5);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

std::vector<std::filesystem::path> save_checkpoint(const ParameterStore& model,
                                                   const std::filesystem::path& manifest_path,
                                                   CheckpointFormat format) {
    json modules = json::array();
    for (const auto& e : model.manifest().entries()) {
        modules.push_back({{"name", e.name},
                           {"kind", to_string(e.kind)},
                           {"role", to_string(e.role)},
                           {"offset", e.offset},
                           {"length", e.length},
                           {"shape", e.shape}});
    }
    json doc = {{"format", "atp-checkpoint/1"},
                {"model", model_spec_to_json(model.spec())},
                {"modules", modules},
                {"num_params", model.size()}};

    std::vector<std::filesystem::path> written{manifest_path};
    if (format == CheckpointFormat::single_json) {
        doc["params"] = std::vector<double>(model.values().begin(), model.values().end());
    } else {
        auto bin_path = manifest_path;
        bin_path.replace_extension(".bin");
        doc["params_file"] = bin_path.filename().string();
        doc["dtype"] = "float64-le";
        std::ofstream bin(bin_path, std::ios::binary);
        if (!bin) throw ConfigError("checkpoint: cannot open " + bin_path.string());
        for (double v : model.values()) {
            auto bits = std::bit_cast<std::uint64_t>(v);
            unsigned char bytes[8];
            for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
            bin.write(reinterpret_cast<const char*>(bytes), 8);
        }
        written.push_back(bin_path);
    }
    std::ofstream out(manifest_path);
    if (!out) throw ConfigError("checkpoint: cannot open " + manifest_path.string());
    out << doc.dump(2) << '\n';
    return written;
}

ParameterStore load_checkpoint(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw ConfigError("checkpoint: cannot open " + manifest_path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("checkpoint: " + std::string(e.what()));
    }
    const ModelSpec spec = model_spec_from_json(doc.at("model"));
    ParameterStore store(spec);

    // the stored manifest must agree with the one implied by the layers
    const auto& modules = doc.at("modules");
    if (modules.size() != store.manifest().num_modules()) throw UsageError("checkpoint: module count mismatch");
    for (std::size_t i = 0; i < modules.size(); ++i) {
        const auto& e = store.manifest()[i];
        if (modules[i].at("name").get<std::string>() != e.name ||
            modules[i].at("offset").get<std::size_t>() != e.offset ||
            modules[i].at("length").get<std::size_t>() != e.length) {
            throw UsageError("checkpoint: manifest entry " + std::to_string(i) + " does not match model layers");
        }
    }

    std::vector<double> values;
    if (doc.contains("params")) {
        values = doc.at("params").get<std::vector<double>>();
    } else {
        auto bin_path = manifest_path.parent_path() / doc.at("params_file").get<std::string>();
        std::ifstream bin(bin_path, std::ios::binary);
        if (!bin) throw ConfigError("checkpoint: cannot open " + bin_path.string());
        unsigned char bytes[8];
        while (bin.read(reinterpret_cast<char*>(bytes), 8)) {
            std::uint64_t bits = 0;
            for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
            values.push_back(std::bit_cast<double>(bits));
        }
    }
    return ParameterStore(store.architecture(), std::move(values));
}

}  // namespace atp
