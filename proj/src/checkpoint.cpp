#include "precdiff/errors.hpp"
#include "precdiff/json_util.hpp"
#include "precdiff/model.hpp"

#include <fstream>
#include <sstream>

namespace precdiff {

using json_util::json;


std::string checkpoint_to_string(const TransformerModel& m) {
    json weights = json::object();
    for (const auto& [name, t] : m.weights()) {
        weights[name] = json{{"shape", t.shape()}, {"data", json_util::floats_to_json(t.data())}};
    }
    json doc{{"schema", kCheckpointSchema},
             {"config", json_util::model_config_to_json(m.config())},
             {"layer_order", m.layer_order()},
             {"saved_format", std::string(m.fmt().name())},
             {"weights", std::move(weights)}};
    return doc.dump() + "\n";
}

void save_checkpoint(const TransformerModel& m, const std::filesystem::path& path) {
    const std::string text = checkpoint_to_string(m);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
    out << text;
    if (!out) throw Error("failed writing checkpoint: " + path.string());
}

TransformerModel checkpoint_from_string(const std::string& text, const PrecisionFormat& fmt) {
    using namespace json_util;
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("checkpoint is not valid structured text: ") + e.what());
    }
    try {
        reject_unknown_keys(doc, {"schema", "config", "layer_order", "saved_format", "weights"}, "");
        const std::string schema = as_string(require(doc, "schema", ""), "schema");
        if (schema != kCheckpointSchema) {
            throw ValidationError("schema", "unsupported checkpoint schema \"" + schema + "\"");
        }
        const ModelConfig cfg = json_util::model_config_from_json(require(doc, "config", ""), "config");
        cfg.validate();

        const json& order = require(doc, "layer_order", "");
        const auto expected = TransformerModel::make_layer_order(cfg.n_layers);
        if (!order.is_array() || order.get<std::vector<std::string>>() != expected) {
            throw ValidationError("layer_order", "does not match the architecture implied by config");
        }

        std::map<std::string, PTensor> weights;
        const json& wj = require(doc, "weights", "");
        if (!wj.is_object()) throw ValidationError("weights", "expected an object");
        for (const auto& [name, entry] : wj.items()) {
            const std::string p = "weights." + name;
            reject_unknown_keys(entry, {"shape", "data"}, p);
            const json& sj = require(entry, "shape", p);
            if (!sj.is_array()) throw ValidationError(p + ".shape", "expected an array");
            Shape shape;
            for (const auto& d : sj) shape.push_back(static_cast<std::size_t>(as_u64(d, p + ".shape")));
            auto data = floats_from_json(require(entry, "data", p), p + ".data");
            if (data.size() != shape_numel(shape)) {
                throw ValidationError(p, "data length " + std::to_string(data.size()) + " does not match shape " +
                                             shape_to_string(shape));
            }
            weights.emplace(name, PTensor(std::move(shape), std::move(data)));
        }
        return TransformerModel(cfg, std::move(weights), fmt);
    } catch (const ShapeError& e) {
        throw ValidationError("weights", e.what());
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed checkpoint: ") + e.what());
    }
}

TransformerModel load_checkpoint(const std::filesystem::path& path, const PrecisionFormat& fmt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return checkpoint_from_string(ss.str(), fmt);
}

}  // namespace precdiff
