#include "precdiff/json_util.hpp"

#include "precdiff/errors.hpp"

#include <charconv>
#include <cstdlib>

namespace precdiff::json_util {

double float_to_json_number(float v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    *res.ptr = '\0';
    const double d = std::strtod(buf, nullptr);
    return static_cast<float>(d) == v ? d : static_cast<double>(v);
}

json floats_to_json(std::span<const float> values) {
    json arr = json::array();
    for (float v : values) arr.push_back(float_to_json_number(v));
    return arr;
}

std::vector<float> floats_from_json(const json& j, const std::string& path) {
    if (!j.is_array()) throw ValidationError(path, "expected an array of numbers");
    std::vector<float> out;
    out.reserve(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw ValidationError(path + "[" + std::to_string(i) + "]", "expected a number");
        out.push_back(static_cast<float>(j[i].get<double>()));
    }
    return out;
}

json tokens_to_json(const TokenSequence& t) { return json(t); }

TokenSequence tokens_from_json(const json& j, const std::string& path) {
    if (!j.is_array()) throw ValidationError(path, "expected an array of token ids");
    TokenSequence out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number_integer()) throw ValidationError(path + "[" + std::to_string(i) + "]", "expected an integer");
        out.push_back(j[i].get<int>());
    }
    return out;
}

const json& require(const json& obj, const std::string& key, const std::string& path) {
    if (!obj.is_object()) throw ValidationError(path, "expected an object");
    auto it = obj.find(key);
    const std::string p = path.empty() ? key : path + "." + key;
    if (it == obj.end()) throw ValidationError(p, "missing required field");
    return *it;
}

std::int64_t as_int(const json& j, const std::string& path) {
    if (!j.is_number_integer()) throw ValidationError(path, "expected an integer");
    return j.get<std::int64_t>();
}

std::uint64_t as_u64(const json& j, const std::string& path) {
    if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
        throw ValidationError(path, "expected a non-negative integer");
    }
    return j.get<std::uint64_t>();
}

double as_number(const json& j, const std::string& path) {
    if (!j.is_number()) throw ValidationError(path, "expected a number");
    return j.get<double>();
}

bool as_bool(const json& j, const std::string& path) {
    if (!j.is_boolean()) throw ValidationError(path, "expected a boolean");
    return j.get<bool>();
}

std::string as_string(const json& j, const std::string& path) {
    if (!j.is_string()) throw ValidationError(path, "expected a string");
    return j.get<std::string>();
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& path) {
    if (!obj.is_object()) throw ValidationError(path, "expected an object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ValidationError(path.empty() ? key : path + "." + key, "unknown key \"" + key + "\"");
    }
}

std::string dump_line(const json& j) { return j.dump(); }

json model_config_to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
                {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
                {"seed", c.seed},             {"init_std", c.init_std}};
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
    if (!j.is_object()) throw ValidationError(path, "must be an object");
    reject_unknown_keys(j, {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "seed", "init_std"},
                        path);
    ModelConfig c;
    // Missing fields keep their defaults.
    auto int_field = [&](const char* key, int& dst) {
        if (j.contains(key)) dst = static_cast<int>(as_int(j.at(key), path + "." + key));
    };
    int_field("vocab_size", c.vocab_size);
    int_field("d_model", c.d_model);
    int_field("n_layers", c.n_layers);
    int_field("n_heads", c.n_heads);
    int_field("d_ff", c.d_ff);
    int_field("max_seq_len", c.max_seq_len);
    if (j.contains("seed")) c.seed = as_u64(j.at("seed"), path + ".seed");
    if (j.contains("init_std")) c.init_std = as_number(j.at("init_std"), path + ".init_std");
    return c;
}

}  // namespace precdiff::json_util
