#pragma once

#include "precdiff/model.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace precdiff::json_util {

using nlohmann::json;

// A float as the double whose shortest decimal form round-trips back to the
// same float, so documents carry "0.02" rather than "0.019999999552965164".
double float_to_json_number(float v);

json floats_to_json(std::span<const float> values);
std::vector<float> floats_from_json(const json& j, const std::string& path);

json tokens_to_json(const TokenSequence& t);
TokenSequence tokens_from_json(const json& j, const std::string& path);

// Typed field access that reports the dotted field path on failure.
const json& require(const json& obj, const std::string& key, const std::string& path);
std::int64_t as_int(const json& j, const std::string& path);
std::uint64_t as_u64(const json& j, const std::string& path);
double as_number(const json& j, const std::string& path);
bool as_bool(const json& j, const std::string& path);
std::string as_string(const json& j, const std::string& path);

// Reject keys outside `allowed`.
void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& path);

json model_config_to_json(const ModelConfig& c);
// Strict: unknown keys rejected, every field except init_std required.
ModelConfig model_config_from_json(const json& j, const std::string& path);

// Canonical single-line serialization (sorted keys, shortest round-trip numbers).
std::string dump_line(const json& j);

}  // namespace precdiff::json_util
