#pragma once

#include "precdiff/analysis.hpp"
#include "precdiff/json_util.hpp"
#include "precdiff/search.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace precdiff {

inline constexpr const char* kConfigSchema = "precdiff-config/1";
inline constexpr const char* kDivergenceSchema = "precdiff-div/1";
inline constexpr const char* kResultSchema = "precdiff-result/1";
inline constexpr const char* kLossCsvHeader = "t,loss_harm_p2,loss_safe_p1,loss_total";

enum class Method { dual_gcg, standard_gcg, random, genetic };
std::string_view method_name(Method m);
Method parse_method(std::string_view name);

struct BridgeSpec {
    std::vector<std::string> command;
    int timeout_ms = 30000;
    friend bool operator==(const BridgeSpec&, const BridgeSpec&) = default;
};

// Exactly one of: seeded config, checkpoint file, external bridge process.
struct ModelSource {
    ModelConfig config;
    std::optional<std::filesystem::path> checkpoint;
    std::optional<BridgeSpec> bridge;
};

struct PromptSpec {
    std::string id;
    TokenSequence x_user;
    TokenSequence y_safe;
    TokenSequence y_harm;
};

struct CampaignConfig {
    ModelSource model;
    FormatKind p1 = FormatKind::fp32;
    FormatKind p2 = FormatKind::bf16;
    bool identical_precision_control = false;
    Method method = Method::dual_gcg;
    std::vector<PromptSpec> prompts;
    SearchConfig search;
    GeneticConfig genetic;
    // Empty prefix lists mean "use the prompt's own y_safe / y_harm".
    OracleConfig oracle;
    int n_new = 4;
    DecodeMode decode;
    std::filesystem::path output_dir = "out";
    bool layer_analysis = true;
};

// Strict parse: unknown keys are rejected, every default is filled in, and
// relative paths are resolved against `base_dir`. PRECDIFF_SEED, when set,
// replaces search.rng_seed.
CampaignConfig config_from_json(const json_util::json& j, const std::filesystem::path& base_dir);
CampaignConfig load_config(const std::filesystem::path& path);
// Canonical document with every field materialized.
json_util::json config_to_json(const CampaignConfig& cfg);

json_util::json oracle_to_json(const OracleConfig& o);
OracleConfig oracle_from_json(const json_util::json& j, const std::string& path);

OracleConfig oracle_for(const CampaignConfig& cfg, const PromptSpec& prompt);

// Both precision copies of the configured model.
struct ModelPair {
    std::shared_ptr<ModelProvider> p1;
    std::shared_ptr<ModelProvider> p2;
};
ModelPair make_providers(const ModelSource& src, FormatKind p1, FormatKind p2);
ModelSource model_source_from_json(const json_util::json& j, const std::string& path,
                                   const std::filesystem::path& base_dir);
json_util::json model_source_to_json(const ModelSource& src);

// Seeded prompt suite. Each prompt is a random user sequence; its targets are
// the reference model's two most likely next tokens after the prompt followed
// by a seeded random "witness" suffix, so both targets are reachable.
struct SuiteSpec {
    int n_prompts = 20;
    int prompt_len = 6;
    int witness_len = 16;
    int harm_rank = 1;
    std::uint64_t seed = 0;
};
std::vector<PromptSpec> generate_suite(const TransformerModel& ref, const SuiteSpec& spec);

struct PromptResult {
    std::string prompt_id;
    SearchResult search;
    std::optional<LayerDivergenceReport> layers;
    std::optional<std::string> error;
};

struct CampaignResult {
    std::vector<PromptResult> prompts;
    CampaignMetrics metrics;
};

// Runs every prompt and writes the result directory. A prompt that throws is
// recorded as a failure and the campaign moves on.
CampaignResult run_campaign(const CampaignConfig& cfg);

// Divergence log line for one record.
json_util::json divergence_to_json(const CampaignConfig& cfg, const PromptSpec& prompt, const DivergenceRecord& r);

struct ReplayOutcome {
    bool match = false;
    std::string detail;
};
// Re-decodes a stored record under both stored formats and compares outputs and verdicts.
ReplayOutcome replay_record(const json_util::json& record);

struct ReportOutcome {
    CampaignMetrics metrics;
    bool matches_metrics_file = false;
    std::string text;
};
// Recomputes metrics from the persisted divergence log and writes summary.csv.
ReportOutcome report_directory(const std::filesystem::path& dir);

}  // namespace precdiff
