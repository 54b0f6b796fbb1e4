#pragma once

#include "precdiff/model.hpp"

#include <optional>
#include <string>
#include <vector>

namespace precdiff {

inline constexpr double kLiftEpsilon = 1e-12;
inline constexpr double kCriticalPercentile = 95.0;

struct LayerDivergenceReport {
    std::vector<std::string> layer_names;
    std::vector<double> mad;
    std::vector<double> rl;
    std::vector<std::size_t> critical;
    double epsilon = kLiftEpsilon;
    double percentile_threshold = 0.0;
};

struct TracePair {
    ActivationTrace ref;
    ActivationTrace dist;
};

// One hooked forward pass per model on x: the pass that yields the first new token.
TracePair capture_first_token_traces(const TransformerModel& m_ref, const TransformerModel& m_dist,
                                     const TokenSequence& x);

double mad(std::span<const float> a, std::span<const float> b);
double mad(const PTensor& o_ref, const PTensor& o_dist);

// RL_0 = 0; RL_i = (mu_i - max_{k<i} mu_k) / (max_{k<i} mu_k + eps).
std::vector<double> relative_lift(const std::vector<double>& mad_series, double eps = kLiftEpsilon);

// Linear-interpolation percentile (the usual "linear" method), pct in [0, 100].
double percentile_linear(std::vector<double> values, double pct);

// Indices i >= 1 with rl[i] strictly above the percentile of the whole list.
std::vector<std::size_t> critical_layers(const std::vector<double>& rl, double percentile = kCriticalPercentile);

LayerDivergenceReport layer_report(std::vector<std::string> names, std::vector<double> mad_series,
                                   double eps = kLiftEpsilon);
LayerDivergenceReport layer_report(const TracePair& traces, double eps = kLiftEpsilon);

// Per-layer mean of the MAD series of several reports, re-scored.
LayerDivergenceReport pooled_report(const std::vector<LayerDivergenceReport>& reports, double eps = kLiftEpsilon);

inline constexpr const char* kLayerCsvHeader = "layer_index,layer_name,mad,rl,is_critical";
std::string layer_report_csv(const LayerDivergenceReport& r);

struct PromptOutcome {
    bool success = false;
    std::optional<int> first_success_iter;
};

struct CampaignMetrics {
    int n_prompts = 0;
    int n_success = 0;
    double success_rate = 0.0;
    std::optional<double> avg_iterations;

    // "68.0%" and "20.0" / "N/A".
    [[nodiscard]] std::string success_rate_text() const;
    [[nodiscard]] std::string avg_iterations_text() const;
};

CampaignMetrics aggregate_metrics(const std::vector<PromptOutcome>& results);

// Shortest round-trip decimal for a double.
std::string format_double(double v);

}  // namespace precdiff
