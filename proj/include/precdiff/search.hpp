#pragma once

#include "precdiff/oracle.hpp"
#include "precdiff/provider.hpp"
#include "precdiff/rng.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace precdiff {

struct SearchConfig {
    int T = 300;
    int B = 64;
    int K = 16;
    double momentum_mu = 0.9;
    double lambda = 1.0;
    int suffix_len = 16;
    std::uint64_t rng_seed = 0;
    // Standard GCG runs without momentum unless this is set, in which case it
    // uses momentum_mu like the dual method.
    bool standard_gcg_momentum = false;

    void validate(int vocab_size) const;
    friend bool operator==(const SearchConfig&, const SearchConfig&) = default;
};

struct GeneticConfig {
    int population = 16;
    double crossover_rate = 0.5;
    double mutation_rate = 0.05;

    void validate() const;
    friend bool operator==(const GeneticConfig&, const GeneticConfig&) = default;
};

struct LossPoint {
    int t = 0;
    double loss_harm_p2 = 0.0;
    double loss_safe_p1 = 0.0;
    double loss_total = 0.0;
};

struct DivergenceRecord {
    TokenSequence x_user;
    TokenSequence x_adv;
    int t = 0;
    TokenSequence y_p1;
    TokenSequence y_p2;
    Verdict verdict_p1;
    Verdict verdict_p2;
};

// Momentum buffer v is [suffix_len x V], row-major.
struct SearchState {
    TokenSequence x_adv;
    std::vector<float> v;
    int t = 0;
    std::vector<LossPoint> loss_trace;
    std::vector<DivergenceRecord> divergence_log;
};

// One prompt against one model pair. Providers must outlive the problem.
struct SearchProblem {
    const ModelProvider* p1 = nullptr;
    const ModelProvider* p2 = nullptr;
    TokenSequence x_user;
    TokenSequence y_safe;
    TokenSequence y_harm;
    OracleConfig oracle;
    int n_new = 4;
    DecodeMode decode;
};

struct SearchResult {
    TokenSequence x_adv;
    std::vector<DivergenceRecord> divergences;
    std::vector<LossPoint> loss_trace;
    int iterations = 0;
    std::optional<int> first_success_iter;
};

struct OracleCheck {
    TokenSequence y_p1;
    TokenSequence y_p2;
    Verdict verdict_p1;
    Verdict verdict_p2;
    bool hit = false;
};

// Decodes x_user + x_adv under both precisions and applies the search-loop check.
OracleCheck check_suffix(const SearchProblem& prob, const TokenSequence& x_adv);

// The starting suffix shared by every method for a given seed.
TokenSequence initial_suffix(const SearchConfig& cfg, int vocab_size);

// g_p1 (safe target under p1) + g_p2 (harmful target under p2), one-hot rows of
// the suffix. Also reports the two losses at the current suffix.
struct DualGradient {
    std::vector<float> g;
    double loss_safe_p1 = 0.0;
    double loss_harm_p2 = 0.0;
};
DualGradient dual_gradient(const ModelProvider& p1, const ModelProvider& p2, const TokenSequence& x_user,
                           const TokenSequence& x_adv, const TokenSequence& y_safe, const TokenSequence& y_harm);

void momentum_update(std::vector<float>& v, const std::vector<float>& g, double mu);

// For each position, the K ids with the smallest v values; ties to the lowest id.
std::vector<std::vector<int>> topk_candidates(const std::vector<float>& v, int vocab_size, int K);

// B single-substitution candidates followed by the unchanged x_adv.
std::vector<TokenSequence> sample_batch(const TokenSequence& x_adv, const std::vector<std::vector<int>>& candidates,
                                        int B, Rng& rng);

struct Selection {
    std::size_t index = 0;
    TokenSequence suffix;
    double loss_harm_p2 = 0.0;
    double loss_safe_p1 = 0.0;
    double loss_total = 0.0;
};
// Exact joint loss per candidate; argmin with ties to the lowest batch index.
// With lambda == 0 the p1 branch is not evaluated and loss_safe_p1 is left 0.
Selection evaluate_and_select(const ModelProvider& p1, const ModelProvider& p2, const TokenSequence& x_user,
                              const std::vector<TokenSequence>& batch, const TokenSequence& y_safe,
                              const TokenSequence& y_harm, double lambda);

SearchResult run_dual_precision_gcg(const SearchProblem& prob, const SearchConfig& cfg);
SearchResult standard_gcg_baseline(const SearchProblem& prob, const SearchConfig& cfg);
SearchResult random_search_baseline(const SearchProblem& prob, const SearchConfig& cfg);
SearchResult genetic_baseline(const SearchProblem& prob, const SearchConfig& cfg, const GeneticConfig& ga);

}  // namespace precdiff
