#include "precdiff/search.hpp"

#include "precdiff/errors.hpp"
#include "precdiff/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace precdiff {

void SearchConfig::validate(int vocab_size) const {
    if (T < 0) throw ValidationError("search.T", "must be >= 0");
    if (B < 1) throw ValidationError("search.B", "must be >= 1");
    if (K < 1 || K > vocab_size) {
        throw ValidationError("search.K", "must be in [1, " + std::to_string(vocab_size) + "]");
    }
    if (!(momentum_mu >= 0.0 && momentum_mu < 1.0)) throw ValidationError("search.momentum_mu", "must be in [0, 1)");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("search.lambda", "must be >= 0");
    if (suffix_len < 1) throw ValidationError("search.suffix_len", "must be >= 1");
}

void GeneticConfig::validate() const {
    if (population < 1) throw ValidationError("genetic.population", "must be >= 1");
    if (!(crossover_rate >= 0.0 && crossover_rate <= 1.0)) {
        throw ValidationError("genetic.crossover_rate", "must be in [0, 1]");
    }
    if (!(mutation_rate >= 0.0 && mutation_rate <= 1.0)) {
        throw ValidationError("genetic.mutation_rate", "must be in [0, 1]");
    }
}

namespace {

void validate_problem(const SearchProblem& prob, const SearchConfig& cfg, bool needs_gradients) {
    if (!prob.p1 || !prob.p2) throw ValidationError("model", "both precision providers are required");
    const int V = prob.p2->vocab_size();
    if (prob.p1->vocab_size() != V) throw ValidationError("model", "p1 and p2 vocabularies differ");
    cfg.validate(V);
    if (needs_gradients && !(prob.p1->supports_gradients() && prob.p2->supports_gradients())) {
        throw ValidationError("method", "gradient-guided method requires a provider with gradient support");
    }
    auto check_tokens = [V](const TokenSequence& s, const char* path, bool allow_empty) {
        if (s.empty() && !allow_empty) throw ValidationError(path, "must not be empty");
        for (int t : s) {
            if (t < 0 || t >= V) throw ValidationError(path, "token id " + std::to_string(t) + " outside vocabulary");
        }
    };
    check_tokens(prob.x_user, "prompts.x_user", true);
    check_tokens(prob.y_safe, "prompts.y_safe", false);
    check_tokens(prob.y_harm, "prompts.y_harm", false);
    if (prob.n_new < 1) throw ValidationError("decode.n_new", "must be >= 1");
    const std::size_t ctx = prob.x_user.size() + static_cast<std::size_t>(cfg.suffix_len);
    const std::size_t longest_target = std::max(prob.y_safe.size(), prob.y_harm.size());
    const auto limit = static_cast<std::size_t>(std::min(prob.p1->max_seq_len(), prob.p2->max_seq_len()));
    if (ctx + longest_target > limit) {
        throw ValidationError("prompts", "x_user + suffix + target exceeds max_seq_len " + std::to_string(limit));
    }
    if (ctx + static_cast<std::size_t>(prob.n_new) - 1 > limit) {
        throw ValidationError("decode.n_new", "x_user + suffix + n_new exceeds max_seq_len " + std::to_string(limit));
    }
    prob.oracle.validate();
}

// Appends a record unless this suffix was already logged.
void log_divergence(SearchResult& res, const SearchProblem& prob, const TokenSequence& x_adv, int t,
                    const OracleCheck& chk) {
    if (!res.first_success_iter) res.first_success_iter = t;
    for (const auto& r : res.divergences) {
        if (r.x_adv == x_adv) return;
    }
    res.divergences.push_back({prob.x_user, x_adv, t, chk.y_p1, chk.y_p2, chk.verdict_p1, chk.verdict_p2});
}

// Runs the oracle on the current suffix, reusing the previous verdict when the
// suffix did not change.
class OracleTracker {
public:
    explicit OracleTracker(const SearchProblem& prob) : prob_(prob) {}

    void check(SearchResult& res, const TokenSequence& x_adv, int t) {
        if (!last_.has_value() || last_suffix_ != x_adv) {
            last_ = check_suffix(prob_, x_adv);
            last_suffix_ = x_adv;
        }
        if (last_->hit) log_divergence(res, prob_, x_adv, t, *last_);
    }

private:
    const SearchProblem& prob_;
    std::optional<OracleCheck> last_;
    TokenSequence last_suffix_;
};

double nll(const ModelProvider& m, const TokenSequence& x, const TokenSequence& y) {
    return m.nll_grad(x, y, 0, 0, false).loss;
}

// Gradient-guided loop shared by the dual method and standard GCG.
SearchResult run_gcg(const SearchProblem& prob, const SearchConfig& cfg, bool dual) {
    validate_problem(prob, cfg, true);
    const int V = prob.p2->vocab_size();
    const auto L = static_cast<std::size_t>(cfg.suffix_len);
    const double mu = dual || cfg.standard_gcg_momentum ? cfg.momentum_mu : 0.0;
    const double lambda = dual ? cfg.lambda : 0.0;

    SearchState st;
    st.x_adv = initial_suffix(cfg, V);
    st.v.assign(L * static_cast<std::size_t>(V), 0.0f);
    SearchResult res;
    OracleTracker oracle(prob);

    for (st.t = 1; st.t <= cfg.T; ++st.t) {
        std::vector<float> g;
        if (dual) {
            g = dual_gradient(*prob.p1, *prob.p2, prob.x_user, st.x_adv, prob.y_safe, prob.y_harm).g;
        } else {
            g = prob.p2->nll_grad(concat(prob.x_user, st.x_adv), prob.y_harm, prob.x_user.size(), L, true).grad;
        }
        momentum_update(st.v, g, mu);
        const auto cands = topk_candidates(st.v, V, cfg.K);
        Rng rng(derive_seed(cfg.rng_seed, {static_cast<std::uint64_t>(st.t)}));
        const auto batch = sample_batch(st.x_adv, cands, cfg.B, rng);
        Selection sel = evaluate_and_select(*prob.p1, *prob.p2, prob.x_user, batch, prob.y_safe, prob.y_harm, lambda);
        if (!dual || lambda == 0.0) sel.loss_safe_p1 = nll(*prob.p1, concat(prob.x_user, sel.suffix), prob.y_safe);
        st.x_adv = std::move(sel.suffix);
        st.loss_trace.push_back({st.t, sel.loss_harm_p2, sel.loss_safe_p1, sel.loss_total});
        oracle.check(res, st.x_adv, st.t);
    }
    res.x_adv = std::move(st.x_adv);
    res.loss_trace = std::move(st.loss_trace);
    res.iterations = cfg.T;
    return res;
}

}  // namespace

OracleCheck check_suffix(const SearchProblem& prob, const TokenSequence& x_adv) {
    const TokenSequence x = concat(prob.x_user, x_adv);
    OracleCheck chk;
    chk.y_p1 = prob.p1->generate(x, prob.n_new, prob.decode);
    chk.y_p2 = prob.p2->generate(x, prob.n_new, prob.decode);
    chk.verdict_p1 = classify(chk.y_p1, prob.oracle);
    chk.verdict_p2 = classify(chk.y_p2, prob.oracle);
    chk.hit = precision_jailbreak(chk.verdict_p1, chk.verdict_p2);
    return chk;
}

TokenSequence initial_suffix(const SearchConfig& cfg, int vocab_size) {
    Rng rng(derive_seed(cfg.rng_seed, {0}));
    TokenSequence s(static_cast<std::size_t>(cfg.suffix_len));
    for (int& t : s) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_size)));
    return s;
}

DualGradient dual_gradient(const ModelProvider& p1, const ModelProvider& p2, const TokenSequence& x_user,
                           const TokenSequence& x_adv, const TokenSequence& y_safe, const TokenSequence& y_harm) {
    const TokenSequence x = concat(x_user, x_adv);
    NllGrad r1, r2;
    parallel_for(2, [&](std::size_t i) {
        if (i == 0) {
            r1 = p1.nll_grad(x, y_safe, x_user.size(), x_adv.size(), true);
        } else {
            r2 = p2.nll_grad(x, y_harm, x_user.size(), x_adv.size(), true);
        }
    });
    DualGradient out;
    out.g.resize(r2.grad.size());
    for (std::size_t i = 0; i < out.g.size(); ++i) out.g[i] = r2.grad[i] + r1.grad[i];
    out.loss_safe_p1 = r1.loss;
    out.loss_harm_p2 = r2.loss;
    return out;
}

void momentum_update(std::vector<float>& v, const std::vector<float>& g, double mu) {
    if (v.size() != g.size()) {
        throw ShapeError("momentum_update: buffer has " + std::to_string(v.size()) + " entries, gradient has " +
                         std::to_string(g.size()));
    }
    if (!(mu >= 0.0 && mu < 1.0)) throw Error("momentum_update: mu must be in [0, 1)");
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(mu * v[i] + (1.0 - mu) * g[i]);
}

std::vector<std::vector<int>> topk_candidates(const std::vector<float>& v, int vocab_size, int K) {
    if (K < 1 || K > vocab_size) throw Error("topk_candidates: K must be in [1, V]");
    const auto V = static_cast<std::size_t>(vocab_size);
    if (v.size() % V != 0) throw ShapeError("topk_candidates: buffer is not a whole number of rows");
    std::vector<std::vector<int>> out(v.size() / V);
    std::vector<int> ids(V);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float* row = v.data() + i * V;
        std::iota(ids.begin(), ids.end(), 0);
        std::partial_sort(ids.begin(), ids.begin() + K, ids.end(), [row](int a, int b) {
            return row[a] < row[b] || (row[a] == row[b] && a < b);
        });
        out[i].assign(ids.begin(), ids.begin() + K);
    }
    return out;
}

std::vector<TokenSequence> sample_batch(const TokenSequence& x_adv, const std::vector<std::vector<int>>& candidates,
                                        int B, Rng& rng) {
    if (B < 1) throw Error("sample_batch: B must be >= 1");
    if (candidates.size() != x_adv.size()) throw ShapeError("sample_batch: one candidate list per position required");
    std::vector<TokenSequence> batch;
    batch.reserve(static_cast<std::size_t>(B) + 1);
    for (int b = 0; b < B; ++b) {
        TokenSequence s = x_adv;
        const auto pos = rng.below(s.size());
        const auto& opts = candidates[pos];
        s[pos] = opts[rng.below(opts.size())];
        batch.push_back(std::move(s));
    }
    batch.push_back(x_adv);
    return batch;
}

Selection evaluate_and_select(const ModelProvider& p1, const ModelProvider& p2, const TokenSequence& x_user,
                              const std::vector<TokenSequence>& batch, const TokenSequence& y_safe,
                              const TokenSequence& y_harm, double lambda) {
    if (batch.empty()) throw Error("evaluate_and_select: empty batch");
    const bool with_safe = lambda != 0.0;
    std::vector<double> harm(batch.size()), safe(batch.size(), 0.0);
    parallel_for(batch.size(), [&](std::size_t b) {
        const TokenSequence x = concat(x_user, batch[b]);
        harm[b] = nll(p2, x, y_harm);
        if (with_safe) safe[b] = nll(p1, x, y_safe);
    });
    Selection sel;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const double total = harm[b] + lambda * safe[b];
        if (total < best || b == 0) {
            best = total;
            sel.index = b;
        }
    }
    sel.suffix = batch[sel.index];
    sel.loss_harm_p2 = harm[sel.index];
    sel.loss_safe_p1 = safe[sel.index];
    sel.loss_total = best;
    return sel;
}

SearchResult run_dual_precision_gcg(const SearchProblem& prob, const SearchConfig& cfg) {
    return run_gcg(prob, cfg, true);
}

SearchResult standard_gcg_baseline(const SearchProblem& prob, const SearchConfig& cfg) {
    return run_gcg(prob, cfg, false);
}

SearchResult random_search_baseline(const SearchProblem& prob, const SearchConfig& cfg) {
    validate_problem(prob, cfg, false);
    const int V = prob.p2->vocab_size();
    SearchResult res;
    TokenSequence x_adv = initial_suffix(cfg, V);
    OracleTracker oracle(prob);
    for (int t = 1; t <= cfg.T; ++t) {
        Rng rng(derive_seed(cfg.rng_seed, {static_cast<std::uint64_t>(t)}));
        const auto pos = rng.below(x_adv.size());
        x_adv[pos] = static_cast<int>(rng.below(static_cast<std::uint64_t>(V)));
        const TokenSequence x = concat(prob.x_user, x_adv);
        const double harm = nll(*prob.p2, x, prob.y_harm);
        const double safe = nll(*prob.p1, x, prob.y_safe);
        res.loss_trace.push_back({t, harm, safe, harm + cfg.lambda * safe});
        oracle.check(res, x_adv, t);
    }
    res.x_adv = std::move(x_adv);
    res.iterations = cfg.T;
    return res;
}

SearchResult genetic_baseline(const SearchProblem& prob, const SearchConfig& cfg, const GeneticConfig& ga) {
    validate_problem(prob, cfg, false);
    ga.validate();
    const int V = prob.p2->vocab_size();
    const auto P = static_cast<std::size_t>(ga.population);
    const auto L = static_cast<std::size_t>(cfg.suffix_len);

    std::vector<TokenSequence> pop;
    pop.reserve(P);
    pop.push_back(initial_suffix(cfg, V));
    {
        Rng rng(derive_seed(cfg.rng_seed, {0, 1}));
        while (pop.size() < P) {
            TokenSequence s(L);
            for (int& t : s) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(V)));
            pop.push_back(std::move(s));
        }
    }

    SearchResult res;
    OracleTracker oracle(prob);
    std::vector<double> harm(P);
    for (int t = 1; t <= cfg.T; ++t) {
        parallel_for(P, [&](std::size_t i) { harm[i] = nll(*prob.p2, concat(prob.x_user, pop[i]), prob.y_harm); });
        // Fitness is -harm; ties go to the lowest index.
        const auto best = static_cast<std::size_t>(std::min_element(harm.begin(), harm.end()) - harm.begin());
        const double safe = nll(*prob.p1, concat(prob.x_user, pop[best]), prob.y_safe);
        res.loss_trace.push_back({t, harm[best], safe, harm[best]});
        oracle.check(res, pop[best], t);
        res.x_adv = pop[best];

        Rng rng(derive_seed(cfg.rng_seed, {static_cast<std::uint64_t>(t)}));
        auto tournament = [&]() -> const TokenSequence& {
            const auto a = rng.below(P), b = rng.below(P);
            return harm[a] < harm[b] || (harm[a] == harm[b] && a < b) ? pop[a] : pop[b];
        };
        std::vector<TokenSequence> next;
        next.reserve(P);
        next.push_back(pop[best]);
        while (next.size() < P) {
            TokenSequence child = tournament();
            const TokenSequence& other = tournament();
            if (L > 1 && rng.uniform() < ga.crossover_rate) {
                const auto cut = 1 + rng.below(L - 1);
                std::copy(other.begin() + static_cast<std::ptrdiff_t>(cut), other.end(),
                          child.begin() + static_cast<std::ptrdiff_t>(cut));
            }
            for (int& tok : child) {
                if (rng.uniform() < ga.mutation_rate) tok = static_cast<int>(rng.below(static_cast<std::uint64_t>(V)));
            }
            next.push_back(std::move(child));
        }
        pop = std::move(next);
    }
    if (cfg.T == 0) res.x_adv = pop.front();
    res.iterations = cfg.T;
    return res;
}

}  // namespace precdiff
