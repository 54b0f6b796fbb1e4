#include "precdiff/campaign.hpp"

#include "precdiff/bridge.hpp"
#include "precdiff/errors.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace precdiff {

using json_util::json;
using namespace json_util;

namespace {

const char* kQuantScheme =
    "floats: round-to-nearest-even on an fp32 substrate, saturating; integers: symmetric fake quantization, "
    "no zero-point, round-half-away-from-zero, clamp to +-qmax; weights use one scale per tensor, activations one "
    "scale per token row";

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("failed writing " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("", "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool is_output_file(const std::string& name) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    auto ends = [&](const char* s) {
        const std::string suf(s);
        return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    return name == "header.json" || name == "metrics.json" || name == "divergences.jsonl" || name == "summary.csv" ||
           (ends(".csv") && (starts("loss_") || starts("layers_")));
}

// Clears files a previous run may have left so the directory reflects this run only.
void prepare_output_dir(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && is_output_file(entry.path().filename().string())) {
            std::filesystem::remove(entry.path());
        }
    }
}

std::string loss_csv(const std::vector<LossPoint>& trace) {
    std::ostringstream os;
    os << kLossCsvHeader << '\n';
    for (const auto& p : trace) {
        os << p.t << ',' << format_double(p.loss_harm_p2) << ',' << format_double(p.loss_safe_p1) << ','
           << format_double(p.loss_total) << '\n';
    }
    return os.str();
}

json verdict_to_json(const Verdict& v) { return json{{"jailbroken", v.jailbroken}, {"refused", v.refused}}; }

Verdict verdict_from_json(const json& j, const std::string& path) {
    if (!j.is_object()) throw ValidationError(path, "must be an object");
    reject_unknown_keys(j, {"jailbroken", "refused"}, path);
    return {as_bool(require(j, "jailbroken", path), path + ".jailbroken"),
            as_bool(require(j, "refused", path), path + ".refused")};
}

json decode_to_json(const CampaignConfig& cfg) {
    json d = decode_mode_to_json(cfg.decode);
    d["n_new"] = cfg.n_new;
    return d;
}

json header_json(const CampaignConfig& cfg, const std::vector<std::string>& layer_order) {
    json config = config_to_json(cfg);
    // The output location is not part of the result, so two runs into
    // different directories stay byte-identical.
    config.erase("output_dir");
    return json{{"schema", kResultSchema},
                {"config", config},
                {"quantization_scheme", kQuantScheme},
                {"layer_order", layer_order},
                {"layer_granularity", "q, k and v projections are separate modules; attention core is one fused module"},
                {"sentence_boundary", "first delimiter token, inclusive (oracle.sentence_delimiters)"},
                {"percentile_method", "linear interpolation, 95th, strict greater-than, layer 0 excluded"},
                {"momentum_reset", "per prompt"}};
}

// FNV-1a over the canonical record text, so edits to a stored record are caught
// even when the edited suffix happens to decode to the same outputs.
std::string record_digest(const json& rec_without_digest) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : dump_line(rec_without_digest)) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

bool needs_gradients(Method m) { return m == Method::dual_gcg || m == Method::standard_gcg; }

}  // namespace

ModelPair make_providers(const ModelSource& src, FormatKind p1, FormatKind p2) {
    const PrecisionFormat& f1 = PrecisionFormat::get(p1);
    const PrecisionFormat& f2 = PrecisionFormat::get(p2);
    if (src.bridge) {
        auto session = std::make_shared<BridgeSession>(src.bridge->command, src.bridge->timeout_ms);
        return {std::make_shared<BridgeProvider>(session, f1), std::make_shared<BridgeProvider>(session, f2)};
    }
    auto make = [&](const PrecisionFormat& f) {
        return std::make_shared<const TransformerModel>(src.checkpoint ? load_checkpoint(*src.checkpoint, f)
                                                                       : TransformerModel::build(src.config, f));
    };
    return {std::make_shared<LocalProvider>(make(f1)), std::make_shared<LocalProvider>(make(f2))};
}

json divergence_to_json(const CampaignConfig& cfg, const PromptSpec& prompt, const DivergenceRecord& r) {
    json rec{{"schema", kDivergenceSchema},
                {"prompt_id", prompt.id},
                {"iteration", r.t},
                {"x_user", tokens_to_json(r.x_user)},
                {"x_adv", tokens_to_json(r.x_adv)},
                {"y_p1", tokens_to_json(r.y_p1)},
                {"y_p2", tokens_to_json(r.y_p2)},
                {"verdict_p1", verdict_to_json(r.verdict_p1)},
                {"verdict_p2", verdict_to_json(r.verdict_p2)},
                {"p1", PrecisionFormat::get(cfg.p1).name()},
                {"p2", PrecisionFormat::get(cfg.p2).name()},
                {"model", model_source_to_json(cfg.model)},
                {"oracle", oracle_to_json(oracle_for(cfg, prompt))},
                {"decode", decode_to_json(cfg)}};
    rec["digest"] = record_digest(rec);
    return rec;
}

CampaignResult run_campaign(const CampaignConfig& cfg) {
    const ModelPair models = make_providers(cfg.model, cfg.p1, cfg.p2);
    if (needs_gradients(cfg.method) && !(models.p1->supports_gradients() && models.p2->supports_gradients())) {
        throw ValidationError("method", std::string(method_name(cfg.method)) +
                                            " needs gradients but the model provider does not supply them");
    }
    cfg.search.validate(models.p2->vocab_size());
    const TransformerModel* local1 = models.p1->local_model();
    const TransformerModel* local2 = models.p2->local_model();
    const std::vector<std::string> layer_order =
        local1 ? local1->layer_order() : TransformerModel::make_layer_order(cfg.model.config.n_layers);

    prepare_output_dir(cfg.output_dir);

    CampaignResult result;
    std::vector<PromptOutcome> outcomes;
    std::string div_log;
    std::vector<LayerDivergenceReport> reports;
    for (std::size_t i = 0; i < cfg.prompts.size(); ++i) {
        const PromptSpec& ps = cfg.prompts[i];
        PromptResult pr;
        pr.prompt_id = ps.id;
        try {
            SearchProblem prob;
            prob.p1 = models.p1.get();
            prob.p2 = models.p2.get();
            prob.x_user = ps.x_user;
            prob.y_safe = ps.y_safe;
            prob.y_harm = ps.y_harm;
            prob.oracle = oracle_for(cfg, ps);
            prob.n_new = cfg.n_new;
            prob.decode = cfg.decode;
            SearchConfig sc = cfg.search;
            sc.rng_seed = derive_seed(cfg.search.rng_seed, {static_cast<std::uint64_t>(i)});
            switch (cfg.method) {
                case Method::dual_gcg: pr.search = run_dual_precision_gcg(prob, sc); break;
                case Method::standard_gcg: pr.search = standard_gcg_baseline(prob, sc); break;
                case Method::random: pr.search = random_search_baseline(prob, sc); break;
                case Method::genetic: pr.search = genetic_baseline(prob, sc, cfg.genetic); break;
            }
            if (cfg.layer_analysis && local1 && local2) {
                // The control never diverges, so it profiles its final suffix instead.
                std::optional<TokenSequence> probe;
                if (!pr.search.divergences.empty()) {
                    probe = concat(ps.x_user, pr.search.divergences.front().x_adv);
                } else if (cfg.identical_precision_control) {
                    probe = concat(ps.x_user, pr.search.x_adv);
                }
                if (probe) pr.layers = layer_report(capture_first_token_traces(*local1, *local2, *probe));
            }
        } catch (const std::exception& e) {
            pr.error = e.what();
            pr.search = SearchResult{};
            pr.layers.reset();
        }

        for (const auto& rec : pr.search.divergences) div_log += dump_line(divergence_to_json(cfg, ps, rec)) + "\n";
        if (!pr.error) write_file(cfg.output_dir / ("loss_" + ps.id + ".csv"), loss_csv(pr.search.loss_trace));
        if (pr.layers) {
            write_file(cfg.output_dir / ("layers_" + ps.id + ".csv"), layer_report_csv(*pr.layers));
            reports.push_back(*pr.layers);
        }
        outcomes.push_back({!pr.error && pr.search.first_success_iter.has_value(), pr.search.first_success_iter});
        result.prompts.push_back(std::move(pr));
    }

    write_file(cfg.output_dir / "divergences.jsonl", div_log);
    if (!reports.empty()) write_file(cfg.output_dir / "layers_pooled.csv", layer_report_csv(pooled_report(reports)));
    result.metrics = aggregate_metrics(outcomes);

    json per_prompt = json::array();
    for (const auto& pr : result.prompts) {
        per_prompt.push_back({{"id", pr.prompt_id},
                              {"success", !pr.error && pr.search.first_success_iter.has_value()},
                              {"first_success_iter", pr.search.first_success_iter ? json(*pr.search.first_success_iter)
                                                                                 : json(nullptr)},
                              {"n_divergences", pr.search.divergences.size()},
                              {"critical_layers", pr.layers ? json(pr.layers->critical) : json(nullptr)},
                              {"error", pr.error ? json(*pr.error) : json(nullptr)}});
    }
    const auto& m = result.metrics;
    const json metrics{{"schema", kResultSchema},
                       {"method", method_name(cfg.method)},
                       {"n_prompts", m.n_prompts},
                       {"n_success", m.n_success},
                       {"success_rate", m.success_rate},
                       {"success_rate_text", m.success_rate_text()},
                       {"avg_iterations", m.avg_iterations ? json(*m.avg_iterations) : json(nullptr)},
                       {"avg_iterations_text", m.avg_iterations_text()},
                       {"prompts", per_prompt}};
    write_file(cfg.output_dir / "metrics.json", metrics.dump(2) + "\n");
    write_file(cfg.output_dir / "header.json", header_json(cfg, layer_order).dump(2) + "\n");
    return result;
}

std::vector<PromptSpec> generate_suite(const TransformerModel& ref, const SuiteSpec& spec) {
    const int V = ref.config().vocab_size;
    if (spec.n_prompts < 1) throw ValidationError("n_prompts", "must be >= 1");
    if (spec.prompt_len < 1 || spec.witness_len < 0 || spec.prompt_len + spec.witness_len > ref.config().max_seq_len) {
        throw ValidationError("prompt_len", "prompt plus witness must fit in the context window");
    }
    if (spec.harm_rank < 1 || spec.harm_rank >= V) throw ValidationError("harm_rank", "must be in [1, vocab_size)");
    std::vector<PromptSpec> out;
    for (int p = 0; p < spec.n_prompts; ++p) {
        Rng user_rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(p), 0}));
        Rng witness_rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(p), 1}));
        PromptSpec ps;
        char id[16];
        std::snprintf(id, sizeof id, "p%02d", p);
        ps.id = id;
        for (int i = 0; i < spec.prompt_len; ++i) ps.x_user.push_back(static_cast<int>(user_rng.below(V)));
        TokenSequence witness;
        for (int i = 0; i < spec.witness_len; ++i) witness.push_back(static_cast<int>(witness_rng.below(V)));
        const std::vector<float> z = forward_logits(ref, concat(ps.x_user, witness));
        std::vector<int> ids(static_cast<std::size_t>(V));
        for (int i = 0; i < V; ++i) ids[static_cast<std::size_t>(i)] = i;
        std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return z[a] > z[b]; });
        ps.y_safe = {static_cast<int>(ids[0])};
        ps.y_harm = {static_cast<int>(ids[static_cast<std::size_t>(spec.harm_rank)])};
        out.push_back(std::move(ps));
    }
    return out;
}

ReplayOutcome replay_record(const json& rec) {
    if (!rec.is_object()) throw ValidationError("", "divergence record must be a JSON object");
    reject_unknown_keys(rec,
                        {"schema", "prompt_id", "iteration", "x_user", "x_adv", "y_p1", "y_p2", "verdict_p1",
                         "verdict_p2", "p1", "p2", "model", "oracle", "decode", "digest"},
                        "");
    {
        const std::string stored = as_string(require(rec, "digest", ""), "digest");
        json body = rec;
        body.erase("digest");
        if (record_digest(body) != stored) return {false, "record digest does not match its contents"};
    }
    const std::string schema = as_string(require(rec, "schema", ""), "schema");
    if (schema != kDivergenceSchema) throw ValidationError("schema", "expected \"" + std::string(kDivergenceSchema) + "\"");
    const TokenSequence x_user = tokens_from_json(require(rec, "x_user", ""), "x_user");
    const TokenSequence x_adv = tokens_from_json(require(rec, "x_adv", ""), "x_adv");
    const TokenSequence y_p1 = tokens_from_json(require(rec, "y_p1", ""), "y_p1");
    const TokenSequence y_p2 = tokens_from_json(require(rec, "y_p2", ""), "y_p2");
    const Verdict v1 = verdict_from_json(require(rec, "verdict_p1", ""), "verdict_p1");
    const Verdict v2 = verdict_from_json(require(rec, "verdict_p2", ""), "verdict_p2");
    const FormatKind p1 = PrecisionFormat::parse(as_string(require(rec, "p1", ""), "p1")).kind;
    const FormatKind p2 = PrecisionFormat::parse(as_string(require(rec, "p2", ""), "p2")).kind;
    const ModelSource src = model_source_from_json(require(rec, "model", ""), "model", {});
    const OracleConfig oracle = oracle_from_json(require(rec, "oracle", ""), "oracle");
    oracle.validate();
    const json& dj = require(rec, "decode", "");
    const DecodeMode mode = decode_mode_from_json(dj, "decode");
    const int n_new = static_cast<int>(as_int(require(dj, "n_new", "decode"), "decode.n_new"));

    const ModelPair models = make_providers(src, p1, p2);
    const TokenSequence x = concat(x_user, x_adv);
    const TokenSequence r1 = models.p1->generate(x, n_new, mode);
    const TokenSequence r2 = models.p2->generate(x, n_new, mode);
    const Verdict c1 = classify(r1, oracle);
    const Verdict c2 = classify(r2, oracle);

    ReplayOutcome out;
    if (r1 != y_p1) {
        out.detail = "p1 output differs from the stored y_p1";
    } else if (r2 != y_p2) {
        out.detail = "p2 output differs from the stored y_p2";
    } else if (c1 != v1 || c2 != v2) {
        out.detail = "verdicts differ from the stored verdicts";
    } else if (!precision_jailbreak(c1, c2)) {
        out.detail = "stored outputs reproduce but are not a precision-induced jailbreak";
    } else {
        out.match = true;
        out.detail = "reproduced: p1 refused, p2 jailbroken";
    }
    return out;
}

ReportOutcome report_directory(const std::filesystem::path& dir) {
    json header, metrics_file;
    try {
        header = json::parse(read_file(dir / "header.json"));
        metrics_file = json::parse(read_file(dir / "metrics.json"));
    } catch (const json::exception& e) {
        throw FormatError("result directory " + dir.string() + " has a malformed header or metrics file: " + e.what());
    }
    if (!header.is_object() || !header.contains("config")) throw FormatError("header.json has no config");
    const json& prompts = header.at("config").at("prompts");

    struct Tally {
        std::optional<int> first;
        int count = 0;
    };
    std::map<std::string, Tally> tally;
    std::istringstream log(read_file(dir / "divergences.jsonl"));
    std::string line;
    while (std::getline(log, line)) {
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception&) {
            throw FormatError("malformed divergence record: " + line);
        }
        auto& t = tally[rec.at("prompt_id").get<std::string>()];
        const int it = rec.at("iteration").get<int>();
        t.first = t.first ? std::min(*t.first, it) : it;
        ++t.count;
    }

    std::vector<PromptOutcome> outcomes;
    std::ostringstream csv;
    csv << "prompt_id,success,first_success_iter,n_divergences\n";
    for (const auto& p : prompts) {
        const std::string id = p.at("id").get<std::string>();
        const Tally t = tally.count(id) ? tally.at(id) : Tally{};
        outcomes.push_back({t.first.has_value(), t.first});
        csv << id << ',' << (t.first ? 1 : 0) << ',' << (t.first ? std::to_string(*t.first) : "") << ',' << t.count
            << '\n';
    }
    write_file(dir / "summary.csv", csv.str());

    ReportOutcome out;
    out.metrics = aggregate_metrics(outcomes);
    const auto& m = out.metrics;
    const json& mf = metrics_file;
    const bool avg_match = m.avg_iterations ? (mf.at("avg_iterations").is_number() &&
                                               mf.at("avg_iterations").get<double>() == *m.avg_iterations)
                                            : mf.at("avg_iterations").is_null();
    out.matches_metrics_file = mf.at("n_prompts").get<int>() == m.n_prompts &&
                               mf.at("n_success").get<int>() == m.n_success &&
                               mf.at("success_rate").get<double>() == m.success_rate && avg_match;
    std::ostringstream text;
    text << "method: " << header.at("config").at("method").get<std::string>() << '\n'
         << "prompts: " << m.n_prompts << '\n'
         << "successes: " << m.n_success << '\n'
         << "success_rate: " << m.success_rate_text() << '\n'
         << "avg_iterations: " << m.avg_iterations_text() << '\n'
         << "metrics_file: " << (out.matches_metrics_file ? "consistent" : "INCONSISTENT") << '\n';
    out.text = text.str();
    return out;
}

}  // namespace precdiff
