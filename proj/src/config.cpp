#include "precdiff/bridge.hpp"
#include "precdiff/campaign.hpp"
#include "precdiff/errors.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace precdiff {

using json_util::json;
using namespace json_util;

std::string_view method_name(Method m) {
    switch (m) {
        case Method::dual_gcg: return "dual_gcg";
        case Method::standard_gcg: return "standard_gcg";
        case Method::random: return "random";
        case Method::genetic: return "genetic";
    }
    return "?";
}

Method parse_method(std::string_view name) {
    for (Method m : {Method::dual_gcg, Method::standard_gcg, Method::random, Method::genetic}) {
        if (method_name(m) == name) return m;
    }
    throw ValidationError("method", "unknown method \"" + std::string(name) +
                                        "\" (expected dual_gcg, standard_gcg, random or genetic)");
}

namespace {

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
    return p.is_absolute() || base.empty() ? p : base / p;
}

FormatKind parse_format(const json& j, const std::string& path) {
    try {
        return PrecisionFormat::parse(as_string(j, path)).kind;
    } catch (const ValidationError& e) {
        if (!e.path().empty()) throw;
        throw ValidationError(path, e.what());
    }
}

std::vector<TokenSequence> token_lists(const json& j, const std::string& path) {
    if (!j.is_array()) throw ValidationError(path, "must be an array of token arrays");
    std::vector<TokenSequence> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(tokens_from_json(j[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

SearchConfig search_from_json(const json& j, const std::string& path) {
    if (!j.is_object()) throw ValidationError(path, "must be an object");
    reject_unknown_keys(j, {"T", "B", "K", "momentum_mu", "lambda", "suffix_len", "rng_seed", "standard_gcg_momentum"},
                        path);
    SearchConfig s;
    auto int_field = [&](const char* key, int& dst) {
        if (j.contains(key)) dst = static_cast<int>(as_int(j.at(key), path + "." + key));
    };
    int_field("T", s.T);
    int_field("B", s.B);
    int_field("K", s.K);
    int_field("suffix_len", s.suffix_len);
    if (j.contains("momentum_mu")) s.momentum_mu = as_number(j.at("momentum_mu"), path + ".momentum_mu");
    if (j.contains("lambda")) s.lambda = as_number(j.at("lambda"), path + ".lambda");
    if (j.contains("rng_seed")) s.rng_seed = as_u64(j.at("rng_seed"), path + ".rng_seed");
    if (j.contains("standard_gcg_momentum")) {
        s.standard_gcg_momentum = as_bool(j.at("standard_gcg_momentum"), path + ".standard_gcg_momentum");
    }
    return s;
}

json search_to_json(const SearchConfig& s) {
    return json{{"T", s.T},
                {"B", s.B},
                {"K", s.K},
                {"momentum_mu", s.momentum_mu},
                {"lambda", s.lambda},
                {"suffix_len", s.suffix_len},
                {"rng_seed", s.rng_seed},
                {"standard_gcg_momentum", s.standard_gcg_momentum}};
}

GeneticConfig genetic_from_json(const json& j, const std::string& path) {
    if (!j.is_object()) throw ValidationError(path, "must be an object");
    reject_unknown_keys(j, {"population", "crossover_rate", "mutation_rate"}, path);
    GeneticConfig g;
    if (j.contains("population")) g.population = static_cast<int>(as_int(j.at("population"), path + ".population"));
    if (j.contains("crossover_rate")) g.crossover_rate = as_number(j.at("crossover_rate"), path + ".crossover_rate");
    if (j.contains("mutation_rate")) g.mutation_rate = as_number(j.at("mutation_rate"), path + ".mutation_rate");
    g.validate();
    return g;
}

bool safe_id(const std::string& id) {
    if (id.empty() || id.size() > 64) return false;
    for (char c : id) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
    }
    return id != "." && id != ".." && id != "pooled";
}

}  // namespace

json oracle_to_json(const OracleConfig& o) {
    json r = json::array(), a = json::array();
    for (const auto& p : o.refusal_prefixes) r.push_back(tokens_to_json(p));
    for (const auto& p : o.affirmative_prefixes) a.push_back(tokens_to_json(p));
    return json{{"refusal_prefixes", r},
                {"affirmative_prefixes", a},
                {"sentence_delimiters", std::vector<int>(o.sentence_delimiters.begin(), o.sentence_delimiters.end())},
                {"first_sentence_only", o.first_sentence_only}};
}

OracleConfig oracle_from_json(const json& j, const std::string& path) {
    if (!j.is_object()) throw ValidationError(path, "must be an object");
    reject_unknown_keys(j, {"refusal_prefixes", "affirmative_prefixes", "sentence_delimiters", "first_sentence_only"},
                        path);
    OracleConfig o;
    if (j.contains("refusal_prefixes")) o.refusal_prefixes = token_lists(j.at("refusal_prefixes"), path + ".refusal_prefixes");
    if (j.contains("affirmative_prefixes")) {
        o.affirmative_prefixes = token_lists(j.at("affirmative_prefixes"), path + ".affirmative_prefixes");
    }
    if (j.contains("sentence_delimiters")) {
        const auto d = tokens_from_json(j.at("sentence_delimiters"), path + ".sentence_delimiters");
        o.sentence_delimiters = {d.begin(), d.end()};
    }
    if (j.contains("first_sentence_only")) o.first_sentence_only = as_bool(j.at("first_sentence_only"), path + ".first_sentence_only");
    if (o.refusal_prefixes.empty() != o.affirmative_prefixes.empty()) {
        throw ValidationError(path, "give both prefix lists or neither (neither = use each prompt's targets)");
    }
    return o;
}

ModelSource model_source_from_json(const json& j, const std::string& path, const std::filesystem::path& base_dir) {
    if (!j.is_object()) throw ValidationError(path, "must be an object");
    reject_unknown_keys(j, {"config", "checkpoint", "bridge"}, path);
    const int given = static_cast<int>(j.contains("config")) + static_cast<int>(j.contains("checkpoint")) +
                      static_cast<int>(j.contains("bridge"));
    if (given != 1) throw ValidationError(path, "exactly one of config, checkpoint or bridge is required");
    ModelSource src;
    if (j.contains("config")) {
        src.config = model_config_from_json(j.at("config"), path + ".config");
        src.config.validate();
    } else if (j.contains("checkpoint")) {
        // Absolute so divergence records replay from any working directory.
        src.checkpoint = std::filesystem::absolute(resolve(as_string(j.at("checkpoint"), path + ".checkpoint"), base_dir))
                             .lexically_normal();
    } else {
        const json& b = j.at("bridge");
        const std::string bp = path + ".bridge";
        if (!b.is_object()) throw ValidationError(bp, "must be an object");
        reject_unknown_keys(b, {"command", "timeout_ms"}, bp);
        BridgeSpec spec;
        const json& cmd = require(b, "command", bp);
        if (!cmd.is_array() || cmd.empty()) throw ValidationError(bp + ".command", "must be a non-empty array of strings");
        for (std::size_t i = 0; i < cmd.size(); ++i) spec.command.push_back(as_string(cmd[i], bp + ".command"));
        if (b.contains("timeout_ms")) spec.timeout_ms = static_cast<int>(as_int(b.at("timeout_ms"), bp + ".timeout_ms"));
        if (spec.timeout_ms < 1) throw ValidationError(bp + ".timeout_ms", "must be >= 1");
        src.bridge = std::move(spec);
    }
    return src;
}

json model_source_to_json(const ModelSource& src) {
    if (src.checkpoint) return json{{"checkpoint", src.checkpoint->string()}};
    if (src.bridge) return json{{"bridge", {{"command", src.bridge->command}, {"timeout_ms", src.bridge->timeout_ms}}}};
    return json{{"config", model_config_to_json(src.config)}};
}

OracleConfig oracle_for(const CampaignConfig& cfg, const PromptSpec& prompt) {
    OracleConfig o = cfg.oracle;
    if (o.refusal_prefixes.empty()) o.refusal_prefixes = {prompt.y_safe};
    if (o.affirmative_prefixes.empty()) o.affirmative_prefixes = {prompt.y_harm};
    return o;
}

CampaignConfig config_from_json(const json& j, const std::filesystem::path& base_dir) {
    if (!j.is_object()) throw ValidationError("", "config must be a JSON object");
    reject_unknown_keys(j,
                        {"schema", "model", "precision_pair", "identical_precision_control", "method", "prompts",
                         "search", "genetic", "oracle", "decode", "output_dir", "layer_analysis"},
                        "");
    const std::string schema = as_string(require(j, "schema", ""), "schema");
    if (schema != kConfigSchema) {
        throw ValidationError("schema", "expected \"" + std::string(kConfigSchema) + "\", got \"" + schema + "\"");
    }
    CampaignConfig c;
    c.model = model_source_from_json(require(j, "model", ""), "model", base_dir);

    const json& pair = require(j, "precision_pair", "");
    if (!pair.is_object()) throw ValidationError("precision_pair", "must be an object");
    reject_unknown_keys(pair, {"p1", "p2"}, "precision_pair");
    c.p1 = parse_format(require(pair, "p1", "precision_pair"), "precision_pair.p1");
    c.p2 = parse_format(require(pair, "p2", "precision_pair"), "precision_pair.p2");
    if (j.contains("identical_precision_control")) {
        c.identical_precision_control = as_bool(j.at("identical_precision_control"), "identical_precision_control");
    }
    if (c.p1 == c.p2 && !c.identical_precision_control) {
        throw ValidationError("precision_pair", "p1 and p2 are both " +
                                                    std::string(PrecisionFormat::get(c.p1).name()) +
                                                    "; set identical_precision_control to run the control");
    }
    if (j.contains("method")) c.method = parse_method(as_string(j.at("method"), "method"));
    if (j.contains("search")) c.search = search_from_json(j.at("search"), "search");
    if (j.contains("genetic")) c.genetic = genetic_from_json(j.at("genetic"), "genetic");
    if (j.contains("oracle")) c.oracle = oracle_from_json(j.at("oracle"), "oracle");
    if (j.contains("decode")) {
        const json& d = j.at("decode");
        c.decode = decode_mode_from_json(d, "decode");
        if (d.contains("n_new")) c.n_new = static_cast<int>(as_int(d.at("n_new"), "decode.n_new"));
        if (c.n_new < 1) throw ValidationError("decode.n_new", "must be >= 1");
    }
    if (j.contains("output_dir")) c.output_dir = resolve(as_string(j.at("output_dir"), "output_dir"), base_dir);
    else c.output_dir = resolve(c.output_dir, base_dir);
    if (j.contains("layer_analysis")) c.layer_analysis = as_bool(j.at("layer_analysis"), "layer_analysis");

    const json& prompts = require(j, "prompts", "");
    if (!prompts.is_array() || prompts.empty()) throw ValidationError("prompts", "must be a non-empty array");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const std::string p = "prompts[" + std::to_string(i) + "]";
        const json& pj = prompts[i];
        if (!pj.is_object()) throw ValidationError(p, "must be an object");
        reject_unknown_keys(pj, {"id", "x_user", "y_safe", "y_harm"}, p);
        PromptSpec ps;
        ps.id = as_string(require(pj, "id", p), p + ".id");
        if (!safe_id(ps.id)) throw ValidationError(p + ".id", "must be 1-64 characters from [A-Za-z0-9_.-]");
        if (!ids.insert(ps.id).second) throw ValidationError(p + ".id", "duplicate prompt id \"" + ps.id + "\"");
        ps.x_user = tokens_from_json(require(pj, "x_user", p), p + ".x_user");
        ps.y_safe = tokens_from_json(require(pj, "y_safe", p), p + ".y_safe");
        ps.y_harm = tokens_from_json(require(pj, "y_harm", p), p + ".y_harm");
        if (ps.y_safe.empty()) throw ValidationError(p + ".y_safe", "must not be empty");
        if (ps.y_harm.empty()) throw ValidationError(p + ".y_harm", "must not be empty");
        c.prompts.push_back(std::move(ps));
    }

    if (const char* env = std::getenv("PRECDIFF_SEED")) {
        try {
            std::size_t used = 0;
            c.search.rng_seed = std::stoull(env, &used);
            if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw ValidationError("PRECDIFF_SEED", "must be an unsigned integer, got \"" + std::string(env) + "\"");
        }
    }

    // Everything that can be checked without touching the model happens here.
    const bool known_vocab = !c.model.checkpoint && !c.model.bridge;
    c.search.validate(known_vocab ? c.model.config.vocab_size : std::numeric_limits<int>::max());
    for (std::size_t i = 0; i < c.prompts.size(); ++i) {
        try {
            oracle_for(c, c.prompts[i]).validate();
        } catch (const ValidationError& e) {
            throw ValidationError("prompts[" + std::to_string(i) + "]." + e.path(), e.what());
        }
    }
    return c;
}

CampaignConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("", "cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::exception& e) {
        throw FormatError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j, path.parent_path());
}

json config_to_json(const CampaignConfig& c) {
    json prompts = json::array();
    for (const auto& p : c.prompts) {
        prompts.push_back({{"id", p.id},
                           {"x_user", tokens_to_json(p.x_user)},
                           {"y_safe", tokens_to_json(p.y_safe)},
                           {"y_harm", tokens_to_json(p.y_harm)}});
    }
    json decode = decode_mode_to_json(c.decode);
    decode["n_new"] = c.n_new;
    return json{{"schema", kConfigSchema},
                {"model", model_source_to_json(c.model)},
                {"precision_pair",
                 {{"p1", PrecisionFormat::get(c.p1).name()}, {"p2", PrecisionFormat::get(c.p2).name()}}},
                {"identical_precision_control", c.identical_precision_control},
                {"method", method_name(c.method)},
                {"prompts", prompts},
                {"search", search_to_json(c.search)},
                {"genetic",
                 {{"population", c.genetic.population},
                  {"crossover_rate", c.genetic.crossover_rate},
                  {"mutation_rate", c.genetic.mutation_rate}}},
                {"oracle", oracle_to_json(c.oracle)},
                {"decode", decode},
                {"output_dir", c.output_dir.string()},
                {"layer_analysis", c.layer_analysis}};
}

}  // namespace precdiff
