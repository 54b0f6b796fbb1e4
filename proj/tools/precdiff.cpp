#include "precdiff/bridge.hpp"
#include "precdiff/campaign.hpp"
#include "precdiff/errors.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

using namespace precdiff;
using json_util::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitMismatch = 3;
constexpr int kExitRuntime = 4;

std::string slurp(const std::string& path) {
    if (path == "-") {
        std::stringstream ss;
        ss << std::cin.rdbuf();
        return ss.str();
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("", "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json parse_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(what + ": " + e.what());
    }
}

// "[1,2,3]", "1,2,3" or "1 2 3".
TokenSequence parse_tokens(const std::string& text) {
    std::string t = text;
    if (!t.empty() && t.front() == '[') return json_util::tokens_from_json(parse_json(t, "input"), "input");
    for (char& c : t) {
        if (c == ',') c = ' ';
    }
    std::istringstream is(t);
    TokenSequence out;
    std::string tok;
    while (is >> tok) {
        try {
            std::size_t used = 0;
            const int v = std::stoi(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ValidationError("input", "not a token id: \"" + tok + "\"");
        }
    }
    if (out.empty()) throw ValidationError("input", "must not be empty");
    return out;
}

std::shared_ptr<const TransformerModel> load_model(const std::string& ckpt, const std::string& model_json,
                                                   const PrecisionFormat& fmt) {
    if (ckpt.empty() == model_json.empty()) throw ValidationError("", "give exactly one of --ckpt or --model-json");
    if (!ckpt.empty()) return std::make_shared<const TransformerModel>(load_checkpoint(ckpt, fmt));
    ModelConfig cfg = json_util::model_config_from_json(parse_json(slurp(model_json), model_json), "model");
    cfg.validate();
    return std::make_shared<const TransformerModel>(TransformerModel::build(cfg, fmt));
}

int cmd_run(const std::string& config_path, bool quiet) {
    const CampaignConfig cfg = load_config(config_path);
    const CampaignResult res = run_campaign(cfg);
    if (!quiet) {
        for (const auto& p : res.prompts) {
            std::cout << p.prompt_id << ": ";
            if (p.error) {
                std::cout << "error: " << *p.error;
            } else if (p.search.first_success_iter) {
                std::cout << "divergence at t=" << *p.search.first_success_iter << " (" << p.search.divergences.size()
                          << " records)";
            } else {
                std::cout << "no divergence";
            }
            std::cout << '\n';
        }
    }
    std::cout << "success_rate: " << res.metrics.success_rate_text() << '\n'
              << "avg_iterations: " << res.metrics.avg_iterations_text() << '\n'
              << "output_dir: " << cfg.output_dir.string() << '\n';
    return kExitOk;
}

int cmd_analyze(const std::string& ckpt, const std::string& model_json, const std::string& p1, const std::string& p2,
                const std::string& input, const std::string& out_path) {
    const auto m1 = load_model(ckpt, model_json, PrecisionFormat::parse(p1));
    const auto m2 = load_model(ckpt, model_json, PrecisionFormat::parse(p2));
    const TokenSequence x = parse_tokens(input);
    for (int t : x) {
        if (t < 0 || t >= m1->config().vocab_size) throw ValidationError("input", "token id out of range");
    }
    if (static_cast<int>(x.size()) > m1->config().max_seq_len) throw ValidationError("input", "longer than max_seq_len");
    const std::string csv = layer_report_csv(layer_report(capture_first_token_traces(*m1, *m2, x)));
    if (out_path.empty()) {
        std::cout << csv;
    } else {
        std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + out_path);
        out << csv;
    }
    return kExitOk;
}

int cmd_replay(const std::string& arg) {
    std::vector<std::string> lines;
    if (!arg.empty() && arg.front() == '{') {
        lines.push_back(arg);
    } else {
        std::istringstream is(slurp(arg));
        std::string line;
        while (std::getline(is, line)) {
            if (!line.empty()) lines.push_back(line);
        }
    }
    if (lines.empty()) throw ValidationError("", "no divergence records to replay");
    int mismatches = 0;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const ReplayOutcome r = replay_record(parse_json(lines[i], "record " + std::to_string(i + 1)));
        if (!r.match) ++mismatches;
        std::cout << "record " << (i + 1) << ": " << (r.match ? "match" : "MISMATCH") << ": " << r.detail << '\n';
    }
    std::cout << (lines.size() - static_cast<std::size_t>(mismatches)) << "/" << lines.size() << " records reproduce\n";
    return mismatches == 0 ? kExitOk : kExitMismatch;
}

int cmd_report(const std::string& dir) {
    const ReportOutcome r = report_directory(dir);
    std::cout << r.text;
    return r.matches_metrics_file ? kExitOk : kExitMismatch;
}

int cmd_serve(const std::string& ckpt, const std::string& model_json, bool no_gradients) {
    if (ckpt.empty() == model_json.empty()) throw ValidationError("", "give exactly one of --ckpt or --model-json");
    ModelConfig cfg;
    std::optional<std::filesystem::path> path;
    if (!ckpt.empty()) {
        path = ckpt;
    } else {
        cfg = json_util::model_config_from_json(parse_json(slurp(model_json), model_json), "model");
        cfg.validate();
    }
    BridgeServer server(cfg, path, !no_gradients);
    return serve_loop(std::cin, std::cout, server);
}

int cmd_suite(const std::string& template_path, const SuiteSpec& spec, const std::string& out_path) {
    json doc = parse_json(slurp(template_path), template_path);
    if (!doc.is_object()) throw ValidationError("", "template must be a JSON object");
    doc["prompts"] = json::array({json{{"id", "placeholder"}, {"x_user", {0}}, {"y_safe", {0}}, {"y_harm", {1}}}});
    const CampaignConfig cfg = config_from_json(doc, std::filesystem::path(template_path).parent_path());
    if (cfg.model.bridge) throw ValidationError("model", "suite generation needs a local model");
    const PrecisionFormat& f1 = PrecisionFormat::get(cfg.p1);
    const TransformerModel ref =
        cfg.model.checkpoint ? load_checkpoint(*cfg.model.checkpoint, f1) : TransformerModel::build(cfg.model.config, f1);
    json prompts = json::array();
    for (const auto& p : generate_suite(ref, spec)) {
        prompts.push_back({{"id", p.id}, {"x_user", p.x_user}, {"y_safe", p.y_safe}, {"y_harm", p.y_harm}});
    }
    doc["prompts"] = prompts;
    const std::string text = doc.dump(2) + "\n";
    if (out_path.empty()) {
        std::cout << text;
    } else {
        std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + out_path);
        out << text;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Precision-divergence search and layer profiling for small decoder models"};
    app.require_subcommand(1);

    std::string config_path;
    bool quiet = false;
    auto* run = app.add_subcommand("run", "Run a campaign from a config file");
    run->add_option("config", config_path, "Campaign config (JSON)")->required();
    run->add_flag("-q,--quiet", quiet, "Only print the metrics summary");

    std::string ckpt, model_json, p1, p2, input, out_path;
    auto* analyze = app.add_subcommand("analyze", "One-shot layer divergence report for an input");
    analyze->add_option("--ckpt", ckpt, "Checkpoint file");
    analyze->add_option("--model-json", model_json, "Model config (JSON) to build from its seed");
    analyze->add_option("--p1", p1, "Reference format")->required();
    analyze->add_option("--p2", p2, "Target format")->required();
    analyze->add_option("--input", input, "Token ids: 1,2,3 or [1,2,3]")->required();
    analyze->add_option("-o,--out", out_path, "Write the CSV here instead of stdout");

    std::string record;
    auto* replay = app.add_subcommand("replay", "Check that stored divergence records reproduce");
    replay->add_option("record", record, "A divergence log line, a .jsonl file, or - for stdin")->required();

    std::string result_dir;
    auto* report = app.add_subcommand("report", "Re-aggregate metrics from a result directory");
    report->add_option("dir", result_dir, "Result directory")->required();

    bool no_gradients = false;
    auto* serve = app.add_subcommand("serve", "Serve a model over the bridge protocol on stdin/stdout");
    serve->add_option("--ckpt", ckpt, "Checkpoint file");
    serve->add_option("--model-json", model_json, "Model config (JSON) to build from its seed");
    serve->add_flag("--no-gradients", no_gradients, "Refuse gradient requests");

    std::string template_path;
    SuiteSpec spec;
    auto* suite = app.add_subcommand("suite", "Write a config with a seeded prompt suite");
    suite->add_option("template", template_path, "Config whose prompts are replaced")->required();
    suite->add_option("-n,--n-prompts", spec.n_prompts, "Number of prompts");
    suite->add_option("--prompt-len", spec.prompt_len, "User prompt length");
    suite->add_option("--witness-len", spec.witness_len, "Witness suffix length");
    suite->add_option("--harm-rank", spec.harm_rank, "Rank of the harmful target token");
    suite->add_option("--seed", spec.seed, "Suite seed");
    suite->add_option("-o,--out", out_path, "Output file (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*run) return cmd_run(config_path, quiet);
        if (*analyze) return cmd_analyze(ckpt, model_json, p1, p2, input, out_path);
        if (*replay) return cmd_replay(record);
        if (*report) return cmd_report(result_dir);
        if (*serve) return cmd_serve(ckpt, model_json, no_gradients);
        if (*suite) return cmd_suite(template_path, spec, out_path);
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
