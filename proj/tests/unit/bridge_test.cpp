#include "precdiff/bridge.hpp"
#include "precdiff/campaign.hpp"
#include "precdiff/errors.hpp"
#include "unit/test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace precdiff;
using json = json_util::json;

namespace {

ModelConfig seeded() {
    ModelConfig c;
    c.init_std = 0.3;
    return c;
}

struct ServedModel {
    testutil::TempDir dir{"bridge"};
    std::filesystem::path model_json;

    ServedModel() {
        model_json = dir.path() / "model.json";
        std::ofstream(model_json) << json_util::model_config_to_json(seeded()).dump();
    }

    BridgeSpec spec(bool gradients = true) const {
        BridgeSpec s;
        s.command = {PRECDIFF_CLI_PATH, "serve", "--model-json", model_json.string()};
        if (!gradients) s.command.push_back("--no-gradients");
        return s;
    }
};

std::shared_ptr<BridgeProvider> remote(const std::vector<std::string>& cmd, FormatKind k, int timeout_ms = 5000) {
    return std::make_shared<BridgeProvider>(std::make_shared<BridgeSession>(cmd, timeout_ms), PrecisionFormat::get(k));
}

}  // namespace

TEST(Bridge, LoopbackMatchesInProcess) {
    const ServedModel served;
    ModelSource src;
    src.bridge = served.spec();
    const ModelPair remote_pair = make_providers(src, FormatKind::fp32, FormatKind::int8);
    ModelSource local_src;
    local_src.config = seeded();
    const ModelPair local_pair = make_providers(local_src, FormatKind::fp32, FormatKind::int8);

    const TokenSequence x{1, 2, 3, 4, 5, 6, 7, 8};
    for (const auto& [r, l] : {std::pair{remote_pair.p1, local_pair.p1}, std::pair{remote_pair.p2, local_pair.p2}}) {
        EXPECT_EQ(r->vocab_size(), l->vocab_size());
        EXPECT_EQ(r->max_seq_len(), l->max_seq_len());
        EXPECT_TRUE(r->supports_gradients());
        EXPECT_EQ(r->logits(x), l->logits(x));
        EXPECT_EQ(r->generate(x, 3, DecodeMode{}), l->generate(x, 3, DecodeMode{}));
        const auto a = r->nll_grad(x, {9, 10}, 2, 4, true), b = l->nll_grad(x, {9, 10}, 2, 4, true);
        EXPECT_EQ(a.loss, b.loss);
        EXPECT_EQ(a.grad, b.grad);
    }
}

TEST(Bridge, SearchOverBridgeMatchesInProcess) {
    const ServedModel served;
    ModelSource src;
    src.bridge = served.spec();
    const ModelPair rp = make_providers(src, FormatKind::fp32, FormatKind::int8);
    ModelSource local_src;
    local_src.config = seeded();
    const ModelPair lp = make_providers(local_src, FormatKind::fp32, FormatKind::int8);
    SearchProblem r{rp.p1.get(), rp.p2.get(), {3, 1, 4, 1, 5, 9}, {10}, {20}, {}, 1, {}};
    r.oracle.refusal_prefixes = {{10}};
    r.oracle.affirmative_prefixes = {{20}};
    SearchProblem l = r;
    l.p1 = lp.p1.get();
    l.p2 = lp.p2.get();
    SearchConfig cfg;
    cfg.T = 3;
    cfg.B = 8;
    cfg.K = 4;
    cfg.suffix_len = 6;
    const auto a = run_dual_precision_gcg(r, cfg), b = run_dual_precision_gcg(l, cfg);
    EXPECT_EQ(a.x_adv, b.x_adv);
    ASSERT_EQ(a.loss_trace.size(), b.loss_trace.size());
    for (std::size_t i = 0; i < a.loss_trace.size(); ++i) EXPECT_EQ(a.loss_trace[i].loss_total, b.loss_trace[i].loss_total);
}

TEST(Bridge, GradientFreeServerRejectsGradientMethods) {
    const ServedModel served;
    ModelSource src;
    src.bridge = served.spec(false);
    const ModelPair p = make_providers(src, FormatKind::fp32, FormatKind::bf16);
    EXPECT_FALSE(p.p1->supports_gradients());
    EXPECT_THROW((void)p.p1->nll_grad({1, 2, 3}, {4}, 0, 3, true), Error);
    EXPECT_NO_THROW((void)p.p1->nll_grad({1, 2, 3}, {4}, 0, 3, false));

    testutil::TempDir dir("bridge_cfg");
    CampaignConfig cfg;
    cfg.model = src;
    cfg.p1 = FormatKind::fp32;
    cfg.p2 = FormatKind::bf16;
    cfg.method = Method::dual_gcg;
    cfg.prompts = {{"a", {1, 2, 3}, {4}, {5}}};
    cfg.search.T = 2;
    cfg.output_dir = dir.path() / "out";
    EXPECT_THROW((void)run_campaign(cfg), ValidationError);
    cfg.method = Method::random;
    EXPECT_NO_THROW((void)run_campaign(cfg));
}

TEST(Bridge, MalformedReplyIsASessionError) {
    try {
        (void)remote({"/bin/sh", "-c", "read l; echo 'not json at all'"}, FormatKind::fp32);
        FAIL() << "expected SessionError";
    } catch (const SessionError& e) {
        EXPECT_NE(std::string(e.what()).find("not json at all"), std::string::npos) << e.what();
    }
}

TEST(Bridge, SilentChildTimesOut) {
    EXPECT_THROW((void)remote({"/bin/sh", "-c", "sleep 5"}, FormatKind::fp32, 200), SessionError);
}

TEST(Bridge, ExitedChildIsASessionError) {
    EXPECT_THROW((void)remote({"/bin/true"}, FormatKind::fp32), SessionError);
    EXPECT_THROW((void)remote({"/nonexistent/binary"}, FormatKind::fp32), SessionError);
}

TEST(Bridge, WrongIdIsASessionError) {
    EXPECT_THROW((void)remote({"/bin/sh", "-c", "read l; echo '{\"id\":999}'"}, FormatKind::fp32), SessionError);
}

TEST(BridgeServer, ErrorsAreRepliedNotThrown) {
    BridgeServer server(seeded(), std::nullopt, true);
    const json bad = json::parse(server.handle("{oops"));
    EXPECT_TRUE(bad.contains("error"));
    const json unknown = json::parse(server.handle(R"({"id":1,"kind":"frobnicate"})"));
    EXPECT_EQ(unknown.at("id"), 1);
    EXPECT_TRUE(unknown.contains("error"));
    std::istringstream in("{\"id\":2,\"kind\":\"info\",\"fmt\":\"fp32\"}\n");
    std::ostringstream out;
    EXPECT_EQ(serve_loop(in, out, server), 0);
    EXPECT_EQ(json::parse(out.str()).at("id"), 2);
}
