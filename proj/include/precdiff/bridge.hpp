#pragma once

#include "precdiff/json_util.hpp"
#include "precdiff/provider.hpp"

#include <sys/types.h>

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace precdiff {

// A child process speaking line-delimited JSON on stdin/stdout. Each request
// gets a fresh id that the reply must echo.
class BridgeSession {
public:
    BridgeSession(const std::vector<std::string>& command, int timeout_ms);
    ~BridgeSession();
    BridgeSession(const BridgeSession&) = delete;
    BridgeSession& operator=(const BridgeSession&) = delete;

    // Thread-safe; one request in flight at a time.
    json_util::json request(json_util::json req);

private:
    std::string read_line();

    pid_t pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    int timeout_ms_;
    std::uint64_t next_id_ = 1;
    std::string buffer_;
    std::mutex mutex_;
};

class BridgeProvider final : public ModelProvider {
public:
    BridgeProvider(std::shared_ptr<BridgeSession> session, const PrecisionFormat& fmt);

    [[nodiscard]] const PrecisionFormat& fmt() const override { return *fmt_; }
    [[nodiscard]] int vocab_size() const override { return vocab_size_; }
    [[nodiscard]] int max_seq_len() const override { return max_seq_len_; }
    [[nodiscard]] bool supports_gradients() const override { return gradients_; }

    [[nodiscard]] std::vector<float> logits(const TokenSequence& x) const override;
    [[nodiscard]] NllGrad nll_grad(const TokenSequence& x, const TokenSequence& target, std::size_t grad_begin,
                                   std::size_t grad_len, bool want_grad) const override;
    [[nodiscard]] TokenSequence generate(const TokenSequence& x, int n_new, const DecodeMode& mode) const override;

private:
    std::shared_ptr<BridgeSession> session_;
    const PrecisionFormat* fmt_;
    int vocab_size_ = 0;
    int max_seq_len_ = 0;
    bool gradients_ = false;
};

// Server half of the protocol, backed by in-process models built on demand
// for each requested format.
class BridgeServer {
public:
    BridgeServer(const ModelConfig& cfg, std::optional<std::filesystem::path> checkpoint, bool gradients);

    // One request line in, one reply line out (no trailing newline).
    std::string handle(const std::string& line);

private:
    const TransformerModel& model(const PrecisionFormat& fmt);

    ModelConfig cfg_;
    std::optional<std::filesystem::path> checkpoint_;
    bool gradients_;
    std::map<FormatKind, std::unique_ptr<TransformerModel>> models_;
};

// Reads requests until EOF. Returns 0.
int serve_loop(std::istream& in, std::ostream& out, BridgeServer& server);

json_util::json decode_mode_to_json(const DecodeMode& m);
DecodeMode decode_mode_from_json(const json_util::json& j, const std::string& path);

}  // namespace precdiff
