#include "precdiff/bridge.hpp"

#include "precdiff/errors.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <istream>
#include <ostream>
#include <thread>

namespace precdiff {

using json_util::json;

json decode_mode_to_json(const DecodeMode& m) {
    return json{{"mode", m.kind == DecodeMode::Kind::greedy ? "greedy" : "sample"},
                {"seed", m.seed},
                {"temperature", m.temperature}};
}

DecodeMode decode_mode_from_json(const json& j, const std::string& path) {
    using namespace json_util;
    if (!j.is_object()) throw ValidationError(path, "must be an object");
    reject_unknown_keys(j, {"mode", "seed", "temperature", "n_new"}, path);
    DecodeMode m;
    const std::string mode = j.contains("mode") ? as_string(j.at("mode"), path + ".mode") : "greedy";
    if (mode == "sample") {
        m.kind = DecodeMode::Kind::sample;
    } else if (mode != "greedy") {
        throw ValidationError(path + ".mode", "must be \"greedy\" or \"sample\"");
    }
    if (j.contains("seed")) m.seed = as_u64(j.at("seed"), path + ".seed");
    if (j.contains("temperature")) m.temperature = as_number(j.at("temperature"), path + ".temperature");
    if (!(m.temperature > 0.0)) throw ValidationError(path + ".temperature", "must be > 0");
    return m;
}

// ---- client -------------------------------------------------------------

BridgeSession::BridgeSession(const std::vector<std::string>& command, int timeout_ms) : timeout_ms_(timeout_ms) {
    if (command.empty()) throw ValidationError("model.bridge.command", "must not be empty");
    // A dead child must surface as EPIPE, not kill this process.
    ::signal(SIGPIPE, SIG_IGN);
    int in_pipe[2], out_pipe[2];
    if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw SessionError("bridge: pipe failed: " + std::string(std::strerror(errno)));
    if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
        ::close(in_pipe[0]);
        ::close(in_pipe[1]);
        throw SessionError("bridge: pipe failed: " + std::string(std::strerror(errno)));
    }
    std::vector<char*> argv;
    for (const auto& a : command) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);

    pid_ = ::fork();
    if (pid_ < 0) throw SessionError("bridge: fork failed: " + std::string(std::strerror(errno)));
    if (pid_ == 0) {
        ::dup2(in_pipe[0], STDIN_FILENO);
        ::dup2(out_pipe[1], STDOUT_FILENO);
        ::execvp(argv[0], argv.data());
        ::_exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
}

BridgeSession::~BridgeSession() {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    if (pid_ <= 0) return;
    int status = 0;
    for (int i = 0; i < 100; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) == pid_) return;
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, &status, 0);
}

std::string BridgeSession::read_line() {
    for (;;) {
        const auto nl = buffer_.find('\n');
        if (nl != std::string::npos) {
            std::string line = buffer_.substr(0, nl);
            buffer_.erase(0, nl + 1);
            return line;
        }
        pollfd pfd{from_child_, POLLIN, 0};
        const int rc = ::poll(&pfd, 1, timeout_ms_);
        if (rc == 0) throw SessionError("bridge: no reply within " + std::to_string(timeout_ms_) + " ms");
        if (rc < 0) {
            if (errno == EINTR) continue;
            throw SessionError("bridge: poll failed: " + std::string(std::strerror(errno)));
        }
        char chunk[65536];
        const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw SessionError("bridge: read failed: " + std::string(std::strerror(errno)));
        }
        if (n == 0) throw SessionError("bridge: child closed its output");
        buffer_.append(chunk, static_cast<std::size_t>(n));
    }
}

json BridgeSession::request(json req) {
    std::lock_guard lock(mutex_);
    const std::uint64_t id = next_id_++;
    req["id"] = id;
    const std::string out = json_util::dump_line(req) + "\n";
    std::size_t off = 0;
    while (off < out.size()) {
        const ssize_t n = ::write(to_child_, out.data() + off, out.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw SessionError("bridge: write failed: " + std::string(std::strerror(errno)));
        }
        off += static_cast<std::size_t>(n);
    }
    const std::string line = read_line();
    json reply;
    try {
        reply = json::parse(line);
    } catch (const json::exception&) {
        throw SessionError("bridge: malformed reply: " + line);
    }
    if (!reply.is_object() || !reply.contains("id") || !reply.at("id").is_number_unsigned() ||
        reply.at("id").get<std::uint64_t>() != id) {
        throw SessionError("bridge: reply does not echo request id " + std::to_string(id) + ": " + line);
    }
    if (reply.contains("error")) throw SessionError("bridge: remote error: " + reply.at("error").dump());
    return reply;
}

BridgeProvider::BridgeProvider(std::shared_ptr<BridgeSession> session, const PrecisionFormat& fmt)
    : session_(std::move(session)), fmt_(&fmt) {
    const json info = session_->request({{"kind", "info"}, {"fmt", fmt.name()}});
    try {
        vocab_size_ = info.at("vocab_size").get<int>();
        max_seq_len_ = info.at("max_seq_len").get<int>();
        gradients_ = info.at("supports_gradients").get<bool>();
    } catch (const json::exception&) {
        throw SessionError("bridge: malformed info reply: " + info.dump());
    }
}

namespace {

template <class F>
auto decode_reply(const json& reply, F&& f) {
    try {
        return f();
    } catch (const json::exception&) {
        throw SessionError("bridge: malformed reply: " + json_util::dump_line(reply));
    } catch (const ValidationError&) {
        throw SessionError("bridge: malformed reply: " + json_util::dump_line(reply));
    }
}

}  // namespace

std::vector<float> BridgeProvider::logits(const TokenSequence& x) const {
    const json r = session_->request({{"kind", "logits"}, {"fmt", fmt_->name()}, {"tokens", x}});
    return decode_reply(r, [&] { return json_util::floats_from_json(r.at("logits"), "logits"); });
}

NllGrad BridgeProvider::nll_grad(const TokenSequence& x, const TokenSequence& target, std::size_t grad_begin,
                                 std::size_t grad_len, bool want_grad) const {
    if (want_grad && !gradients_) throw Error("bridge: provider does not support gradients");
    const json r = session_->request({{"kind", "nll_grad"},
                                      {"fmt", fmt_->name()},
                                      {"tokens", x},
                                      {"target", target},
                                      {"grad_begin", grad_begin},
                                      {"grad_len", grad_len},
                                      {"want_grad", want_grad}});
    return decode_reply(r, [&] {
        NllGrad out;
        out.loss = r.at("loss").get<double>();
        if (want_grad) out.grad = json_util::floats_from_json(r.at("grad"), "grad");
        return out;
    });
}

TokenSequence BridgeProvider::generate(const TokenSequence& x, int n_new, const DecodeMode& mode) const {
    const json r = session_->request(
        {{"kind", "generate"}, {"fmt", fmt_->name()}, {"tokens", x}, {"n_new", n_new}, {"decode", decode_mode_to_json(mode)}});
    return decode_reply(r, [&] { return json_util::tokens_from_json(r.at("tokens"), "tokens"); });
}

// ---- server -------------------------------------------------------------

BridgeServer::BridgeServer(const ModelConfig& cfg, std::optional<std::filesystem::path> checkpoint, bool gradients)
    : cfg_(cfg), checkpoint_(std::move(checkpoint)), gradients_(gradients) {}

const TransformerModel& BridgeServer::model(const PrecisionFormat& fmt) {
    auto& slot = models_[fmt.kind];
    if (!slot) {
        slot = std::make_unique<TransformerModel>(checkpoint_ ? load_checkpoint(*checkpoint_, fmt)
                                                              : TransformerModel::build(cfg_, fmt));
    }
    return *slot;
}

std::string BridgeServer::handle(const std::string& line) {
    using namespace json_util;
    json reply = json::object();
    try {
        const json req = json::parse(line);
        if (req.contains("id")) reply["id"] = req.at("id");
        const std::string kind = as_string(require(req, "kind", ""), "kind");
        const TransformerModel& m = model(PrecisionFormat::parse(as_string(require(req, "fmt", ""), "fmt")));
        if (kind == "info") {
            reply["vocab_size"] = m.config().vocab_size;
            reply["max_seq_len"] = m.config().max_seq_len;
            reply["supports_gradients"] = gradients_;
        } else if (kind == "logits") {
            reply["logits"] = floats_to_json(forward_logits(m, tokens_from_json(require(req, "tokens", ""), "tokens")));
        } else if (kind == "nll_grad") {
            const bool want_grad = as_bool(require(req, "want_grad", ""), "want_grad");
            if (want_grad && !gradients_) throw Error("gradients not supported by this server");
            const auto r = sequence_nll_grad(m, tokens_from_json(require(req, "tokens", ""), "tokens"),
                                             tokens_from_json(require(req, "target", ""), "target"),
                                             as_u64(require(req, "grad_begin", ""), "grad_begin"),
                                             as_u64(require(req, "grad_len", ""), "grad_len"), want_grad);
            reply["loss"] = r.loss;
            if (want_grad) reply["grad"] = floats_to_json(r.grad);
        } else if (kind == "generate") {
            const auto mode = decode_mode_from_json(require(req, "decode", ""), "decode");
            reply["tokens"] = greedy_decode(m, tokens_from_json(require(req, "tokens", ""), "tokens"),
                                            static_cast<int>(as_int(require(req, "n_new", ""), "n_new")), mode);
        } else {
            throw Error("unknown request kind \"" + kind + "\"");
        }
    } catch (const std::exception& e) {
        json err = json::object();
        if (reply.contains("id")) err["id"] = reply["id"];
        err["error"] = e.what();
        return dump_line(err);
    }
    return dump_line(reply);
}

int serve_loop(std::istream& in, std::ostream& out, BridgeServer& server) {
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out << server.handle(line) << '\n' << std::flush;
    }
    return 0;
}

}  // namespace precdiff
