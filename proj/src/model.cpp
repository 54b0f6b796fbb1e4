#include "precdiff/model.hpp"

#include "precdiff/errors.hpp"
#include "precdiff/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace precdiff {

TokenSequence concat(const TokenSequence& a, const TokenSequence& b) {
    TokenSequence out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* field) {
        if (v < 1) throw ValidationError(field, "must be >= 1, got " + std::to_string(v));
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(max_seq_len, "max_seq_len");
    if (!(init_std > 0.0) || !std::isfinite(init_std)) throw ValidationError("init_std", "must be a positive number");
    if (vocab_size < 8) throw ValidationError("vocab_size", "must be >= 8, got " + std::to_string(vocab_size));
    if (d_model % n_heads != 0) {
        throw ValidationError("d_model", "must be divisible by n_heads (" + std::to_string(d_model) + " % " +
                                             std::to_string(n_heads) + " != 0)");
    }
}

namespace {

struct WeightSpec {
    std::string name;
    Shape shape;
    bool is_gain;
};

std::vector<WeightSpec> weight_specs(const ModelConfig& c) {
    const auto v = static_cast<std::size_t>(c.vocab_size), d = static_cast<std::size_t>(c.d_model),
               f = static_cast<std::size_t>(c.d_ff), l = static_cast<std::size_t>(c.max_seq_len);
    std::vector<WeightSpec> specs{{"tok_embedding", {v, d}, false}, {"pos_embedding", {l, d}, false}};
    for (int b = 0; b < c.n_layers; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        specs.push_back({p + "attn_norm.gain", {d}, true});
        specs.push_back({p + "attn.w_q", {d, d}, false});
        specs.push_back({p + "attn.w_k", {d, d}, false});
        specs.push_back({p + "attn.w_v", {d, d}, false});
        specs.push_back({p + "attn.w_o", {d, d}, false});
        specs.push_back({p + "mlp_norm.gain", {d}, true});
        specs.push_back({p + "mlp.w_in", {d, f}, false});
        specs.push_back({p + "mlp.w_out", {f, d}, false});
    }
    specs.push_back({"final_norm.gain", {d}, true});
    specs.push_back({"head.weight", {d, v}, false});
    return specs;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t checksum(const std::map<std::string, PTensor>& weights) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : weights) {
        h = fnv1a(h, name.data(), name.size());
        h = fnv1a(h, t.data().data(), t.size() * sizeof(float));
    }
    return h;
}

}  // namespace

std::vector<std::string> TransformerModel::weight_names(int n_layers) {
    ModelConfig c;
    c.n_layers = n_layers;
    std::vector<std::string> names;
    for (const auto& s : weight_specs(c)) names.push_back(s.name);
    return names;
}

std::vector<std::string> TransformerModel::make_layer_order(int n_layers) {
    std::vector<std::string> order{"embed"};
    for (int b = 0; b < n_layers; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        for (const char* leaf : {"attn_norm", "attn.w_q", "attn.w_k", "attn.w_v", "attn.core", "attn.w_o", "mlp_norm",
                                 "mlp.w_in", "mlp.act", "mlp.w_out"}) {
            order.push_back(p + leaf);
        }
    }
    order.emplace_back("final_norm");
    order.emplace_back("head");
    return order;
}

TransformerModel::TransformerModel(ModelConfig cfg, std::map<std::string, PTensor> weights, const PrecisionFormat& fmt)
    : cfg_(cfg), fmt_(&fmt), weights_(std::move(weights)), layer_order_(make_layer_order(cfg.n_layers)) {
    cfg_.validate();
    check_weights();
    source_checksum_ = checksum(weights_);
    for (auto& [name, t] : weights_) t = apply_precision(t, fmt);
}

void TransformerModel::check_weights() const {
    const auto specs = weight_specs(cfg_);
    if (specs.size() != weights_.size()) {
        throw ShapeError("model expects " + std::to_string(specs.size()) + " weight tensors, got " +
                         std::to_string(weights_.size()));
    }
    for (const auto& s : specs) {
        auto it = weights_.find(s.name);
        if (it == weights_.end()) throw ShapeError("missing weight \"" + s.name + "\"");
        if (it->second.shape() != s.shape) {
            throw ShapeError("weight \"" + s.name + "\" has shape " + shape_to_string(it->second.shape()) +
                             ", expected " + shape_to_string(s.shape));
        }
    }
}

TransformerModel TransformerModel::build(const ModelConfig& cfg, const PrecisionFormat& fmt) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, {0x776569676874ULL}));
    std::map<std::string, PTensor> weights;
    for (const auto& s : weight_specs(cfg)) {
        PTensor t(s.shape);
        for (float& v : t.mutable_data()) v = s.is_gain ? 1.0f : static_cast<float>(cfg.init_std * rng.normal());
        weights.emplace(s.name, std::move(t));
    }
    return TransformerModel(cfg, std::move(weights), fmt);
}

const PTensor& TransformerModel::weight(const std::string& name) const {
    auto it = weights_.find(name);
    if (it == weights_.end()) throw Error("unknown weight \"" + name + "\"");
    return it->second;
}

void TransformerModel::set_weight(const std::string& name, const PTensor& raw) {
    auto it = weights_.find(name);
    if (it == weights_.end()) throw Error("unknown weight \"" + name + "\"");
    if (raw.shape() != it->second.shape()) {
        throw ShapeError("weight \"" + name + "\" has shape " + shape_to_string(it->second.shape()) +
                         ", got " + shape_to_string(raw.shape()));
    }
    it->second = apply_precision(raw, *fmt_);
}

TransformerModel::Forward TransformerModel::forward(Tape& tape, std::span<const int> tokens, bool embedding_grad,
                                                    ActivationTrace* trace) const {
    const std::size_t len = tokens.size();
    if (len == 0) throw ShapeError("forward: empty token sequence");
    if (len > static_cast<std::size_t>(cfg_.max_seq_len)) {
        throw ShapeError("forward: sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                         std::to_string(cfg_.max_seq_len));
    }
    const PrecisionFormat& f = *fmt_;
    const auto d = static_cast<std::size_t>(cfg_.d_model);

    std::vector<std::pair<const std::string*, NodeId>> recorded;
    recorded.reserve(layer_order_.size());
    std::size_t next_layer = 0;
    auto mark = [&](NodeId id) {
        if (trace) recorded.emplace_back(&layer_order_[next_layer], id);
        ++next_layer;
        return id;
    };
    auto w = [&](const std::string& name) { return tape.constant(weight(name)); };

    // Token rows are copied verbatim; they already conform to the table's format.
    const PTensor& table = weight("tok_embedding");
    PTensor rows({len, d}, f);
    PTensor pos({len, d}, f);
    {
        auto r = rows.mutable_data();
        auto p = pos.mutable_data();
        const PTensor& pe = weight("pos_embedding");
        for (std::size_t i = 0; i < len; ++i) {
            const int t = tokens[i];
            if (t < 0 || t >= cfg_.vocab_size) {
                throw ShapeError("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                                 std::to_string(cfg_.vocab_size));
            }
            const auto src = table.row(static_cast<std::size_t>(t));
            std::copy(src.begin(), src.end(), r.begin() + static_cast<std::ptrdiff_t>(i * d));
            const auto ps = pe.row(i);
            std::copy(ps.begin(), ps.end(), p.begin() + static_cast<std::ptrdiff_t>(i * d));
        }
    }
    const NodeId tok = tape.input(std::move(rows), embedding_grad);
    const NodeId pos_id = tape.input(std::move(pos));
    NodeId h = mark(tape.add(tok, pos_id, f));

    for (int b = 0; b < cfg_.n_layers; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        const NodeId a = mark(tape.rmsnorm(h, w(p + "attn_norm.gain"), kNormEps, f));
        const NodeId q = mark(tape.matmul(a, w(p + "attn.w_q"), f));
        const NodeId k = mark(tape.matmul(a, w(p + "attn.w_k"), f));
        const NodeId v = mark(tape.matmul(a, w(p + "attn.w_v"), f));
        const NodeId core = mark(tape.causal_attention(q, k, v, cfg_.n_heads, f));
        const NodeId o = mark(tape.matmul(core, w(p + "attn.w_o"), f));
        h = tape.add(h, o, f);
        const NodeId m = mark(tape.rmsnorm(h, w(p + "mlp_norm.gain"), kNormEps, f));
        const NodeId up = mark(tape.matmul(m, w(p + "mlp.w_in"), f));
        const NodeId act = mark(tape.gelu(up, f));
        const NodeId down = mark(tape.matmul(act, w(p + "mlp.w_out"), f));
        h = tape.add(h, down, f);
    }
    const NodeId fn = mark(tape.rmsnorm(h, w("final_norm.gain"), kNormEps, f));
    const NodeId logits = mark(tape.matmul(fn, w("head.weight"), f));

    if (trace) {
        trace->step_index = 0;
        trace->layers.clear();
        for (const auto& [name, id] : recorded) trace->layers.push_back({*name, tape.value(id)});
    }
    return {tok, logits};
}

std::vector<float> forward_logits(const TransformerModel& m, const TokenSequence& x, ActivationTrace* trace) {
    Tape tape(false);
    const auto fwd = m.forward(tape, x, false, trace);
    const PTensor& z = tape.value(fwd.logits);
    const auto last = z.row(z.rows() - 1);
    return {last.begin(), last.end()};
}

int argmax(std::span<const float> values) {
    int best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
}

TokenSequence greedy_decode(const TransformerModel& m, const TokenSequence& x, int n_new, const DecodeMode& mode) {
    if (n_new < 1) throw Error("decode: n_new must be >= 1");
    if (x.empty()) throw ShapeError("decode: empty input sequence");
    const std::size_t final_len = x.size() + static_cast<std::size_t>(n_new) - 1;
    if (final_len > static_cast<std::size_t>(m.config().max_seq_len)) {
        throw ShapeError("decode: input length " + std::to_string(x.size()) + " plus " + std::to_string(n_new) +
                         " new tokens exceeds max_seq_len " + std::to_string(m.config().max_seq_len));
    }
    if (mode.kind == DecodeMode::Kind::sample && !(mode.temperature > 0.0)) {
        throw Error("decode: sampling temperature must be > 0");
    }
    Rng rng(derive_seed(mode.seed, {0x73616d706c65ULL}));
    TokenSequence seq = x;
    TokenSequence out;
    for (int step = 0; step < n_new; ++step) {
        const auto z = forward_logits(m, seq);
        int next = 0;
        if (mode.kind == DecodeMode::Kind::greedy) {
            next = argmax(z);
        } else {
            const float mx = z[static_cast<std::size_t>(argmax(z))];
            std::vector<double> w(z.size());
            double total = 0.0;
            for (std::size_t i = 0; i < z.size(); ++i) {
                w[i] = std::exp((static_cast<double>(z[i]) - mx) / mode.temperature);
                total += w[i];
            }
            double u = rng.uniform() * total;
            next = static_cast<int>(z.size()) - 1;
            for (std::size_t i = 0; i < z.size(); ++i) {
                u -= w[i];
                if (u < 0.0) {
                    next = static_cast<int>(i);
                    break;
                }
            }
        }
        out.push_back(next);
        seq.push_back(next);
    }
    return out;
}

}  // namespace precdiff
