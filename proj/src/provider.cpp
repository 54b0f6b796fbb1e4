#include "precdiff/provider.hpp"

#include "precdiff/errors.hpp"

namespace precdiff {

NllGrad sequence_nll_grad(const TransformerModel& m, const TokenSequence& x, const TokenSequence& target,
                          std::size_t grad_begin, std::size_t grad_len, bool want_grad) {
    if (x.empty()) throw ShapeError("sequence_nll: empty input");
    if (target.empty()) throw ShapeError("sequence_nll: empty target");
    const std::size_t total = x.size() + target.size();
    if (total > static_cast<std::size_t>(m.config().max_seq_len)) {
        throw ShapeError("sequence_nll: input (" + std::to_string(x.size()) + ") plus target (" +
                         std::to_string(target.size()) + ") exceeds max_seq_len " +
                         std::to_string(m.config().max_seq_len));
    }
    if (want_grad && grad_begin + grad_len > x.size()) throw ShapeError("sequence_nll: gradient span outside input");

    TokenSequence full = x;
    full.insert(full.end(), target.begin(), target.end() - 1);

    Tape tape(want_grad);
    const auto fwd = m.forward(tape, full, want_grad);
    const NodeId loss = tape.cross_entropy(fwd.logits, target, x.size() - 1);

    NllGrad out;
    out.loss = kernels::cross_entropy(tape.value(fwd.logits), target, x.size() - 1);
    if (!want_grad) return out;

    const Gradients grads = tape.backward(loss);
    const auto V = static_cast<std::size_t>(m.config().vocab_size);
    const auto d = static_cast<std::size_t>(m.config().d_model);
    out.grad.assign(grad_len * V, 0.0f);
    if (!grads.has(fwd.token_embeddings)) return out;
    const auto& de = grads.of(fwd.token_embeddings);
    const PTensor& table = m.weight("tok_embedding");
    for (std::size_t i = 0; i < grad_len; ++i) {
        const float* row = de.data() + (grad_begin + i) * d;
        for (std::size_t v = 0; v < V; ++v) {
            const auto e = table.row(v);
            float s = 0.0f;
            for (std::size_t c = 0; c < d; ++c) s += e[c] * row[c];
            out.grad[i * V + v] = s;
        }
    }
    return out;
}

double sequence_nll(const TransformerModel& m, const TokenSequence& x, const TokenSequence& target) {
    return sequence_nll_grad(m, x, target, 0, 0, false).loss;
}

}  // namespace precdiff
