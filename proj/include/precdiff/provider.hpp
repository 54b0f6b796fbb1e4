#pragma once

#include "precdiff/model.hpp"

#include <memory>
#include <vector>

namespace precdiff {

struct NllGrad {
    double loss = 0.0;
    // One-hot gradient, [grad_len x vocab] row-major. Empty if not requested.
    std::vector<float> grad;
};

// What the search and analysis code needs from one precision copy of a model.
// Implementations must be safe to call concurrently.
class ModelProvider {
public:
    virtual ~ModelProvider() = default;

    [[nodiscard]] virtual const PrecisionFormat& fmt() const = 0;
    [[nodiscard]] virtual int vocab_size() const = 0;
    [[nodiscard]] virtual int max_seq_len() const = 0;
    [[nodiscard]] virtual bool supports_gradients() const = 0;

    [[nodiscard]] virtual std::vector<float> logits(const TokenSequence& x) const = 0;
    // Teacher-forced NLL of `target` after `x`. When `want_grad`, also the
    // gradient w.r.t. the one-hot rows of x[grad_begin, grad_begin + grad_len).
    [[nodiscard]] virtual NllGrad nll_grad(const TokenSequence& x, const TokenSequence& target, std::size_t grad_begin,
                                           std::size_t grad_len, bool want_grad) const = 0;
    [[nodiscard]] virtual TokenSequence generate(const TokenSequence& x, int n_new, const DecodeMode& mode) const = 0;

    // In-process model, when there is one (needed for activation traces).
    [[nodiscard]] virtual const TransformerModel* local_model() const { return nullptr; }
};

// Teacher-forced NLL with fp32 backward to the token embedding rows, reduced to
// one-hot gradients through the model's own (rounded) embedding table.
NllGrad sequence_nll_grad(const TransformerModel& m, const TokenSequence& x, const TokenSequence& target,
                          std::size_t grad_begin, std::size_t grad_len, bool want_grad);

double sequence_nll(const TransformerModel& m, const TokenSequence& x, const TokenSequence& target);

class LocalProvider final : public ModelProvider {
public:
    explicit LocalProvider(std::shared_ptr<const TransformerModel> model) : model_(std::move(model)) {}

    [[nodiscard]] const PrecisionFormat& fmt() const override { return model_->fmt(); }
    [[nodiscard]] int vocab_size() const override { return model_->config().vocab_size; }
    [[nodiscard]] int max_seq_len() const override { return model_->config().max_seq_len; }
    [[nodiscard]] bool supports_gradients() const override { return true; }

    [[nodiscard]] std::vector<float> logits(const TokenSequence& x) const override { return forward_logits(*model_, x); }
    [[nodiscard]] NllGrad nll_grad(const TokenSequence& x, const TokenSequence& target, std::size_t grad_begin,
                                   std::size_t grad_len, bool want_grad) const override {
        return sequence_nll_grad(*model_, x, target, grad_begin, grad_len, want_grad);
    }
    [[nodiscard]] TokenSequence generate(const TokenSequence& x, int n_new, const DecodeMode& mode) const override {
        return greedy_decode(*model_, x, n_new, mode);
    }
    [[nodiscard]] const TransformerModel* local_model() const override { return model_.get(); }

private:
    std::shared_ptr<const TransformerModel> model_;
};

}  // namespace precdiff
