#pragma once

#include "precdiff/tensor.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace precdiff {

using NodeId = std::size_t;

// Gradient accumulators indexed by node id. Nodes that no gradient reached hold
// an empty vector.
class Gradients {
public:
    explicit Gradients(std::size_t n_nodes) : grads_(n_nodes) {}

    [[nodiscard]] bool has(NodeId id) const { return !grads_[id].empty(); }
    [[nodiscard]] const std::vector<float>& of(NodeId id) const { return grads_[id]; }
    std::vector<float>& accumulator(NodeId id, std::size_t size);

private:
    std::vector<std::vector<float>> grads_;
};

// Records precision-tagged primitive ops for one forward pass. Backward treats
// every rounding / quantization step as the identity and runs in fp32.
//
// With `record_backward` off the tape only keeps forward values, which is the
// cheap path for pure evaluation.
class Tape {
public:
    explicit Tape(bool record_backward = true) : record_(record_backward) {}

    NodeId input(PTensor value, bool requires_grad = false);
    // Non-differentiable leaf that refers to `value` without copying it. The
    // tensor must outlive the tape.
    NodeId constant(const PTensor& value);

    [[nodiscard]] const PTensor& value(NodeId id) const {
        const Node& n = nodes_.at(id);
        return n.external ? *n.external : n.value;
    }
    [[nodiscard]] bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }
    [[nodiscard]] bool recording() const { return record_; }

    NodeId matmul(NodeId a, NodeId b, const PrecisionFormat& fmt);
    NodeId add(NodeId a, NodeId b, const PrecisionFormat& fmt);
    NodeId mul(NodeId a, NodeId b, const PrecisionFormat& fmt);
    NodeId softmax_rows(NodeId a, const PrecisionFormat& fmt);
    NodeId rmsnorm(NodeId x, NodeId gain, float eps, const PrecisionFormat& fmt);
    NodeId gelu(NodeId x, const PrecisionFormat& fmt);
    NodeId embed_lookup(NodeId table, std::span<const int> tokens, const PrecisionFormat& fmt);
    NodeId causal_attention(NodeId q, NodeId k, NodeId v, int n_heads, const PrecisionFormat& fmt);
    NodeId precision_cast(NodeId a, const PrecisionFormat& fmt);

    // Scalar fp32 reductions used as losses.
    NodeId sum(NodeId a);
    NodeId cross_entropy(NodeId logits, std::span<const int> targets, std::size_t first_row);

    // Reverse-mode pass from a scalar node, visiting nodes in exact reverse
    // recording order.
    [[nodiscard]] Gradients backward(NodeId loss) const;

private:
    using BackwardFn = std::function<void(const Tape&, NodeId self, const std::vector<float>& grad_out, Gradients&)>;

    struct Node {
        PTensor value;
        bool requires_grad = false;
        BackwardFn backward;
        const PTensor* external = nullptr;
    };

    NodeId push(PTensor value, std::initializer_list<NodeId> inputs, BackwardFn fn);

    bool record_;
    std::vector<Node> nodes_;
};

}  // namespace precdiff
