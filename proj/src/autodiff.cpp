#include "precdiff/autodiff.hpp"

#include "precdiff/errors.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace precdiff {

std::vector<float>& Gradients::accumulator(NodeId id, std::size_t size) {
    auto& g = grads_[id];
    if (g.empty()) g.assign(size, 0.0f);
    return g;
}

NodeId Tape::input(PTensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), requires_grad, nullptr, nullptr});
    return nodes_.size() - 1;
}

NodeId Tape::constant(const PTensor& value) {
    nodes_.push_back(Node{PTensor{}, false, nullptr, &value});
    return nodes_.size() - 1;
}

NodeId Tape::push(PTensor value, std::initializer_list<NodeId> inputs, BackwardFn fn) {
    bool rg = false;
    for (NodeId in : inputs) rg = rg || nodes_.at(in).requires_grad;
    Node node{std::move(value), rg && record_, nullptr, nullptr};
    if (node.requires_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

NodeId Tape::matmul(NodeId a, NodeId b, const PrecisionFormat& fmt) {
    return push(kernels::matmul(value(a), value(b), fmt), {a, b},
                [a, b](const Tape& t, NodeId, const std::vector<float>& gout, Gradients& grads) {
                    const PTensor& A = t.value(a);
                    const PTensor& B = t.value(b);
                    const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
                    if (t.requires_grad(a)) {
                        auto& ga = grads.accumulator(a, A.size());
                        for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t p = 0; p < k; ++p) {
                                float s = 0.0f;
                                for (std::size_t j = 0; j < n; ++j) s += gout[i * n + j] * B[p * n + j];
                                ga[i * k + p] += s;
                            }
                        }
                    }
                    if (t.requires_grad(b)) {
                        auto& gb = grads.accumulator(b, B.size());
                        for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t p = 0; p < k; ++p) {
                                const float aip = A[i * k + p];
                                for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * gout[i * n + j];
                            }
                        }
                    }
                });
}

NodeId Tape::add(NodeId a, NodeId b, const PrecisionFormat& fmt) {
    return push(kernels::add(value(a), value(b), fmt), {a, b},
                [a, b](const Tape& t, NodeId, const std::vector<float>& gout, Gradients& grads) {
                    if (t.requires_grad(a)) {
                        auto& ga = grads.accumulator(a, gout.size());
                        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
                    }
                    if (t.requires_grad(b)) {
                        const std::size_t nb = t.value(b).size();
                        auto& gb = grads.accumulator(b, nb);
                        for (std::size_t i = 0; i < gout.size(); ++i) gb[i % nb] += gout[i];
                    }
                });
}

NodeId Tape::mul(NodeId a, NodeId b, const PrecisionFormat& fmt) {
    return push(kernels::mul(value(a), value(b), fmt), {a, b},
                [a, b](const Tape& t, NodeId, const std::vector<float>& gout, Gradients& grads) {
                    const PTensor& A = t.value(a);
                    const PTensor& B = t.value(b);
                    if (t.requires_grad(a)) {
                        auto& ga = grads.accumulator(a, A.size());
                        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i] * B[i];
                    }
                    if (t.requires_grad(b)) {
                        auto& gb = grads.accumulator(b, B.size());
                        for (std::size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i] * A[i];
                    }
                });
}

NodeId Tape::softmax_rows(NodeId a, const PrecisionFormat& fmt) {
    return push(kernels::softmax_rows(value(a), fmt), {a},
                [a](const Tape& t, NodeId self, const std::vector<float>& gout, Gradients& grads) {
                    const PTensor& Y = t.value(self);
                    const std::size_t n = Y.cols();
                    auto& ga = grads.accumulator(a, Y.size());
                    for (std::size_t r = 0; r < Y.rows(); ++r) {
                        float dot = 0.0f;
                        for (std::size_t j = 0; j < n; ++j) dot += Y[r * n + j] * gout[r * n + j];
                        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += Y[r * n + j] * (gout[r * n + j] - dot);
                    }
                });
}

NodeId Tape::rmsnorm(NodeId x, NodeId gain, float eps, const PrecisionFormat& fmt) {
    return push(kernels::rmsnorm_rows(value(x), value(gain), eps, fmt), {x, gain},
                [x, gain, eps](const Tape& t, NodeId, const std::vector<float>& gout, Gradients& grads) {
                    const PTensor& X = t.value(x);
                    const PTensor& G = t.value(gain);
                    const std::size_t n = X.cols();
                    const bool need_x = t.requires_grad(x);
                    const bool need_g = t.requires_grad(gain);
                    for (std::size_t r = 0; r < X.rows(); ++r) {
                        const auto xr = X.row(r);
                        double ms = 0.0;
                        for (float v : xr) ms += static_cast<double>(v) * v;
                        const auto inv = static_cast<float>(1.0 / std::sqrt(ms / static_cast<double>(n) + eps));
                        const float* dy = gout.data() + r * n;
                        if (need_x) {
                            auto& gx = grads.accumulator(x, X.size());
                            float s = 0.0f;
                            for (std::size_t j = 0; j < n; ++j) s += G[j] * dy[j] * xr[j];
                            const float coef = inv * inv * inv * s / static_cast<float>(n);
                            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += inv * G[j] * dy[j] - xr[j] * coef;
                        }
                        if (need_g) {
                            auto& gg = grads.accumulator(gain, G.size());
                            for (std::size_t j = 0; j < n; ++j) gg[j] += dy[j] * xr[j] * inv;
                        }
                    }
                });
}

NodeId Tape::gelu(NodeId x, const PrecisionFormat& fmt) {
    return push(kernels::gelu(value(x), fmt), {x},
                [x](const Tape& t, NodeId, const std::vector<float>& gout, Gradients& grads) {
                    const PTensor& X = t.value(x);
                    auto& gx = grads.accumulator(x, X.size());
                    for (std::size_t i = 0; i < gout.size(); ++i) gx[i] += gout[i] * kernels::gelu_grad_scalar(X[i]);
                });
}

NodeId Tape::embed_lookup(NodeId table, std::span<const int> tokens, const PrecisionFormat& fmt) {
    std::vector<int> ids(tokens.begin(), tokens.end());
    return push(kernels::embed_lookup(value(table), tokens, fmt), {table},
                [table, ids = std::move(ids)](const Tape& t, NodeId, const std::vector<float>& gout, Gradients& grads) {
                    const PTensor& E = t.value(table);
                    const std::size_t d = E.cols();
                    auto& ge = grads.accumulator(table, E.size());
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                        const auto base = static_cast<std::size_t>(ids[i]) * d;
                        for (std::size_t c = 0; c < d; ++c) ge[base + c] += gout[i * d + c];
                    }
                });
}

NodeId Tape::causal_attention(NodeId q, NodeId k, NodeId v, int n_heads, const PrecisionFormat& fmt) {
    auto probs = std::make_shared<std::vector<float>>();
    PTensor out = kernels::causal_attention(value(q), value(k), value(v), n_heads, fmt,
                                            record_ ? probs.get() : nullptr);
    return push(std::move(out), {q, k, v},
                [q, k, v, n_heads, probs](const Tape& t, NodeId, const std::vector<float>& gout, Gradients& grads) {
                    const PTensor& Q = t.value(q);
                    const PTensor& K = t.value(k);
                    const PTensor& V = t.value(v);
                    const std::size_t len = Q.rows(), d = Q.cols();
                    const auto heads = static_cast<std::size_t>(n_heads);
                    const std::size_t dh = d / heads;
                    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
                    std::vector<float> gq(Q.size(), 0.0f), gk(K.size(), 0.0f), gv(V.size(), 0.0f);
                    std::vector<float> dp(len), ds(len);
                    for (std::size_t h = 0; h < heads; ++h) {
                        const std::size_t c0 = h * dh;
                        for (std::size_t i = 0; i < len; ++i) {
                            const float* p = probs->data() + (h * len + i) * len;
                            const float* dO = gout.data() + i * d + c0;
                            float dot = 0.0f;
                            for (std::size_t j = 0; j <= i; ++j) {
                                float s = 0.0f;
                                for (std::size_t c = 0; c < dh; ++c) s += dO[c] * V[j * d + c0 + c];
                                dp[j] = s;
                                dot += p[j] * s;
                                for (std::size_t c = 0; c < dh; ++c) gv[j * d + c0 + c] += p[j] * dO[c];
                            }
                            for (std::size_t j = 0; j <= i; ++j) ds[j] = p[j] * (dp[j] - dot) * scale;
                            for (std::size_t j = 0; j <= i; ++j) {
                                for (std::size_t c = 0; c < dh; ++c) {
                                    gq[i * d + c0 + c] += ds[j] * K[j * d + c0 + c];
                                    gk[j * d + c0 + c] += ds[j] * Q[i * d + c0 + c];
                                }
                            }
                        }
                    }
                    auto flush = [&](NodeId id, const std::vector<float>& g) {
                        if (!t.requires_grad(id)) return;
                        auto& acc = grads.accumulator(id, g.size());
                        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
                    };
                    flush(q, gq);
                    flush(k, gk);
                    flush(v, gv);
                });
}

NodeId Tape::precision_cast(NodeId a, const PrecisionFormat& fmt) {
    return push(apply_precision_rows(value(a), fmt), {a},
                [a](const Tape&, NodeId, const std::vector<float>& gout, Gradients& grads) {
                    auto& ga = grads.accumulator(a, gout.size());
                    for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
                });
}

NodeId Tape::sum(NodeId a) {
    float s = 0.0f;
    for (float x : value(a).data()) s += x;
    return push(PTensor({1}, {s}), {a},
                [a](const Tape& t, NodeId, const std::vector<float>& gout, Gradients& grads) {
                    auto& ga = grads.accumulator(a, t.value(a).size());
                    for (float& g : ga) g += gout[0];
                });
}

NodeId Tape::cross_entropy(NodeId logits, std::span<const int> targets, std::size_t first_row) {
    const auto loss = static_cast<float>(kernels::cross_entropy(value(logits), targets, first_row));
    std::vector<int> ids(targets.begin(), targets.end());
    return push(PTensor({1}, {loss}), {logits},
                [logits, ids = std::move(ids), first_row](const Tape& t, NodeId, const std::vector<float>& gout,
                                                          Gradients& grads) {
                    const PTensor& Z = t.value(logits);
                    const std::size_t n = Z.cols();
                    auto& gz = grads.accumulator(logits, Z.size());
                    for (std::size_t j = 0; j < ids.size(); ++j) {
                        const std::size_t r = first_row + j;
                        const auto z = Z.row(r);
                        const float mx = *std::max_element(z.begin(), z.end());
                        double sum = 0.0;
                        for (float x : z) sum += std::exp(static_cast<double>(x) - mx);
                        for (std::size_t c = 0; c < n; ++c) {
                            double p = std::exp(static_cast<double>(z[c]) - mx) / sum;
                            if (static_cast<int>(c) == ids[j]) p -= 1.0;
                            gz[r * n + c] += gout[0] * static_cast<float>(p);
                        }
                    }
                });
}

Gradients Tape::backward(NodeId loss) const {
    if (value(loss).size() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_to_string(value(loss).shape()));
    }
    Gradients grads(nodes_.size());
    grads.accumulator(loss, 1)[0] = 1.0f;
    for (NodeId id = loss + 1; id-- > 0;) {
        const Node& node = nodes_[id];
        if (!node.backward || !grads.has(id)) continue;
        node.backward(*this, id, grads.of(id), grads);
    }
    return grads;
}

}  // namespace precdiff
