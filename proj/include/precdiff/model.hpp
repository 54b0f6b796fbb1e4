#pragma once

#include "precdiff/autodiff.hpp"
#include "precdiff/numerics.hpp"
#include "precdiff/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace precdiff {

using TokenSequence = std::vector<int>;

TokenSequence concat(const TokenSequence& a, const TokenSequence& b);

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 2;
    int d_ff = 64;
    int max_seq_len = 64;
    std::uint64_t seed = 0;
    // Standard deviation of the seeded normal weight init.
    double init_std = 0.02;

    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerActivation {
    std::string name;
    PTensor output;
};

// Outputs of every leaf module from a single forward pass, in execution order.
struct ActivationTrace {
    std::size_t step_index = 0;
    std::vector<LayerActivation> layers;
};

inline constexpr float kNormEps = 1e-5f;

// Pre-norm RMSNorm decoder with learned absolute positions and a GELU MLP.
// Weights are held already rounded to the model's format.
class TransformerModel {
public:
    TransformerModel(ModelConfig cfg, std::map<std::string, PTensor> weights, const PrecisionFormat& fmt);

    // Seeded N(0, init_std) weights (norm gains 1), drawn in a fixed order that
    // does not depend on `fmt`.
    static TransformerModel build(const ModelConfig& cfg, const PrecisionFormat& fmt);

    [[nodiscard]] const ModelConfig& config() const { return cfg_; }
    [[nodiscard]] const PrecisionFormat& fmt() const { return *fmt_; }
    [[nodiscard]] const std::vector<std::string>& layer_order() const { return layer_order_; }
    [[nodiscard]] const std::map<std::string, PTensor>& weights() const { return weights_; }
    [[nodiscard]] const PTensor& weight(const std::string& name) const;
    // FNV-1a over the weights as supplied, before rounding to `fmt`.
    [[nodiscard]] std::uint64_t source_checksum() const { return source_checksum_; }

    // Replace a weight; the value is rounded to the model format.
    void set_weight(const std::string& name, const PTensor& raw);

    struct Forward {
        NodeId token_embeddings;  // [len x d_model] rows of the token table
        NodeId logits;            // [len x vocab]
    };

    // Records one forward pass on `tape`. The token embedding rows become a
    // leaf that requires grad when `embedding_grad` is set.
    Forward forward(Tape& tape, std::span<const int> tokens, bool embedding_grad = false,
                    ActivationTrace* trace = nullptr) const;

    static std::vector<std::string> make_layer_order(int n_layers);
    static std::vector<std::string> weight_names(int n_layers);

private:
    void check_weights() const;

    ModelConfig cfg_;
    const PrecisionFormat* fmt_;
    std::map<std::string, PTensor> weights_;
    std::vector<std::string> layer_order_;
    std::uint64_t source_checksum_ = 0;
};

struct DecodeMode {
    enum class Kind { greedy, sample };
    Kind kind = Kind::greedy;
    std::uint64_t seed = 0;
    double temperature = 1.0;

    static DecodeMode greedy() { return {}; }
    static DecodeMode sample(std::uint64_t seed, double temperature) { return {Kind::sample, seed, temperature}; }
};

// Next-token logits at the last position.
std::vector<float> forward_logits(const TransformerModel& m, const TokenSequence& x, ActivationTrace* trace = nullptr);

// Index of the largest value, lowest index on ties.
int argmax(std::span<const float> values);

// Returns only the newly generated tokens.
TokenSequence greedy_decode(const TransformerModel& m, const TokenSequence& x, int n_new,
                            const DecodeMode& mode = DecodeMode::greedy());

inline constexpr const char* kCheckpointSchema = "precdiff-ckpt/1";

void save_checkpoint(const TransformerModel& m, const std::filesystem::path& path);
std::string checkpoint_to_string(const TransformerModel& m);
TransformerModel load_checkpoint(const std::filesystem::path& path, const PrecisionFormat& fmt);
TransformerModel checkpoint_from_string(const std::string& text, const PrecisionFormat& fmt);

}  // namespace precdiff
