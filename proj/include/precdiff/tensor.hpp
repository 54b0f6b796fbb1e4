#pragma once

#include "precdiff/numerics.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace precdiff {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major float tensor tagged with the format its values conform to.
class PTensor {
public:
    PTensor() = default;
    explicit PTensor(Shape shape, const PrecisionFormat& fmt = PrecisionFormat::get(FormatKind::fp32));
    PTensor(Shape shape, std::vector<float> data, const PrecisionFormat& fmt = PrecisionFormat::get(FormatKind::fp32));

    [[nodiscard]] const Shape& shape() const { return shape_; }
    [[nodiscard]] std::size_t rank() const { return shape_.size(); }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] std::size_t rows() const;
    [[nodiscard]] std::size_t cols() const;
    [[nodiscard]] const PrecisionFormat& fmt() const { return *fmt_; }

    [[nodiscard]] std::span<const float> data() const { return data_; }
    [[nodiscard]] std::span<float> mutable_data() { return data_; }
    [[nodiscard]] std::span<const float> row(std::size_t r) const;
    [[nodiscard]] float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    [[nodiscard]] float operator[](std::size_t i) const { return data_[i]; }

    void retag(const PrecisionFormat& fmt) { fmt_ = &fmt; }

    friend bool bit_equal(const PTensor& a, const PTensor& b);

private:
    Shape shape_;
    std::vector<float> data_;
    const PrecisionFormat* fmt_ = &PrecisionFormat::get(FormatKind::fp32);
};

// Per-tensor conversion: the whole tensor shares one quantization scale.
PTensor apply_precision(const PTensor& t, const PrecisionFormat& fmt);
// Each row (last dimension) quantized as its own tensor. Equivalent to
// apply_precision for float formats.
PTensor apply_precision_rows(const PTensor& t, const PrecisionFormat& fmt);

// Precision-dispatched forward kernels. Rank-2 operands are [rows x cols];
// every output is rounded to `out_fmt` row by row.
namespace kernels {

PTensor matmul(const PTensor& a, const PTensor& b, const PrecisionFormat& out_fmt);
PTensor add(const PTensor& a, const PTensor& b, const PrecisionFormat& out_fmt);
PTensor mul(const PTensor& a, const PTensor& b, const PrecisionFormat& out_fmt);
PTensor softmax_rows(const PTensor& a, const PrecisionFormat& out_fmt);
PTensor rmsnorm_rows(const PTensor& x, const PTensor& gain, float eps, const PrecisionFormat& out_fmt);
PTensor gelu(const PTensor& x, const PrecisionFormat& out_fmt);
PTensor embed_lookup(const PTensor& table, std::span<const int> tokens, const PrecisionFormat& out_fmt);

// Multi-head causal self-attention core: softmax(q k^T / sqrt(d_head)) v per head,
// heads concatenated along columns. Scores, probabilities and output are each
// rounded to out_fmt. When `probs` is non-null it receives the rounded
// probabilities laid out [head][query][key] (zeros above the diagonal).
PTensor causal_attention(const PTensor& q, const PTensor& k, const PTensor& v, int n_heads,
                         const PrecisionFormat& out_fmt, std::vector<float>* probs = nullptr);

float gelu_scalar(float x);
float gelu_grad_scalar(float x);

// Sum over `targets` of -log softmax(logits row first_row + j)[targets[j]], in double.
double cross_entropy(const PTensor& logits, std::span<const int> targets, std::size_t first_row);

}  // namespace kernels

}  // namespace precdiff
