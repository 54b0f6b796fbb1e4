#include "precdiff/tensor.hpp"

#include "precdiff/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

namespace precdiff {

std::string shape_to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

PTensor::PTensor(Shape shape, const PrecisionFormat& fmt)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0f), fmt_(&fmt) {}

PTensor::PTensor(Shape shape, std::vector<float> data, const PrecisionFormat& fmt)
    : shape_(std::move(shape)), data_(std::move(data)), fmt_(&fmt) {
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_to_string(shape_));
    }
}

std::size_t PTensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

std::size_t PTensor::rows() const {
    const std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
}

std::span<const float> PTensor::row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * cols(), cols());
}

bool bit_equal(const PTensor& a, const PTensor& b) {
    return a.shape_ == b.shape_ && a.fmt_->kind == b.fmt_->kind &&
           (a.data_.empty() || std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0);
}

PTensor apply_precision(const PTensor& t, const PrecisionFormat& fmt) {
    PTensor out = t;
    apply_precision_inplace(out.mutable_data(), fmt);
    out.retag(fmt);
    return out;
}

PTensor apply_precision_rows(const PTensor& t, const PrecisionFormat& fmt) {
    PTensor out = t;
    apply_precision_rows_inplace(out.mutable_data(), t.cols(), fmt);
    out.retag(fmt);
    return out;
}

namespace kernels {

namespace {

void require_rank2(const PTensor& t, const char* op, const char* name) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": operand " + name + " must be rank 2, got " + shape_to_string(t.shape()));
    }
}

PTensor finish(PTensor out, const PrecisionFormat& fmt) {
    apply_precision_rows_inplace(out.mutable_data(), out.cols(), fmt);
    out.retag(fmt);
    return out;
}

}  // namespace

PTensor matmul(const PTensor& a, const PTensor& b, const PrecisionFormat& out_fmt) {
    require_rank2(a, "matmul", "a");
    require_rank2(b, "matmul", "b");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
    }
    PTensor out({m, n});
    auto c = out.mutable_data();
    const auto* ap = a.data().data();
    const auto* bp = b.data().data();
    // i-p-j order: every c[i][j] is summed over p strictly left to right.
    for (std::size_t i = 0; i < m; ++i) {
        float* crow = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const float aip = ap[i * k + p];
            const float* brow = bp + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return finish(std::move(out), out_fmt);
}

PTensor add(const PTensor& a, const PTensor& b, const PrecisionFormat& out_fmt) {
    PTensor out = a;
    auto o = out.mutable_data();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += b[i];
    } else if (b.rank() == 1 && a.rank() == 2 && b.size() == a.cols()) {
        const std::size_t n = a.cols();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += b[i % n];
    } else {
        throw ShapeError("add: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
    }
    return finish(std::move(out), out_fmt);
}

PTensor mul(const PTensor& a, const PTensor& b, const PrecisionFormat& out_fmt) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
    }
    PTensor out = a;
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= b[i];
    return finish(std::move(out), out_fmt);
}

PTensor softmax_rows(const PTensor& a, const PrecisionFormat& out_fmt) {
    PTensor out(a.shape());
    auto o = out.mutable_data();
    const std::size_t n = a.cols();
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const auto x = a.row(r);
        const float mx = *std::max_element(x.begin(), x.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(static_cast<double>(x[j]) - mx);
        for (std::size_t j = 0; j < n; ++j) {
            o[r * n + j] = static_cast<float>(std::exp(static_cast<double>(x[j]) - mx) / sum);
        }
    }
    return finish(std::move(out), out_fmt);
}

PTensor rmsnorm_rows(const PTensor& x, const PTensor& gain, float eps, const PrecisionFormat& out_fmt) {
    const std::size_t n = x.cols();
    if (gain.size() != n) {
        throw ShapeError("rmsnorm: gain " + shape_to_string(gain.shape()) + " does not match input " +
                         shape_to_string(x.shape()));
    }
    PTensor out(x.shape());
    auto o = out.mutable_data();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto xr = x.row(r);
        double ms = 0.0;
        for (float v : xr) ms += static_cast<double>(v) * v;
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(n) + eps);
        for (std::size_t j = 0; j < n; ++j) o[r * n + j] = static_cast<float>(xr[j] * inv * gain[j]);
    }
    return finish(std::move(out), out_fmt);
}

float gelu_scalar(float x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    const double xd = x;
    return static_cast<float>(0.5 * xd * (1.0 + std::tanh(c * (xd + 0.044715 * xd * xd * xd))));
}

float gelu_grad_scalar(float x) {
    constexpr double c = 0.7978845608028654;
    const double xd = x;
    const double u = c * (xd + 0.044715 * xd * xd * xd);
    const double th = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * xd * xd);
    return static_cast<float>(0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du);
}

PTensor gelu(const PTensor& x, const PrecisionFormat& out_fmt) {
    PTensor out = x;
    for (float& v : out.mutable_data()) v = gelu_scalar(v);
    return finish(std::move(out), out_fmt);
}

PTensor embed_lookup(const PTensor& table, std::span<const int> tokens, const PrecisionFormat& out_fmt) {
    require_rank2(table, "embed_lookup", "table");
    const std::size_t d = table.cols();
    PTensor out({tokens.size(), d});
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int t = tokens[i];
        if (t < 0 || static_cast<std::size_t>(t) >= table.rows()) {
            throw ShapeError("embed_lookup: token id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(table.rows()));
        }
        const auto src = table.row(static_cast<std::size_t>(t));
        std::copy(src.begin(), src.end(), o.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return finish(std::move(out), out_fmt);
}

PTensor causal_attention(const PTensor& q, const PTensor& k, const PTensor& v, int n_heads,
                         const PrecisionFormat& out_fmt, std::vector<float>* probs) {
    require_rank2(q, "attention", "q");
    if (q.shape() != k.shape() || q.shape() != v.shape()) {
        throw ShapeError("attention: q/k/v shapes differ: " + shape_to_string(q.shape()) + ", " +
                         shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()));
    }
    const std::size_t len = q.rows(), d = q.cols();
    const auto heads = static_cast<std::size_t>(n_heads);
    if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by head count");
    const std::size_t dh = d / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    if (probs) probs->assign(heads * len * len, 0.0f);
    PTensor out({len, d});
    auto o = out.mutable_data();
    std::vector<float> row(len);
    const float* qp = q.data().data();
    const float* kp = k.data().data();
    const float* vp = v.data().data();
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < len; ++i) {
            const std::size_t n = i + 1;
            for (std::size_t j = 0; j < n; ++j) {
                float s = 0.0f;
                const float* qi = qp + i * d + c0;
                const float* kj = kp + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                row[j] = s * scale;
            }
            std::span<float> scores(row.data(), n);
            apply_precision_inplace(scores, out_fmt);

            const float mx = *std::max_element(scores.begin(), scores.end());
            double sum = 0.0;
            for (float s : scores) sum += std::exp(static_cast<double>(s) - mx);
            for (float& s : scores) s = static_cast<float>(std::exp(static_cast<double>(s) - mx) / sum);
            apply_precision_inplace(scores, out_fmt);

            if (probs) std::copy(scores.begin(), scores.end(), probs->begin() + static_cast<std::ptrdiff_t>((h * len + i) * len));
            float* orow = o.data() + i * d + c0;
            for (std::size_t j = 0; j < n; ++j) {
                const float p = scores[j];
                const float* vj = vp + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vj[c];
            }
        }
    }
    return finish(std::move(out), out_fmt);
}

double cross_entropy(const PTensor& logits, std::span<const int> targets, std::size_t first_row) {
    if (first_row + targets.size() > logits.rows()) throw ShapeError("cross_entropy: target rows out of range");
    double total = 0.0;
    for (std::size_t j = 0; j < targets.size(); ++j) {
        const auto z = logits.row(first_row + j);
        const int t = targets[j];
        if (t < 0 || static_cast<std::size_t>(t) >= z.size()) throw ShapeError("cross_entropy: target id out of range");
        const float mx = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (float x : z) sum += std::exp(static_cast<double>(x) - mx);
        total += std::log(sum) - (static_cast<double>(z[static_cast<std::size_t>(t)]) - mx);
    }
    return total;
}

}  // namespace kernels

}  // namespace precdiff
