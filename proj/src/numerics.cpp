#include "precdiff/numerics.hpp"

#include "precdiff/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace precdiff {

namespace {

constexpr std::array<PrecisionFormat, 5> kFormats{{
    {FormatKind::fp32, 1, 8, 23, 0x1p-23},
    {FormatKind::fp16, 1, 5, 10, 0x1p-10},
    {FormatKind::bf16, 1, 8, 7, 0x1p-7},
    {FormatKind::int16, 1, 0, 15, 1.0},
    {FormatKind::int8, 1, 0, 7, 1.0},
}};

constexpr std::array<std::string_view, 5> kNames{"fp32", "fp16", "bf16", "int16", "int8"};

// Round-half-to-even of a non-negative double. Exact for every input we feed it
// (scaled mantissas below 2^25).
double round_half_even(double y) {
    const double lo = std::floor(y);
    const double frac = y - lo;
    if (frac > 0.5) return lo + 1.0;
    if (frac < 0.5) return lo;
    return std::fmod(lo, 2.0) == 0.0 ? lo : lo + 1.0;
}

}  // namespace

const PrecisionFormat& PrecisionFormat::get(FormatKind kind) {
    return kFormats[static_cast<std::size_t>(kind)];
}

const PrecisionFormat& PrecisionFormat::parse(std::string_view name) {
    for (std::size_t i = 0; i < kNames.size(); ++i) {
        if (kNames[i] == name) return kFormats[i];
    }
    throw ValidationError("", "unknown precision format \"" + std::string(name) +
                                  "\" (expected fp32, fp16, bf16, int16 or int8)");
}

std::string_view PrecisionFormat::name() const { return kNames[static_cast<std::size_t>(kind)]; }

int PrecisionFormat::qmax() const { return (1 << fraction_bits) - 1; }

int PrecisionFormat::min_normal_exponent() const { return 2 - (1 << (exponent_bits - 1)); }

float PrecisionFormat::max_finite() const {
    const int max_exp = (1 << (exponent_bits - 1)) - 1;
    return static_cast<float>(std::ldexp(2.0 - std::ldexp(1.0, -fraction_bits), max_exp));
}

const std::vector<FormatKind>& all_formats() {
    static const std::vector<FormatKind> formats{FormatKind::fp32, FormatKind::fp16, FormatKind::bf16,
                                                 FormatKind::int16, FormatKind::int8};
    return formats;
}

float round_to_format(float x, const PrecisionFormat& fmt) {
    if (fmt.kind == FormatKind::fp32 || !std::isfinite(x) || x == 0.0f) return x;
    if (!fmt.is_float()) throw Error("round_to_format: integer format " + std::string(fmt.name()));

    const double a = std::fabs(static_cast<double>(x));
    int e = 0;
    std::frexp(a, &e);
    const int lead = std::max(e - 1, fmt.min_normal_exponent());
    const int quantum_exp = lead - fmt.fraction_bits;
    double v = std::ldexp(round_half_even(std::ldexp(a, -quantum_exp)), quantum_exp);
    v = std::min(v, static_cast<double>(fmt.max_finite()));
    return std::copysign(static_cast<float>(v), x);
}

QuantParams compute_quant_params(std::span<const float> values, const PrecisionFormat& fmt) {
    if (!fmt.is_integer()) throw Error("compute_quant_params: not an integer format");
    if (values.empty()) throw ShapeError("empty tensor has no quantization range");
    float amax = 0.0f;
    for (float v : values) amax = std::max(amax, std::fabs(v));

    QuantParams qp;
    qp.qmax = fmt.qmax();
    qp.qmin = -qp.qmax;
    if (amax == 0.0f) return qp;

    const auto q = static_cast<float>(qp.qmax);
    // The scale is pinned to a fixed point of s -> (q*s)/q so that requantizing a
    // dequantized tensor reproduces the same scale bit-for-bit.
    float s = amax / q;
    for (int i = 0; i < 8; ++i) {
        const float next = (q * s) / q;
        if (next == s) break;
        s = next;
    }
    qp.scale = s;
    return qp;
}

float fake_quantize(float x, const QuantParams& qp) {
    if (std::isnan(x)) return x;
    // Half-away rounding done in double, where y + 0.5 is exact for any float y
    // in the clamped range; avoids a libm roundf call per element.
    const double y = std::clamp(static_cast<double>(x / qp.scale), qp.qmin - 1.0, qp.qmax + 1.0);
    const auto r = static_cast<long>(y + std::copysign(0.5, y));
    const auto q = std::clamp(r, static_cast<long>(qp.qmin), static_cast<long>(qp.qmax));
    return static_cast<float>(q) * qp.scale;
}

void fake_quantize(std::span<float> values, const QuantParams& qp) {
    for (float& v : values) v = fake_quantize(v, qp);
}

void apply_precision_inplace(std::span<float> values, const PrecisionFormat& fmt) {
    if (fmt.kind == FormatKind::fp32 || values.empty()) return;
    if (fmt.is_float()) {
        for (float& v : values) v = round_to_format(v, fmt);
        return;
    }
    fake_quantize(values, compute_quant_params(values, fmt));
}

void apply_precision_rows_inplace(std::span<float> values, std::size_t row_len, const PrecisionFormat& fmt) {
    if (fmt.is_float() || row_len == 0) {
        apply_precision_inplace(values, fmt);
        return;
    }
    if (values.size() % row_len != 0) throw ShapeError("apply_precision_rows: length not a multiple of the row");
    for (std::size_t off = 0; off < values.size(); off += row_len) {
        apply_precision_inplace(values.subspan(off, row_len), fmt);
    }
}

}  // namespace precdiff
