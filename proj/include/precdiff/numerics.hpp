#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace precdiff {

enum class FormatKind : std::uint8_t { fp32, fp16, bf16, int16, int8 };

// Bit layout of a numeric format. Integer formats carry their magnitude bits in
// `fraction_bits` and have a machine epsilon of one quantization step.
struct PrecisionFormat {
    FormatKind kind = FormatKind::fp32;
    int sign_bits = 1;
    int exponent_bits = 8;
    int fraction_bits = 23;
    double machine_epsilon = 0x1p-23;

    static const PrecisionFormat& get(FormatKind kind);
    static const PrecisionFormat& parse(std::string_view name);

    [[nodiscard]] std::string_view name() const;
    [[nodiscard]] bool is_float() const {
        return kind == FormatKind::fp32 || kind == FormatKind::fp16 || kind == FormatKind::bf16;
    }
    [[nodiscard]] bool is_integer() const { return !is_float(); }
    [[nodiscard]] int qmax() const;           // integer formats only
    [[nodiscard]] float max_finite() const;   // float formats only
    [[nodiscard]] int min_normal_exponent() const;

    friend bool operator==(const PrecisionFormat& a, const PrecisionFormat& b) { return a.kind == b.kind; }
};

const std::vector<FormatKind>& all_formats();

struct QuantParams {
    float scale = 1.0f;
    int qmin = -127;
    int qmax = 127;
};

// Nearest value of `fmt` (round-to-nearest-even), returned as a float.
// Overflow saturates to +-max_finite. NaN and infinities pass through.
float round_to_format(float x, const PrecisionFormat& fmt);

QuantParams compute_quant_params(std::span<const float> values, const PrecisionFormat& fmt);

// q = clamp(round_half_away(x / scale), qmin, qmax); returns q * scale.
float fake_quantize(float x, const QuantParams& qp);
void fake_quantize(std::span<float> values, const QuantParams& qp);

// In-place dispatch: float formats round elementwise, integer formats
// quantize the whole span with one per-tensor scale, fp32 is untouched.
void apply_precision_inplace(std::span<float> values, const PrecisionFormat& fmt);

// Same as above with one quantization scale per row of length `row_len`.
// Identical to the per-tensor form for float formats.
void apply_precision_rows_inplace(std::span<float> values, std::size_t row_len, const PrecisionFormat& fmt);

}  // namespace precdiff
