#include "precdiff/errors.hpp"
#include "precdiff/numerics.hpp"
#include "precdiff/rng.hpp"
#include "precdiff/tensor.hpp"
#include "reference/softfloat_ref.hpp"

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <limits>

using namespace precdiff;

namespace {

const PrecisionFormat& F(FormatKind k) { return PrecisionFormat::get(k); }

float random_finite(Rng& rng) {
    for (;;) {
        const float f = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()));
        if (std::isfinite(f)) return f;
    }
}

// Random value with exponent uniform over the normal range of `fmt`.
float random_in_range(Rng& rng, const PrecisionFormat& fmt) {
    const int lo = fmt.min_normal_exponent();
    const int hi = (1 << (fmt.exponent_bits - 1)) - 1;
    const int e = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo)));
    const double m = 1.0 + rng.uniform();
    const float v = static_cast<float>(std::ldexp(m, e));
    return rng.below(2) ? -v : v;
}

}  // namespace

TEST(PrecisionFormat, TableLayouts) {
    struct Row {
        FormatKind kind;
        int s, e, f;
    };
    for (const Row& r : {Row{FormatKind::fp32, 1, 8, 23}, Row{FormatKind::fp16, 1, 5, 10},
                         Row{FormatKind::bf16, 1, 8, 7}, Row{FormatKind::int16, 1, 0, 15},
                         Row{FormatKind::int8, 1, 0, 7}}) {
        const auto& fmt = F(r.kind);
        EXPECT_EQ(fmt.sign_bits, r.s);
        EXPECT_EQ(fmt.exponent_bits, r.e);
        EXPECT_EQ(fmt.fraction_bits, r.f);
    }
    EXPECT_NEAR(F(FormatKind::fp16).machine_epsilon, 9.77e-4, 1e-6);
    EXPECT_NEAR(F(FormatKind::bf16).machine_epsilon, 7.81e-3, 1e-5);
    EXPECT_EQ(F(FormatKind::int8).machine_epsilon, 1.0);
    EXPECT_EQ(F(FormatKind::int16).machine_epsilon, 1.0);
    EXPECT_EQ(F(FormatKind::int8).qmax(), 127);
    EXPECT_EQ(F(FormatKind::int16).qmax(), 32767);
    EXPECT_EQ(F(FormatKind::fp16).max_finite(), 65504.0f);
}

TEST(PrecisionFormat, NamesRoundTrip) {
    for (auto k : all_formats()) EXPECT_EQ(PrecisionFormat::parse(F(k).name()).kind, k);
    EXPECT_THROW(PrecisionFormat::parse("fp8"), ValidationError);
}

TEST(RoundToFormat, WorkedExamples) {
    EXPECT_EQ(round_to_format(1.0f, F(FormatKind::bf16)), 1.0f);
    const float bf = round_to_format(0.1f, F(FormatKind::bf16));
    EXPECT_EQ(bf, ref::bf16_round(0.1f));
    EXPECT_FLOAT_EQ(bf, 0.10009765625f);
    const float h = round_to_format(3.14159265f, F(FormatKind::fp16));
    EXPECT_EQ(h, ref::fp16_round(3.14159265f));
    EXPECT_EQ(h, 3.140625f);
}

TEST(RoundToFormat, Fp32IsIdentity) {
    Rng rng(1);
    for (int i = 0; i < 10000; ++i) {
        const float x = random_finite(rng);
        EXPECT_EQ(std::bit_cast<std::uint32_t>(round_to_format(x, F(FormatKind::fp32))), std::bit_cast<std::uint32_t>(x));
    }
}

TEST(RoundToFormat, OverflowSaturatesAndSpecialsPassThrough) {
    const auto& h = F(FormatKind::fp16);
    EXPECT_EQ(round_to_format(1e6f, h), 65504.0f);
    EXPECT_EQ(round_to_format(-70000.0f, h), -65504.0f);
    EXPECT_EQ(round_to_format(65519.0f, h), 65504.0f);
    EXPECT_EQ(round_to_format(std::numeric_limits<float>::max(), F(FormatKind::bf16)),
              F(FormatKind::bf16).max_finite());
    EXPECT_TRUE(std::isnan(round_to_format(std::nanf(""), h)));
    EXPECT_EQ(round_to_format(std::numeric_limits<float>::infinity(), h), std::numeric_limits<float>::infinity());
    // smallest fp16 subnormal and the tie below it
    EXPECT_EQ(round_to_format(0x1p-24f, h), 0x1p-24f);
    EXPECT_EQ(round_to_format(0x1p-25f, h), 0.0f);
    EXPECT_EQ(round_to_format(0x1.8p-25f, h), 0x1p-24f);
}

TEST(RoundToFormat, MatchesBitReferenceOnRandomPatterns) {
    Rng rng(2);
    for (int i = 0; i < 200000; ++i) {
        const float x = random_finite(rng);
        ASSERT_EQ(std::bit_cast<std::uint32_t>(round_to_format(x, F(FormatKind::bf16))),
                  std::bit_cast<std::uint32_t>(ref::bf16_round(x)))
            << x;
        ASSERT_EQ(std::bit_cast<std::uint32_t>(round_to_format(x, F(FormatKind::fp16))),
                  std::bit_cast<std::uint32_t>(ref::fp16_round(x)))
            << x;
    }
}

TEST(RoundToFormat, EpsilonBoundAndMonotone) {
    Rng rng(3);
    for (auto k : {FormatKind::fp16, FormatKind::bf16}) {
        const auto& fmt = F(k);
        float prev_x = -std::numeric_limits<float>::infinity();
        float prev_r = prev_x;
        for (int i = 0; i < 100000; ++i) {
            const float x = random_in_range(rng, fmt);
            const float r = round_to_format(x, fmt);
            ASSERT_LE(std::fabs(static_cast<double>(r) - x), fmt.machine_epsilon * std::fabs(x)) << x;
            ASSERT_EQ(round_to_format(r, fmt), r);  // idempotent
            const float y = std::nextafter(x, std::numeric_limits<float>::infinity());
            ASSERT_LE(r, round_to_format(y, fmt));
            if (prev_x <= x) {
                ASSERT_LE(prev_r, r);
            }
            prev_x = x;
            prev_r = r;
        }
    }
}

TEST(QuantParams, WorkedExamples) {
    const float t1[] = {-1.0f, 0.5f, 1.0f};
    EXPECT_FLOAT_EQ(compute_quant_params(t1, F(FormatKind::int8)).scale, 1.0f / 127.0f);
    const float zeros[] = {0.0f, 0.0f, 0.0f};
    EXPECT_EQ(compute_quant_params(zeros, F(FormatKind::int8)).scale, 1.0f);
    const float t3[] = {-2.0f};
    const auto qp = compute_quant_params(t3, F(FormatKind::int16));
    EXPECT_FLOAT_EQ(qp.scale, 2.0f / 32767.0f);
    EXPECT_EQ(qp.qmin, -32767);
    EXPECT_EQ(qp.qmax, 32767);
    EXPECT_THROW(compute_quant_params(std::span<const float>{}, F(FormatKind::int8)), ShapeError);
    try {
        compute_quant_params(std::span<const float>{}, F(FormatKind::int8));
    } catch (const Error& e) {
        EXPECT_STREQ(e.what(), "empty tensor has no quantization range");
    }
}

TEST(FakeQuantize, WorkedExamples) {
    const auto& i8 = F(FormatKind::int8);
    std::vector<float> t{-1.0f, 0.5f, 1.0f};
    const auto qp = compute_quant_params(t, i8);
    fake_quantize(t, qp);
    EXPECT_FLOAT_EQ(t[0], -1.0f);
    EXPECT_NEAR(t[1], 64.0 / 127.0, 1e-7);
    EXPECT_FLOAT_EQ(t[2], 1.0f);
    // beyond the range: 2.0 / (1/127) = 254 clamps to 127
    EXPECT_FLOAT_EQ(fake_quantize(2.0f, qp), 1.0f);
    EXPECT_FLOAT_EQ(fake_quantize(-2.0f, qp), -1.0f);
    std::vector<float> z(4, 0.0f);
    apply_precision_inplace(z, i8);
    for (float v : z) EXPECT_EQ(v, 0.0f);
}

TEST(FakeQuantize, IdempotentAndOddSymmetric) {
    Rng rng(4);
    for (auto k : {FormatKind::int8, FormatKind::int16}) {
        for (int trial = 0; trial < 2000; ++trial) {
            const std::size_t n = 1 + rng.below(40);
            std::vector<float> t(n);
            const double mag = std::ldexp(1.0, static_cast<int>(rng.below(40)) - 20);
            for (float& v : t) v = static_cast<float>(mag * (2.0 * rng.uniform() - 1.0));
            std::vector<float> neg(n);
            for (std::size_t i = 0; i < n; ++i) neg[i] = -t[i];

            std::vector<float> once = t;
            apply_precision_inplace(once, F(k));
            std::vector<float> twice = once;
            apply_precision_inplace(twice, F(k));
            ASSERT_EQ(once, twice);

            const auto qp = compute_quant_params(t, F(k));
            std::vector<float> again = once;
            fake_quantize(again, qp);
            ASSERT_EQ(again, once);

            apply_precision_inplace(neg, F(k));
            for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(neg[i], -once[i]);
        }
    }
}

TEST(ApplyPrecision, Dispatch) {
    Rng rng(5);
    std::vector<float> raw(64);
    for (float& v : raw) v = static_cast<float>(rng.normal());
    const PTensor t({8, 8}, raw);
    const PTensor same = apply_precision(t, F(FormatKind::fp32));
    EXPECT_TRUE(bit_equal(same, t));
    const PTensor bf = apply_precision(t, F(FormatKind::bf16));
    EXPECT_EQ(bf.fmt().kind, FormatKind::bf16);
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(bf[i], round_to_format(t[i], F(FormatKind::bf16)));

    const PTensor small({3}, {-1.0f, 0.5f, 1.0f});
    const PTensor q = apply_precision(small, F(FormatKind::int8));
    EXPECT_FLOAT_EQ(q[0], -1.0f);
    EXPECT_NEAR(q[1], 0.503937, 1e-6);
    EXPECT_FLOAT_EQ(q[2], 1.0f);
}

TEST(ApplyPrecision, RowsQuantizeIndependently) {
    const PTensor t({2, 2}, {1.0f, 0.5f, 100.0f, 0.5f});
    const PTensor per_row = apply_precision_rows(t, F(FormatKind::int8));
    const PTensor per_tensor = apply_precision(t, F(FormatKind::int8));
    EXPECT_NEAR(per_row[1], 64.0 / 127.0, 1e-7);
    EXPECT_NE(per_row[1], per_tensor[1]);
}
