#include "precdiff/analysis.hpp"
#include "precdiff/errors.hpp"
#include "precdiff/rng.hpp"
#include "reference/lift_ref.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace precdiff;

namespace {

TransformerModel build(FormatKind k, std::uint64_t seed = 0) {
    ModelConfig c;
    c.seed = seed;
    c.init_std = 0.3;
    return TransformerModel::build(c, PrecisionFormat::get(k));
}

std::vector<double> random_series(Rng& rng, std::size_t n, double lo) {
    std::vector<double> s(n);
    for (double& v : s) {
        // Log-uniform over six decades plus occasional repeats.
        v = lo * std::pow(10.0, 6.0 * rng.uniform());
        if (rng.below(5) == 0 && &v != &s[0]) v = *(&v - 1);
    }
    return s;
}

}  // namespace

TEST(Mad, WorkedExamples) {
    const PTensor a({2}, {1, 2}), b({2}, {1.5f, 2.5f});
    EXPECT_DOUBLE_EQ(mad(a, b), 0.5);
    EXPECT_DOUBLE_EQ(mad(b, a), 0.5);
    EXPECT_EQ(mad(a, a), 0.0);
    EXPECT_THROW((void)mad(a, PTensor({1, 2}, {1, 2})), ShapeError);
}

TEST(Mad, NonNegativeAndTriangle) {
    Rng rng(8);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.below(40);
        std::vector<float> a(n), b(n), c(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = static_cast<float>(rng.normal());
            b[i] = static_cast<float>(rng.normal());
            c[i] = static_cast<float>(rng.normal());
        }
        const double ab = mad(a, b), bc = mad(b, c), ac = mad(a, c);
        EXPECT_GE(ab, 0.0);
        EXPECT_EQ(ab, mad(b, a));
        EXPECT_LE(ac, ab + bc + 1e-12);
    }
}

TEST(RelativeLift, WorkedExamples) {
    const auto rl = relative_lift({1, 2, 1.5, 4}, 0.0);
    const std::vector<double> want{0, 1.0, -0.25, 1.0};
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(rl[i], want[i], 1e-9);
    const auto rl_eps = relative_lift({1, 2, 1.5, 4});
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(rl_eps[i], want[i], 1e-9);
    for (double v : relative_lift({3, 3, 3, 3, 3})) EXPECT_EQ(v, 0.0);
    const auto dbl = relative_lift({0.125, 0.25, 0.5, 1, 2, 4}, 0.0);
    EXPECT_EQ(dbl[0], 0.0);
    for (std::size_t i = 1; i < dbl.size(); ++i) EXPECT_EQ(dbl[i], 1.0);
}

TEST(RelativeLift, RejectsBadSeries) {
    EXPECT_THROW((void)relative_lift({}), Error);
    EXPECT_THROW((void)relative_lift({1, -0.5}), Error);
    EXPECT_THROW((void)relative_lift({1, NAN}), Error);
}

TEST(CriticalLayers, WorkedExamples) {
    EXPECT_NEAR(percentile_linear({0, 0, 0, 1}, 95), 0.85, 1e-15);
    EXPECT_EQ(critical_layers({0, 0, 0, 1}), (std::vector<std::size_t>{3}));
    EXPECT_TRUE(critical_layers({0.4, 0.4, 0.4}).empty());
    EXPECT_TRUE(critical_layers({7}).empty());
    EXPECT_THROW((void)critical_layers({}), Error);
}

TEST(CriticalLayers, SparseUnderLinearPercentile) {
    Rng rng(12);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(30);
        const auto c = critical_layers(relative_lift(random_series(rng, n, 1e-6)));
        EXPECT_LE(c.size(), static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(n))) + 1);
    }
}

TEST(CriticalLayers, MatchesBruteForce) {
    Rng rng(13);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto mu = random_series(rng, 1 + rng.below(12), 1e-6);
        const auto rl = relative_lift(mu);
        const auto rl_ref = ref::lift(mu, kLiftEpsilon);
        ASSERT_EQ(rl, rl_ref);
        EXPECT_EQ(critical_layers(rl), ref::critical(rl_ref, 95.0));
        EXPECT_EQ(percentile_linear(rl, 95.0), ref::percentile(rl_ref, 95.0));
    }
}

TEST(RelativeLift, ScaleInvariant) {
    Rng rng(14);
    for (int trial = 0; trial < 300; ++trial) {
        const auto mu = random_series(rng, 2 + rng.below(11), 1e-6);
        const double c = std::pow(10.0, 3.0 * rng.uniform());
        std::vector<double> scaled(mu);
        for (double& v : scaled) v *= c;
        const auto a = relative_lift(mu), b = relative_lift(scaled);
        // The epsilon term perturbs each lift by a relative 1e-12 / 1e-6, so
        // agreement is measured relative to the lift's magnitude.
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6 * std::max(1.0, std::fabs(a[i])));
        // Criticality is a comparison against an interpolated threshold, so
        // only layers clear of the threshold by the tolerance must agree.
        const double ta = percentile_linear(a, 95), tb = percentile_linear(b, 95);
        for (std::size_t i = 1; i < a.size(); ++i) {
            if (std::fabs(a[i] - ta) > 1e-5 * std::max(1.0, std::fabs(ta))) {
                EXPECT_EQ(a[i] > ta, b[i] > tb);
            }
        }
    }
}

TEST(LayerReport, FieldsAreConsistent) {
    const auto r = layer_report({"a", "b", "c", "d"}, {1, 2, 1.5, 4});
    EXPECT_EQ(r.rl.size(), 4u);
    EXPECT_EQ(r.critical, critical_layers(r.rl));
    EXPECT_EQ(r.percentile_threshold, percentile_linear(r.rl, 95));
    EXPECT_THROW((void)layer_report({"a"}, {1, 2}), ShapeError);
}

TEST(LayerReport, CsvLayout) {
    const auto csv = layer_report_csv(layer_report({"embed", "out"}, {0.5, 1.5}));
    const std::string rl1 = format_double(1.0 / (0.5 + kLiftEpsilon));
    EXPECT_EQ(csv, "layer_index,layer_name,mad,rl,is_critical\n0,embed,0.5,0,0\n1,out,1.5," + rl1 + ",1\n");
}

TEST(LayerReport, PooledMeanOfSeries) {
    const auto a = layer_report({"x", "y"}, {1, 3});
    const auto b = layer_report({"x", "y"}, {3, 5});
    const auto p = pooled_report({a, b});
    EXPECT_EQ(p.mad, (std::vector<double>{2, 4}));
    EXPECT_THROW((void)pooled_report({a, layer_report({"x", "z"}, {1, 1})}), Error);
    EXPECT_THROW((void)pooled_report({}), Error);
}

TEST(Traces, SameFormatIsExactlyZero) {
    for (FormatKind k : all_formats()) {
        const TransformerModel m = build(k);
        const auto r = layer_report(capture_first_token_traces(m, m, {1, 2, 3, 4, 5}));
        EXPECT_EQ(r.mad.size(), m.layer_order().size());
        for (double v : r.mad) EXPECT_EQ(v, 0.0);
        EXPECT_TRUE(r.critical.empty());
    }
}

TEST(Traces, Fp32VersusInt8Diverges) {
    const auto r = layer_report(capture_first_token_traces(build(FormatKind::fp32), build(FormatKind::int8), {1, 2, 3, 4, 5}));
    double peak = 0.0;
    for (double v : r.mad) peak = std::max(peak, v);
    EXPECT_GT(peak, 0.0);
}

TEST(Traces, DifferentArchitecturesAreRejected) {
    ModelConfig c;
    c.n_layers = 1;
    const TransformerModel small = TransformerModel::build(c, PrecisionFormat::get(FormatKind::fp32));
    EXPECT_THROW((void)capture_first_token_traces(build(FormatKind::fp32), small, {1, 2}), Error);
}

TEST(Metrics, WorkedExamples) {
    std::vector<PromptOutcome> r(50);
    for (int i = 0; i < 34; ++i) r[i] = {true, 5 + i};
    const auto m = aggregate_metrics(r);
    EXPECT_EQ(m.n_success, 34);
    EXPECT_EQ(m.success_rate_text(), "68.0%");

    const auto m2 = aggregate_metrics({{true, 10}, {false, {}}, {true, 20}, {true, 30}, {false, {}}});
    EXPECT_EQ(*m2.avg_iterations, 20.0);
    EXPECT_EQ(m2.avg_iterations_text(), "20.0");

    const auto zero = aggregate_metrics({{false, {}}, {false, {}}});
    EXPECT_EQ(zero.success_rate_text(), "0.0%");
    EXPECT_FALSE(zero.avg_iterations.has_value());
    EXPECT_EQ(zero.avg_iterations_text(), "N/A");

    EXPECT_THROW((void)aggregate_metrics({}), Error);
    EXPECT_THROW((void)aggregate_metrics({{true, {}}}), Error);
}

TEST(Metrics, RateMatchesCounts) {
    Rng rng(15);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<PromptOutcome> r(1 + rng.below(60));
        int s = 0;
        for (auto& o : r) {
            if (rng.below(2)) {
                o = {true, static_cast<int>(1 + rng.below(300))};
                ++s;
            }
        }
        const auto m = aggregate_metrics(r);
        EXPECT_EQ(m.n_success, s);
        EXPECT_DOUBLE_EQ(m.success_rate, 100.0 * s / static_cast<double>(r.size()));
        EXPECT_EQ(m.avg_iterations.has_value(), s > 0);
    }
}

TEST(FormatDouble, RoundTrips) {
    Rng rng(16);
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.normal() * std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0);
        EXPECT_EQ(std::stod(format_double(v)), v);
    }
    EXPECT_EQ(format_double(0.25), "0.25");
}
