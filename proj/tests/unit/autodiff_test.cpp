#include "precdiff/autodiff.hpp"
#include "precdiff/errors.hpp"
#include "precdiff/rng.hpp"
#include "precdiff/tensor.hpp"
#include "reference/reference_model.hpp"
#include "reference/softfloat_ref.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

using namespace precdiff;

namespace {

const PrecisionFormat& F(FormatKind k) { return PrecisionFormat::get(k); }
const PrecisionFormat& FP32 = F(FormatKind::fp32);

PTensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    PTensor t(shape);
    for (float& v : t.mutable_data()) v = static_cast<float>(scale * rng.normal());
    return t;
}

ref::Mat to_mat(const PTensor& t) { return ref::Mat(t.data().begin(), t.data().end()); }

double weighted_sum(const ref::Mat& y, const PTensor& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
    return s;
}

// || analytic - numeric || / || numeric || for the gradient of f at x.
double fd_relative_error(const std::vector<float>& analytic, const ref::Mat& x,
                         const std::function<double(const ref::Mat&)>& f, double h = 1e-3) {
    double num = 0.0, den = 0.0;
    ref::Mat xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        xp[i] = x[i] + h;
        const double fp = f(xp);
        xp[i] = x[i] - h;
        const double fm = f(xp);
        xp[i] = x[i];
        const double g = (fp - fm) / (2 * h);
        num += (analytic[i] - g) * (analytic[i] - g);
        den += g * g;
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
}

constexpr double kGradTol = 1e-4;
constexpr float kNormEps = 1e-5f;

}  // namespace

TEST(Kernels, MatmulHandExamples) {
    const PTensor a({1, 2}, {1, 2});
    const PTensor b({2, 1}, {3, 4});
    EXPECT_EQ(kernels::matmul(a, b, FP32)[0], 11.0f);

    Rng rng(3);
    const PTensor m = random_tensor({3, 4}, rng);
    PTensor eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.mutable_data()[i * 3 + i] = 1.0f;
    EXPECT_TRUE(bit_equal(kernels::matmul(eye, m, FP32), m));
}

TEST(Kernels, MatmulBf16MatchesRoundedReference) {
    const PTensor a = apply_precision(PTensor({1, 2}, {0.1f, 0.1f}), F(FormatKind::bf16));
    const PTensor b = apply_precision(PTensor({2, 1}, {1.0f, 1.0f}), F(FormatKind::bf16));
    const float in = ref::bf16_round(0.1f);
    EXPECT_FLOAT_EQ(in, 0.100097656f);
    const float expect = ref::bf16_round(static_cast<float>(static_cast<double>(in) + static_cast<double>(in)));
    EXPECT_EQ(kernels::matmul(a, b, F(FormatKind::bf16))[0], expect);
}

TEST(Kernels, ShapeErrorsNameBothShapes) {
    const PTensor a({2, 3});
    const PTensor b({2, 3});
    try {
        (void)kernels::matmul(a, b, FP32);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3] x [2x3]"), std::string::npos) << msg;
    }
    EXPECT_THROW((void)kernels::add(PTensor({2, 2}), PTensor({3, 2}), FP32), ShapeError);
}

TEST(Kernels, OutputsAreFixedPointsOfTheirFormat) {
    Rng rng(5);
    const PTensor a = random_tensor({4, 8}, rng);
    const PTensor b = random_tensor({8, 6}, rng);
    for (FormatKind k : all_formats()) {
        const PTensor y = kernels::matmul(a, b, F(k));
        EXPECT_TRUE(bit_equal(apply_precision_rows(y, F(k)), y)) << F(k).name();
        const PTensor s = kernels::softmax_rows(y, F(k));
        EXPECT_TRUE(bit_equal(apply_precision_rows(s, F(k)), s)) << F(k).name();
    }
}

TEST(Kernels, SoftmaxRowsSumToOne) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const PTensor z = random_tensor({4, 16}, rng, 3.0);
        const PTensor p = kernels::softmax_rows(z, FP32);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (float v : p.row(r)) s += v;
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
        for (FormatKind k : {FormatKind::fp16, FormatKind::bf16}) {
            const PTensor q = kernels::softmax_rows(z, F(k));
            const double bound = 4.0 * F(k).machine_epsilon * 16;
            for (std::size_t r = 0; r < 4; ++r) {
                double s = 0.0;
                for (float v : q.row(r)) s += v;
                EXPECT_NEAR(s, 1.0, bound) << F(k).name();
            }
        }
    }
}

TEST(Kernels, SoftmaxShiftMultipliesOneEntry) {
    // Raising logit j by delta scales p_j by exp(delta) / (normalizer ratio).
    Rng rng(13);
    const double delta = 0.01;
    for (int trial = 0; trial < 20; ++trial) {
        const PTensor z = random_tensor({1, 8}, rng);
        const std::size_t j = rng.below(8);
        PTensor z2 = z;
        z2.mutable_data()[j] = static_cast<float>(z[j] + delta);
        const double shift = static_cast<double>(z2[j]) - z[j];
        const PTensor p = kernels::softmax_rows(z, FP32);
        const PTensor p2 = kernels::softmax_rows(z2, FP32);
        double norm = 0.0, norm2 = 0.0;
        for (std::size_t c = 0; c < 8; ++c) {
            norm += std::exp(static_cast<double>(z[c]));
            norm2 += std::exp(static_cast<double>(z2[c]));
        }
        EXPECT_NEAR(p2[j] / p[j], std::exp(shift) / (norm2 / norm), 1e-6);
    }
}

TEST(Tape, SumGradientIsOnes) {
    Tape tape;
    Rng rng(1);
    const NodeId x = tape.input(random_tensor({3, 4}, rng), true);
    const Gradients g = tape.backward(tape.sum(x));
    ASSERT_TRUE(g.has(x));
    for (float v : g.of(x)) EXPECT_EQ(v, 1.0f);
}

TEST(Tape, DotGradientIsOtherOperand) {
    Tape tape;
    const PTensor xv({1, 3}, {1, -2, 3});
    const PTensor wv({3, 1}, {0.5f, 4, -1});
    const NodeId x = tape.input(xv, true);
    const NodeId w = tape.input(wv);
    const Gradients g = tape.backward(tape.sum(tape.matmul(x, w, FP32)));
    ASSERT_TRUE(g.has(x));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(g.of(x)[i], wv[i]);
    EXPECT_FALSE(g.has(w));
}

TEST(Tape, NonScalarLossIsRejected) {
    Tape tape;
    const NodeId x = tape.input(PTensor({2, 2}), true);
    EXPECT_THROW((void)tape.backward(x), ShapeError);
}

TEST(Tape, RoundingIsStraightThrough) {
    Tape tape;
    Rng rng(2);
    const NodeId x = tape.input(random_tensor({2, 5}, rng), true);
    const NodeId y = tape.precision_cast(x, F(FormatKind::int8));
    const Gradients g = tape.backward(tape.sum(y));
    for (float v : g.of(x)) EXPECT_EQ(v, 1.0f);
}

TEST(Tape, ConstantLeafAliasesItsTensor) {
    Rng rng(4);
    const PTensor w = random_tensor({3, 3}, rng);
    Tape tape;
    const NodeId c = tape.constant(w);
    EXPECT_EQ(tape.value(c).data().data(), w.data().data());
    EXPECT_FALSE(tape.requires_grad(c));
}

TEST(Tape, TopologicalOrderAndEvaluationOnlyMode) {
    Rng rng(6);
    const PTensor a = random_tensor({2, 3}, rng);
    const PTensor b = random_tensor({3, 2}, rng);
    Tape rec, eval(false);
    const NodeId y1 = rec.matmul(rec.input(a), rec.input(b), F(FormatKind::fp16));
    const NodeId y2 = eval.matmul(eval.input(a), eval.input(b), F(FormatKind::fp16));
    EXPECT_GT(y1, 1u);
    EXPECT_TRUE(bit_equal(rec.value(y1), eval.value(y2)));
}

// Central finite differences of a double-precision re-implementation against
// the fp32 backward pass, one primitive at a time.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
    Rng rng(derive_seed(77, {static_cast<std::uint64_t>(GetParam())}));
    const std::size_t R = 3, C = 4, N = 5;

    {  // matmul, both operands
        const PTensor a = random_tensor({R, C}, rng), b = random_tensor({C, N}, rng), w = random_tensor({R, N}, rng);
        Tape t;
        const NodeId na = t.input(a, true), nb = t.input(b, true);
        const Gradients g = t.backward(t.sum(t.mul(t.matmul(na, nb, FP32), t.input(w), FP32)));
        EXPECT_LT(fd_relative_error(g.of(na), to_mat(a),
                                    [&](const ref::Mat& x) { return weighted_sum(ref::matmul(x, to_mat(b), R, C, N), w); }),
                  kGradTol);
        EXPECT_LT(fd_relative_error(g.of(nb), to_mat(b),
                                    [&](const ref::Mat& x) { return weighted_sum(ref::matmul(to_mat(a), x, R, C, N), w); }),
                  kGradTol);
    }
    {  // add and mul
        const PTensor a = random_tensor({R, C}, rng), b = random_tensor({R, C}, rng), w = random_tensor({R, C}, rng);
        Tape t;
        const NodeId na = t.input(a, true), nb = t.input(b, true);
        const NodeId s = t.add(t.mul(na, nb, FP32), na, FP32);
        const Gradients g = t.backward(t.sum(t.mul(s, t.input(w), FP32)));
        auto f = [&](const ref::Mat& x) {
            ref::Mat y(x.size());
            for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * b[i] + x[i];
            return weighted_sum(y, w);
        };
        EXPECT_LT(fd_relative_error(g.of(na), to_mat(a), f), kGradTol);
    }
    {  // row-broadcast bias add
        const PTensor a = random_tensor({R, C}, rng), bias = random_tensor({C}, rng), w = random_tensor({R, C}, rng);
        Tape t;
        const NodeId nb = t.input(bias, true);
        const Gradients g = t.backward(t.sum(t.mul(t.add(t.input(a), nb, FP32), t.input(w), FP32)));
        auto f = [&](const ref::Mat& x) {
            ref::Mat y(R * C);
            for (std::size_t i = 0; i < R * C; ++i) y[i] = a[i] + x[i % C];
            return weighted_sum(y, w);
        };
        EXPECT_LT(fd_relative_error(g.of(nb), to_mat(bias), f), kGradTol);
    }
    {  // softmax
        const PTensor a = random_tensor({R, C}, rng), w = random_tensor({R, C}, rng);
        Tape t;
        const NodeId na = t.input(a, true);
        const Gradients g = t.backward(t.sum(t.mul(t.softmax_rows(na, FP32), t.input(w), FP32)));
        EXPECT_LT(fd_relative_error(g.of(na), to_mat(a),
                                    [&](const ref::Mat& x) { return weighted_sum(ref::softmax_rows(x, R, C), w); }),
                  kGradTol);
    }
    {  // rmsnorm, input and gain
        const PTensor a = random_tensor({R, C}, rng), gain = random_tensor({C}, rng), w = random_tensor({R, C}, rng);
        Tape t;
        const NodeId na = t.input(a, true), ng = t.input(gain, true);
        const Gradients g = t.backward(t.sum(t.mul(t.rmsnorm(na, ng, kNormEps, FP32), t.input(w), FP32)));
        EXPECT_LT(fd_relative_error(g.of(na), to_mat(a),
                                    [&](const ref::Mat& x) {
                                        return weighted_sum(ref::rmsnorm(x, to_mat(gain), R, C, kNormEps), w);
                                    }),
                  kGradTol);
        EXPECT_LT(fd_relative_error(g.of(ng), to_mat(gain),
                                    [&](const ref::Mat& x) { return weighted_sum(ref::rmsnorm(to_mat(a), x, R, C, kNormEps), w); }),
                  kGradTol);
    }
    {  // gelu
        const PTensor a = random_tensor({R, C}, rng, 2.0), w = random_tensor({R, C}, rng);
        Tape t;
        const NodeId na = t.input(a, true);
        const Gradients g = t.backward(t.sum(t.mul(t.gelu(na, FP32), t.input(w), FP32)));
        auto f = [&](const ref::Mat& x) {
            ref::Mat y(x.size());
            for (std::size_t i = 0; i < x.size(); ++i) y[i] = ref::gelu(x[i]);
            return weighted_sum(y, w);
        };
        EXPECT_LT(fd_relative_error(g.of(na), to_mat(a), f), kGradTol);
    }
    {  // causal attention, q k and v
        const std::size_t L = 4, D = 6, H = 2;
        const PTensor q = random_tensor({L, D}, rng), k = random_tensor({L, D}, rng), v = random_tensor({L, D}, rng);
        const PTensor w = random_tensor({L, D}, rng);
        Tape t;
        const NodeId nq = t.input(q, true), nk = t.input(k, true), nv = t.input(v, true);
        const Gradients g = t.backward(t.sum(t.mul(t.causal_attention(nq, nk, nv, H, FP32), t.input(w), FP32)));
        EXPECT_LT(fd_relative_error(g.of(nq), to_mat(q),
                                    [&](const ref::Mat& x) {
                                        return weighted_sum(ref::attention(x, to_mat(k), to_mat(v), L, D, H), w);
                                    }),
                  kGradTol);
        EXPECT_LT(fd_relative_error(g.of(nk), to_mat(k),
                                    [&](const ref::Mat& x) {
                                        return weighted_sum(ref::attention(to_mat(q), x, to_mat(v), L, D, H), w);
                                    }),
                  kGradTol);
        EXPECT_LT(fd_relative_error(g.of(nv), to_mat(v),
                                    [&](const ref::Mat& x) {
                                        return weighted_sum(ref::attention(to_mat(q), to_mat(k), x, L, D, H), w);
                                    }),
                  kGradTol);
    }
    {  // embedding lookup scatters into table rows
        const PTensor table = random_tensor({6, 3}, rng), w = random_tensor({4, 3}, rng);
        const std::vector<int> toks{2, 0, 2, 5};
        Tape t;
        const NodeId nt = t.input(table, true);
        const Gradients g = t.backward(t.sum(t.mul(t.embed_lookup(nt, toks, FP32), t.input(w), FP32)));
        auto f = [&](const ref::Mat& x) {
            double s = 0.0;
            for (std::size_t i = 0; i < toks.size(); ++i)
                for (std::size_t c = 0; c < 3; ++c) s += x[static_cast<std::size_t>(toks[i]) * 3 + c] * w[i * 3 + c];
            return s;
        };
        EXPECT_LT(fd_relative_error(g.of(nt), to_mat(table), f), kGradTol);
    }
    {  // cross entropy
        const PTensor z = random_tensor({R, C}, rng);
        const std::vector<int> tg{3, 1};
        Tape t;
        const NodeId nz = t.input(z, true);
        const Gradients g = t.backward(t.cross_entropy(nz, tg, 1));
        auto f = [&](const ref::Mat& x) {
            const ref::Mat p = ref::softmax_rows(x, R, C);
            return -std::log(p[1 * C + 3]) - std::log(p[2 * C + 1]);
        };
        EXPECT_LT(fd_relative_error(g.of(nz), to_mat(z), f), kGradTol);
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradient, ::testing::Range(0, 10));

TEST(Tape, BackwardIsDeterministic) {
    Rng rng(8);
    const PTensor a = random_tensor({4, 6}, rng), b = random_tensor({6, 6}, rng);
    auto run = [&] {
        Tape t;
        const NodeId na = t.input(a, true);
        const NodeId y = t.softmax_rows(t.matmul(na, t.input(b), F(FormatKind::bf16)), F(FormatKind::bf16));
        return t.backward(t.cross_entropy(y, std::vector<int>{1, 2}, 2)).of(na);
    };
    EXPECT_EQ(run(), run());
}
