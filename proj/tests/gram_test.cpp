#include <gtest/gtest.h>

#include <vector>

#include "ots/gram.hpp"

namespace {

using ots::GramLayer;
using ots::Matrix;
using ots::Rng;
using ots::Tape;

// Independent oracle: per-channel dot product then explicit projection.
Matrix gram_oracle(const GramLayer& g, const Matrix& f) {
    std::vector<double> mid(static_cast<std::size_t>(g.c_in), 0.0);
    for (ots::index_t c = 0; c < g.c_in; ++c) {
        double acc = 0.0;
        for (ots::index_t n = 0; n < g.n_units; ++n) acc += g.depthwise.value(c, n) * f(c, n);
        mid[static_cast<std::size_t>(c)] = acc;
    }
    Matrix out(g.c_out, 1);
    for (ots::index_t o = 0; o < g.c_out; ++o) {
        double acc = 0.0;
        for (ots::index_t c = 0; c < g.c_in; ++c) {
            acc += g.pointwise.value(o, c) * mid[static_cast<std::size_t>(c)];
        }
        out(o, 0) = acc;
    }
    return out;
}

ots::index_t param_scalars(GramLayer& g) {
    ots::index_t n = 0;
    for (auto* p : g.params()) n += p->value.size();
    return n;
}

TEST(GramNew, ReferenceConfigurationParameterCount) {
    auto g = ots::gram_new(1024, 150, 2048, 5);
    EXPECT_EQ(param_scalars(g), 1024 * 150 + 1024 * 2048);
    EXPECT_EQ(param_scalars(g), 2250752);
}

TEST(GramNew, MinimalConfigurationHasTwoParameters) {
    auto g = ots::gram_new(1, 1, 1, 5);
    EXPECT_EQ(param_scalars(g), 2);
}

TEST(GramNew, BiasFlagAddsBiasTerms) {
    auto g = ots::gram_new(8, 4, 6, 5, /*use_bias=*/true);
    EXPECT_EQ(param_scalars(g), 8 * 4 + 6 * 8 + 8 + 6);
    EXPECT_TRUE(g.depthwise_bias->decay_exempt);
}

TEST(GramForward, AllOnesKernelWithIdentityPointwiseIsRowSum) {
    auto g = ots::gram_new(3, 4, 3, 6);
    g.depthwise.value.fill(1.0);
    g.pointwise.value = Matrix::identity(3);
    Rng rng(50);
    Matrix f = rng.uniform_matrix(3, 4, -1, 1);
    Tape t;
    const Matrix& out = t.value(ots::gram_forward(t, g, t.input(f)));
    for (ots::index_t c = 0; c < 3; ++c) {
        double expect = 0.0;
        for (ots::index_t n = 0; n < 4; ++n) expect += f(c, n);
        EXPECT_NEAR(out(c, 0), expect, 1e-15);
    }
}

TEST(GramForward, SingleUnitIsElementwiseThenProjection) {
    auto g = ots::gram_new(4, 1, 2, 7);
    Rng rng(51);
    Matrix f = rng.uniform_matrix(4, 1, -1, 1);
    Tape t;
    const Matrix& out = t.value(ots::gram_forward(t, g, t.input(f)));
    for (ots::index_t o = 0; o < 2; ++o) {
        double acc = 0.0;
        for (ots::index_t c = 0; c < 4; ++c) {
            acc += g.pointwise.value(o, c) * g.depthwise.value(c, 0) * f(c, 0);
        }
        EXPECT_NEAR(out(o, 0), acc, 1e-14);
    }
}

TEST(GramForward, MatchesNaiveOracle) {
    auto g = ots::gram_new(64, 15, 48, 8);
    Rng rng(52);
    Matrix f = rng.uniform_matrix(64, 15, -2, 2);
    Tape t(false);
    EXPECT_LE(max_abs_diff(t.value(ots::gram_forward(t, g, t.input(f))), gram_oracle(g, f)), 1e-12);
}

TEST(GramForward, ShapeMismatchIsError) {
    auto g = ots::gram_new(8, 5, 4, 9);
    Tape t;
    EXPECT_THROW(ots::gram_forward(t, g, t.input(Matrix(8, 6))), ots::ShapeError);
    EXPECT_THROW(ots::gram_forward(t, g, t.input(Matrix(7, 5))), ots::ShapeError);
}

TEST(GramForward, Linearity) {
    auto g = ots::gram_new(10, 7, 5, 10);
    Rng rng(53);
    Matrix f1 = rng.uniform_matrix(10, 7, -1, 1);
    Matrix f2 = rng.uniform_matrix(10, 7, -1, 1);
    const double a = 1.7, b = -0.4;
    Matrix combo = add(scale(f1, a), scale(f2, b));
    Tape t(false);
    const Matrix& lhs = t.value(ots::gram_forward(t, g, t.input(combo)));
    Matrix rhs = add(scale(t.value(ots::gram_forward(t, g, t.input(f1))), a),
                     scale(t.value(ots::gram_forward(t, g, t.input(f2))), b));
    EXPECT_LE(max_abs_diff(lhs, rhs), 1e-10);
}

TEST(GramForward, PositionSensitivityWitness) {
    // unlike pooling, the strip kernel is position-specific: a column swap
    // must change the output for generic weights
    auto g = ots::gram_new(6, 8, 4, 11);
    Rng rng(54);
    Matrix f = rng.uniform_matrix(6, 8, -1, 1);
    Matrix swapped = f;
    for (ots::index_t c = 0; c < 6; ++c) std::swap(swapped(c, 1), swapped(c, 5));
    Tape t(false);
    const double diff = max_abs_diff(t.value(ots::gram_forward(t, g, t.input(f))),
                                     t.value(ots::gram_forward(t, g, t.input(swapped))));
    EXPECT_GT(diff, 1e-6);
}

TEST(GramForward, GradcheckBelowThreshold) {
    auto g = ots::gram_new(9, 5, 7, 12, /*use_bias=*/true, /*relu_out=*/false);
    Rng rng(55);
    Matrix f = rng.uniform_matrix(9, 5, -1, 1);
    Matrix w = rng.uniform_matrix(7, 1, -1, 1);
    auto params = g.params();
    auto report = ots::gradcheck(
        [&](Tape& t) { return t.sum(t.mul(t.input(w), ots::gram_forward(t, g, t.input(f)))); },
        params);
    EXPECT_LT(report.max_rel_err, 1e-5);
}

}  // namespace
