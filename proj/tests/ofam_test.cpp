#include <gtest/gtest.h>

#include <vector>

#include "ots/ofam.hpp"
#include "ots/rng.hpp"

namespace {

using ots::BinaryMask;
using ots::FeatureMap;
using ots::Matrix;
using ots::ObjectFeatures;
using ots::Rng;
using ots::ScoreMap;

// Independent oracle: literal per-unit argmax scan plus the weighted-mean
// formula, written as plain double loops.
ObjectFeatures ofam_oracle(const Matrix& f, const Matrix& s) {
    const ots::index_t channels = f.rows(), units = f.cols(), objects = s.rows();
    ObjectFeatures out;
    out.matrix = Matrix(channels, objects);
    out.present.assign(static_cast<std::size_t>(objects), 0);
    for (ots::index_t j = 0; j < objects; ++j) {
        double denom = 0.0;
        std::vector<double> num(static_cast<std::size_t>(channels), 0.0);
        for (ots::index_t i = 0; i < units; ++i) {
            double mx = s(0, i);
            for (ots::index_t jj = 1; jj < objects; ++jj) mx = std::max(mx, s(jj, i));
            const double mask = s(j, i) == mx ? 1.0 : 0.0;
            denom += mask * s(j, i);
            for (ots::index_t c = 0; c < channels; ++c) {
                num[static_cast<std::size_t>(c)] += mask * s(j, i) * f(c, i);
            }
        }
        if (denom > 0.0) {
            out.present[static_cast<std::size_t>(j)] = 1;
            for (ots::index_t c = 0; c < channels; ++c) {
                out.matrix(c, j) = num[static_cast<std::size_t>(c)] / denom;
            }
        }
    }
    return out;
}

ScoreMap random_scores(Rng& rng, ots::index_t objects, ots::index_t units) {
    return ScoreMap(rng.uniform_matrix(objects, units, 0.0, 1.0));
}

TEST(ComputeMask, ArgmaxColumn) {
    ScoreMap s(Matrix::from_rows({{0.2}, {0.5}, {0.3}}));
    BinaryMask m = compute_mask(s);
    EXPECT_EQ(m.matrix(0, 0), 0.0);
    EXPECT_EQ(m.matrix(1, 0), 1.0);
    EXPECT_EQ(m.matrix(2, 0), 0.0);
}

TEST(ComputeMask, TiesMarkEveryMaximalEntry) {
    ScoreMap s(Matrix::from_rows({{0.5}, {0.5}, {0.0}}));
    BinaryMask m = compute_mask(s);
    EXPECT_EQ(m.matrix(0, 0), 1.0);
    EXPECT_EQ(m.matrix(1, 0), 1.0);
    EXPECT_EQ(m.matrix(2, 0), 0.0);
}

TEST(ComputeMask, MatchesArgmaxOracleOnRandomMap) {
    Rng rng(42);
    ScoreMap s = random_scores(rng, 150, 60);
    BinaryMask m = compute_mask(s);
    for (ots::index_t i = 0; i < 60; ++i) {
        ots::index_t arg = 0;
        for (ots::index_t j = 1; j < 150; ++j) {
            if (s.matrix(j, i) > s.matrix(arg, i)) arg = j;
        }
        double ones = 0.0;
        for (ots::index_t j = 0; j < 150; ++j) ones += m.matrix(j, i);
        EXPECT_EQ(m.matrix(arg, i), 1.0);
        EXPECT_EQ(ones, 1.0);  // random draws: ties have measure zero
    }
}

TEST(ComputeMask, EveryUnitHasAWinner) {
    Rng rng(43);
    ScoreMap s = random_scores(rng, 9, 33);
    BinaryMask m = compute_mask(s);
    for (ots::index_t i = 0; i < 33; ++i) {
        double count = 0.0;
        for (ots::index_t j = 0; j < 9; ++j) count += m.matrix(j, i);
        EXPECT_GE(count, 1.0);
    }
}

TEST(ComputeMask, ScaleCovariance) {
    Rng rng(44);
    ScoreMap s = random_scores(rng, 7, 11);
    ScoreMap scaled(scale(s.matrix, 3.75));
    EXPECT_EQ(max_abs_diff(compute_mask(s).matrix, compute_mask(scaled).matrix), 0.0);
}

TEST(Aggregate, SingleWinnerColumnsCancelWeights) {
    FeatureMap f(Matrix::from_rows({{1, 3}, {2, 4}}));
    ScoreMap s(Matrix::from_rows({{0.7, 0.4}, {0.3, 0.6}}));
    ObjectFeatures o = aggregate(f, s, compute_mask(s));
    EXPECT_NEAR(o.matrix(0, 0), 1.0, 1e-15);
    EXPECT_NEAR(o.matrix(1, 0), 2.0, 1e-15);
    EXPECT_NEAR(o.matrix(0, 1), 3.0, 1e-15);
    EXPECT_NEAR(o.matrix(1, 1), 4.0, 1e-15);
    EXPECT_TRUE(o.present[0]);
    EXPECT_TRUE(o.present[1]);
}

TEST(Aggregate, HandEvaluatedWeightedMean) {
    FeatureMap f(Matrix::from_rows({{1, 3}, {2, 4}}));
    ScoreMap s(Matrix::from_rows({{0.7, 0.6}, {0.3, 0.4}}));
    ObjectFeatures o = aggregate(f, s, compute_mask(s));
    // object 0 wins both units: ((0.7*1 + 0.6*3)/1.3, (0.7*2 + 0.6*4)/1.3)
    EXPECT_NEAR(o.matrix(0, 0), 2.5 / 1.3, 1e-15);
    EXPECT_NEAR(o.matrix(1, 0), 3.8 / 1.3, 1e-15);
    EXPECT_EQ(o.matrix(0, 1), 0.0);
    EXPECT_EQ(o.matrix(1, 1), 0.0);
    EXPECT_TRUE(o.present[0]);
    EXPECT_FALSE(o.present[1]);
}

TEST(Aggregate, AbsentObjectGetsZeroColumnAndFlag) {
    Rng rng(45);
    Matrix sm = rng.uniform_matrix(150, 40, 0.1, 1.0);
    for (ots::index_t i = 0; i < 40; ++i) sm(7, i) = 0.0;  // object 7 can never win
    ScoreMap s(sm);
    FeatureMap f(rng.uniform_matrix(16, 40, -1, 1));
    ObjectFeatures o = ofam(f, s);
    EXPECT_FALSE(o.present[7]);
    for (ots::index_t c = 0; c < 16; ++c) EXPECT_EQ(o.matrix(c, 7), 0.0);
}

TEST(Aggregate, ShapeMismatchIsError) {
    FeatureMap f(Matrix(4, 5));
    ScoreMap s(Matrix(3, 6));
    EXPECT_THROW(ots::ofam(f, s), ots::ShapeError);
}

TEST(Ofam, SingleUnitProducesOneNonzeroColumn) {
    FeatureMap f(Matrix::from_rows({{2.0}, {-1.0}, {0.5}}));
    ScoreMap s(Matrix::from_rows({{0.1}, {0.8}, {0.1}}));
    ObjectFeatures o = ofam(f, s);
    EXPECT_TRUE(o.present[1]);
    EXPECT_FALSE(o.present[0]);
    EXPECT_NEAR(o.matrix(0, 1), 2.0, 1e-15);
    EXPECT_NEAR(o.matrix(1, 1), -1.0, 1e-15);
    EXPECT_NEAR(o.matrix(2, 1), 0.5, 1e-15);
    EXPECT_EQ(o.matrix(0, 0), 0.0);
}

TEST(Ofam, UnitPermutationInvariance) {
    Rng rng(46);
    const ots::index_t units = 31;
    Matrix f = rng.uniform_matrix(12, units, -1, 1);
    Matrix s = rng.uniform_matrix(9, units, 0.0, 1.0);
    std::vector<ots::index_t> perm(units);
    for (ots::index_t i = 0; i < units; ++i) perm[static_cast<std::size_t>(i)] = i;
    rng.shuffle(perm);
    Matrix fp(12, units), sp(9, units);
    for (ots::index_t i = 0; i < units; ++i) {
        for (ots::index_t c = 0; c < 12; ++c) fp(c, i) = f(c, perm[static_cast<std::size_t>(i)]);
        for (ots::index_t j = 0; j < 9; ++j) sp(j, i) = s(j, perm[static_cast<std::size_t>(i)]);
    }
    ObjectFeatures a = ofam(FeatureMap(f), ScoreMap(s));
    ObjectFeatures b = ofam(FeatureMap(fp), ScoreMap(sp));
    EXPECT_LE(max_abs_diff(a.matrix, b.matrix), 1e-10);
    EXPECT_EQ(a.present, b.present);
}

TEST(Ofam, ConvexCombinationBoundPerChannel) {
    Rng rng(47);
    Matrix f = rng.uniform_matrix(6, 25, -3, 3);
    ScoreMap s(rng.uniform_matrix(5, 25, 0.0, 1.0));
    BinaryMask m = compute_mask(s);
    ObjectFeatures o = aggregate(FeatureMap(f), s, m);
    for (ots::index_t j = 0; j < 5; ++j) {
        if (!o.present[static_cast<std::size_t>(j)]) continue;
        for (ots::index_t c = 0; c < 6; ++c) {
            double lo = 1e300, hi = -1e300;
            for (ots::index_t i = 0; i < 25; ++i) {
                if (m.matrix(j, i) == 1.0) {
                    lo = std::min(lo, f(c, i));
                    hi = std::max(hi, f(c, i));
                }
            }
            EXPECT_GE(o.matrix(c, j), lo - 1e-12);
            EXPECT_LE(o.matrix(c, j), hi + 1e-12);
        }
    }
}

TEST(Ofam, MatchesNaiveOracleOnFullSizeMaps) {
    Rng rng(48);
    Matrix f = rng.uniform_matrix(1024, 196, -1, 1);
    Matrix s = rng.uniform_matrix(150, 196, 0.0, 1.0);
    ObjectFeatures fast = ofam(FeatureMap(f), ScoreMap(s));
    ObjectFeatures slow = ofam_oracle(f, s);
    EXPECT_LE(max_abs_diff(fast.matrix, slow.matrix), 1e-12);
    EXPECT_EQ(fast.present, slow.present);
}

TEST(ScoreMapType, RejectsNegativeScores) {
    EXPECT_THROW(ScoreMap(Matrix::from_rows({{0.5, -0.1}})), ots::ShapeError);
}

}  // namespace
