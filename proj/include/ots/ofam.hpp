// Object feature aggregation: turns a backbone feature map and a
// segmentation score map into one pooled feature vector per object class.
// Forward-only; object features are computed offline and training never
// differentiates through this stage.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ots/matrix.hpp"

namespace ots {

// Per-object segmentation scores, objects x units. Entries are nonnegative
// (post-softmax probabilities or raw nonnegative scores); signed logits must
// be softmaxed by the ingestion layer first.
struct ScoreMap {
    Matrix matrix;

    explicit ScoreMap(Matrix m) : matrix(std::move(m)) {
        for (index_t i = 0; i < matrix.size(); ++i) {
            if (matrix.data()[i] < 0.0) {
                throw ShapeError("score map must be nonnegative, entry " + std::to_string(i) +
                                 " is " + std::to_string(matrix.data()[i]));
            }
        }
    }

    index_t object_count() const { return matrix.rows(); }
    index_t unit_count() const { return matrix.cols(); }
};

// Backbone features, channels x units; each column is one unit vector.
struct FeatureMap {
    Matrix matrix;

    explicit FeatureMap(Matrix m) : matrix(std::move(m)) {}

    index_t channel_count() const { return matrix.rows(); }
    index_t unit_count() const { return matrix.cols(); }
};

// 0/1 matrix marking, per unit, every object whose score attains the unit
// maximum. Ties mark multiple objects.
struct BinaryMask {
    Matrix matrix;
};

// Pooled features, channels x objects. Column j is zero when object j won no
// unit; present[j] records whether it did (with positive total score).
struct ObjectFeatures {
    Matrix matrix;
    std::vector<std::uint8_t> present;

    index_t channel_count() const { return matrix.rows(); }
    index_t object_count() const { return matrix.cols(); }
};

inline BinaryMask compute_mask(const ScoreMap& s) {
    const Matrix& sc = s.matrix;
    Matrix m(sc.rows(), sc.cols());
    for (index_t i = 0; i < sc.cols(); ++i) {
        double best = sc(0, i);
        for (index_t j = 1; j < sc.rows(); ++j) best = std::max(best, sc(j, i));
        for (index_t j = 0; j < sc.rows(); ++j) m(j, i) = sc(j, i) == best ? 1.0 : 0.0;
    }
    return BinaryMask{std::move(m)};
}

// Score-weighted mean of each object's winning unit vectors. Objects whose
// weight total is zero get a zero column and present = false.
inline ObjectFeatures aggregate(const FeatureMap& f, const ScoreMap& s, const BinaryMask& m) {
    const index_t channels = f.channel_count();
    const index_t units = f.unit_count();
    const index_t objects = s.object_count();
    if (s.unit_count() != units) {
        throw ShapeError("aggregate: unit counts disagree, features " + f.matrix.shape_string() +
                         " vs scores " + s.matrix.shape_string());
    }
    if (!m.matrix.same_shape(s.matrix)) {
        throw ShapeError("aggregate: mask shape " + m.matrix.shape_string() +
                         " does not match scores " + s.matrix.shape_string());
    }
    ObjectFeatures out;
    out.matrix = Matrix(channels, objects);
    out.present.assign(static_cast<std::size_t>(objects), 0);
    std::vector<double> weight(static_cast<std::size_t>(objects), 0.0);

    for (index_t i = 0; i < units; ++i) {
        for (index_t j = 0; j < objects; ++j) {
            if (m.matrix(j, i) == 0.0) continue;
            const double w = s.matrix(j, i);
            weight[static_cast<std::size_t>(j)] += w;
            if (w != 0.0) {
                for (index_t c = 0; c < channels; ++c) out.matrix(c, j) += w * f.matrix(c, i);
            }
        }
    }
    for (index_t j = 0; j < objects; ++j) {
        const double w = weight[static_cast<std::size_t>(j)];
        if (w > 0.0) {
            out.present[static_cast<std::size_t>(j)] = 1;
            for (index_t c = 0; c < channels; ++c) out.matrix(c, j) /= w;
        } else {
            for (index_t c = 0; c < channels; ++c) out.matrix(c, j) = 0.0;
        }
    }
    return out;
}

inline ObjectFeatures ofam(const FeatureMap& f, const ScoreMap& s) {
    if (f.unit_count() != s.unit_count()) {
        throw ShapeError("ofam: unit counts disagree, features " + f.matrix.shape_string() +
                         " vs scores " + s.matrix.shape_string());
    }
    return aggregate(f, s, compute_mask(s));
}

}  // namespace ots
