// Global relation aggregation: a strip depthwise kernel spanning all unit
// positions of each channel collapses the map to one scalar per channel,
// then a pointwise projection lifts it to the scene representation vector.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ots/tape.hpp"

namespace ots {

struct GramLayer {
    index_t c_in;
    index_t n_units;
    index_t c_out;
    bool use_bias;
    bool relu_out;
    Param depthwise;  // c_in x n_units, one full-width strip per channel
    Param pointwise;  // c_out x c_in
    std::optional<Param> depthwise_bias;  // c_in x 1
    std::optional<Param> pointwise_bias;  // c_out x 1

    GramLayer(index_t c_in_, index_t n_units_, index_t c_out_, Rng& rng, bool use_bias_ = false,
              bool relu_out_ = false)
        : c_in(c_in_), n_units(n_units_), c_out(c_out_), use_bias(use_bias_), relu_out(relu_out_),
          depthwise(rng.glorot_matrix(c_in_, n_units_, n_units_, 1), "gram.depthwise"),
          pointwise(rng.glorot_matrix(c_out_, c_in_, c_in_, c_out_), "gram.pointwise") {
        if (c_in <= 0 || n_units <= 0 || c_out <= 0) {
            throw ConfigError("gram layer dimensions must be positive");
        }
        if (use_bias) {
            depthwise_bias.emplace(Matrix(c_in, 1), "gram.depthwise.bias", /*decay_exempt=*/true);
            pointwise_bias.emplace(Matrix(c_out, 1), "gram.pointwise.bias", /*decay_exempt=*/true);
        }
    }

    std::vector<Param*> params() {
        std::vector<Param*> out{&depthwise, &pointwise};
        if (depthwise_bias) out.push_back(&*depthwise_bias);
        if (pointwise_bias) out.push_back(&*pointwise_bias);
        return out;
    }
};

inline GramLayer gram_new(index_t c_in, index_t n_units, index_t c_out, std::uint64_t seed,
                          bool use_bias = false, bool relu_out = false) {
    Rng rng(seed);
    return GramLayer(c_in, n_units, c_out, rng, use_bias, relu_out);
}

// mid[c] = sum_n depthwise[c,n] * f[c,n]; out = pointwise * mid.
inline Tape::Var gram_forward(Tape& t, GramLayer& g, Tape::Var f) {
    const Matrix& fv = t.value(f);
    if (fv.rows() != g.c_in || fv.cols() != g.n_units) {
        throw ShapeError("gram layer expects " + Matrix::shape_string(g.c_in, g.n_units) +
                         ", got " + fv.shape_string());
    }
    auto mid = t.row_sum(t.mul(t.use(g.depthwise), f));
    if (g.depthwise_bias) mid = t.add(mid, t.use(*g.depthwise_bias));
    auto out = t.matmul(t.use(g.pointwise), mid);
    if (g.pointwise_bias) out = t.add(out, t.use(*g.pointwise_bias));
    if (g.relu_out) out = t.relu(out);
    return out;
}

}  // namespace ots
