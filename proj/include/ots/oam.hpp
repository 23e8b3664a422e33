// Object attention: value projection, query/key projections derived from the
// value, column-stochastic attention over object slots, and a gated fusion
// of the attention path with the value path. Blocks cascade into a stack.
#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ots/tape.hpp"

namespace ots {

// Compression factor, kept as an exact ratio so divisibility checks are
// exact for values like 2 and 1/2.
struct Alpha {
    std::int64_t num = 1;
    std::int64_t den = 1;

    static Alpha of(std::int64_t num, std::int64_t den = 1) {
        if (num <= 0 || den <= 0) throw ConfigError("alpha must be positive");
        const std::int64_t g = std::gcd(num, den);
        return Alpha{num / g, den / g};
    }

    // Accepts "2", "0.5", or "1/2".
    static Alpha parse(const std::string& text);

    double as_double() const { return static_cast<double>(num) / static_cast<double>(den); }

    std::string str() const {
        if (den == 1) return std::to_string(num);
        return std::to_string(num) + "/" + std::to_string(den);
    }
};

inline Alpha Alpha::parse(const std::string& text) {
    if (text.empty()) throw ConfigError("alpha: empty value");
    const auto slash = text.find('/');
    if (slash != std::string::npos) {
        return Alpha::of(std::stoll(text.substr(0, slash)), std::stoll(text.substr(slash + 1)));
    }
    const auto dot = text.find('.');
    if (dot == std::string::npos) return Alpha::of(std::stoll(text));
    const std::string whole = text.substr(0, dot);
    const std::string frac = text.substr(dot + 1);
    if (frac.size() > 9) throw ConfigError("alpha: too many decimal places in '" + text + "'");
    std::int64_t den = 1;
    for (std::size_t i = 0; i < frac.size(); ++i) den *= 10;
    const std::int64_t num = (whole.empty() ? 0 : std::stoll(whole)) * den +
                             (frac.empty() ? 0 : std::stoll(frac));
    return Alpha::of(num, den);
}

// How the gated attention path joins the value path: concatenation doubles
// the channel count, summation keeps the value shape.
enum class Fusion { Concat, Sum };

// One attention block. All projections are bias-free 1x1 convolutions over
// the unit axis; gamma gates the attention path and starts at zero, so a
// fresh block is a pure value projection.
struct ObjectAttentionBlock {
    index_t c_in;
    index_t c_v;
    Alpha alpha;
    Fusion fusion;
    Param w_v;
    Param w_q;
    Param w_k;
    Param gamma;

    static index_t value_channels(index_t c_in, Alpha alpha) {
        // c_v = c_in / (2 alpha), required integral
        const std::int64_t numer = c_in * alpha.den;
        const std::int64_t denom = 2 * alpha.num;
        if (numer % denom != 0) {
            throw ConfigError("object attention block: c_in " + std::to_string(c_in) +
                              " with alpha " + alpha.str() + " gives a non-integral value width");
        }
        const index_t cv = numer / denom;
        if (cv <= 0) throw ConfigError("object attention block: value width must be positive");
        return cv;
    }

    ObjectAttentionBlock(index_t c_in_, Alpha alpha_, Rng& rng, Fusion fusion_ = Fusion::Concat,
                         const std::string& name_prefix = "oab")
        : c_in(c_in_), c_v(value_channels(c_in_, alpha_)), alpha(alpha_), fusion(fusion_),
          w_v(rng.glorot_matrix(c_v, c_in, c_in, c_v), name_prefix + ".Wv"),
          w_q(rng.glorot_matrix(c_v, c_v, c_v, c_v), name_prefix + ".Wq"),
          w_k(rng.glorot_matrix(c_v, c_v, c_v, c_v), name_prefix + ".Wk"),
          gamma(Matrix(1, 1), name_prefix + ".gamma", /*decay_exempt=*/true) {}

    index_t out_channels() const { return fusion == Fusion::Concat ? 2 * c_v : c_v; }

    std::vector<Param*> params() {
        return {&w_v, &w_q, &w_k, &gamma};
    }
};

inline ObjectAttentionBlock oab_new(index_t c_in, Alpha alpha, std::uint64_t seed,
                                    Fusion fusion = Fusion::Concat) {
    Rng rng(seed);
    return ObjectAttentionBlock(c_in, alpha, rng, fusion);
}

// V = Wv f, Q = Wq V, K = Wk V, beta = softmax over the first index of
// Q^T K (each column of beta sums to 1, so V beta mixes value columns
// convexly), output = fuse(gamma * (V beta), V).
inline Tape::Var oab_forward(Tape& t, ObjectAttentionBlock& b, Tape::Var f) {
    if (t.value(f).rows() != b.c_in) {
        throw ShapeError("object attention block expects " + std::to_string(b.c_in) +
                         " input rows, got " + t.value(f).shape_string());
    }
    auto v = t.matmul(t.use(b.w_v), f);
    auto q = t.matmul(t.use(b.w_q), v);
    auto k = t.matmul(t.use(b.w_k), v);
    auto beta = t.softmax_cols(t.matmul_tn(q, k));
    auto gated = t.scale_by_scalar_param(t.matmul(v, beta), b.gamma);
    return b.fusion == Fusion::Concat ? t.concat_rows(gated, v) : t.add(gated, v);
}

// Cascade of blocks; block t+1 consumes block t's output channels. The
// reference configuration is two concat blocks with alpha = 2 then 1/2,
// mapping 1024 channels back to 1024.
struct OamStack {
    std::vector<ObjectAttentionBlock> blocks;

    static OamStack create(index_t c_in, const std::vector<Alpha>& alphas, Rng& rng,
                           Fusion fusion = Fusion::Concat) {
        OamStack s;
        index_t c = c_in;
        s.blocks.reserve(alphas.size());
        for (std::size_t i = 0; i < alphas.size(); ++i) {
            s.blocks.emplace_back(c, alphas[i], rng, fusion, "oam." + std::to_string(i));
            c = s.blocks.back().out_channels();
        }
        return s;
    }

    static OamStack create(index_t c_in, const std::vector<Alpha>& alphas, std::uint64_t seed,
                           Fusion fusion = Fusion::Concat) {
        Rng rng(seed);
        return create(c_in, alphas, rng, fusion);
    }

    index_t in_channels() const { return blocks.empty() ? -1 : blocks.front().c_in; }

    index_t out_channels(index_t input_channels) const {
        return blocks.empty() ? input_channels : blocks.back().out_channels();
    }

    std::vector<Param*> params() {
        std::vector<Param*> out;
        for (auto& b : blocks) {
            for (Param* p : b.params()) out.push_back(p);
        }
        return out;
    }
};

// Sequential application; the empty stack is the identity (ablation
// harness).
inline Tape::Var stack_forward(Tape& t, OamStack& s, Tape::Var x) {
    for (auto& b : s.blocks) x = oab_forward(t, b, x);
    return x;
}

inline std::vector<Alpha> default_alpha_chain() {
    return {Alpha::of(2), Alpha::of(1, 2)};
}

}  // namespace ots
