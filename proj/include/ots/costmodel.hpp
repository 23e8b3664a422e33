// Closed-form parameter and FLOP accounting for the layer variants the
// artifact compares, with exact integer counts and the one-decimal-of-
// millions rounding the reference tables use. One FLOP means one
// multiply-accumulate inside a linear map; softmax, concatenation, gating,
// and other elementwise work count zero. Only learnable linear maps carry
// parameters; the scalar gate is excluded.
#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "ots/gram.hpp"
#include "ots/oam.hpp"

namespace ots {

// Millions rounded to one decimal, computed in integer arithmetic: first to
// hundredths of a million, then to tenths, half away from zero at each step.
// The two-step rounding is what reconciles every published row at once
// (1,048,576 params print as 1.1, not 1.0).
inline std::uint64_t round_tenths_of_millions(std::uint64_t count) {
    const std::uint64_t hundredths = (count + 5'000) / 10'000;
    return (hundredths + 5) / 10;
}

inline std::string format_millions(std::uint64_t count) {
    const std::uint64_t tenths = round_tenths_of_millions(count);
    return std::to_string(tenths / 10) + "." + std::to_string(tenths % 10);
}

struct CostReport {
    std::string name;
    std::uint64_t params = 0;
    std::uint64_t flops = 0;

    std::string params_m() const { return format_millions(params); }
    std::string flops_m() const { return format_millions(flops); }
};

inline CostReport operator+(const CostReport& a, const CostReport& b) {
    return CostReport{a.name, a.params + b.params, a.flops + b.flops};
}

// Object attention block: three bias-free projections plus the two n x n
// attention products.
inline CostReport cost_oab(index_t c_in, Alpha alpha, index_t n,
                           const std::string& name = "object attention block") {
    const std::uint64_t cv = static_cast<std::uint64_t>(ObjectAttentionBlock::value_channels(c_in, alpha));
    const std::uint64_t ci = static_cast<std::uint64_t>(c_in);
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    CostReport r;
    r.name = name;
    r.params = ci * cv + 2 * cv * cv;
    r.flops = un * r.params + 2 * cv * un * un;
    return r;
}

inline CostReport cost_oab_chain(index_t c_in, const std::vector<Alpha>& alphas, index_t n,
                                 const std::string& name = "object attention blocks") {
    CostReport total;
    total.name = name;
    index_t c = c_in;
    for (const Alpha& a : alphas) {
        CostReport r = cost_oab(c, a, n);
        total.params += r.params;
        total.flops += r.flops;
        c = 2 * ObjectAttentionBlock::value_channels(c, a);
    }
    return total;
}

// Self-attention: parallel query/key/value projections from the input plus
// an output projection, and the two attention products.
inline CostReport cost_self_attention(index_t c_in, index_t c_qk, index_t c_v, index_t c_out,
                                      index_t n, const std::string& name = "self-attention") {
    const std::uint64_t ci = c_in, qk = c_qk, cv = c_v, co = c_out, un = n;
    CostReport r;
    r.name = name;
    r.params = 2 * ci * qk + ci * cv + cv * co;
    r.flops = un * r.params + un * un * (qk + cv);
    return r;
}

// Non-local block: three equal-width projections plus an output projection.
inline CostReport cost_nonlocal(index_t c_in, index_t c, index_t c_out, index_t n,
                                const std::string& name = "non-local") {
    const std::uint64_t ci = c_in, cc = c, co = c_out, un = n;
    CostReport r;
    r.name = name;
    r.params = 3 * ci * cc + cc * co;
    r.flops = un * r.params + 2 * cc * un * un;
    return r;
}

// Strip depthwise + pointwise aggregation: both maps touch each weight once
// per forward pass, so params and flops coincide.
inline CostReport cost_gram(index_t c, index_t n, index_t c_out,
                            const std::string& name = "gram") {
    const std::uint64_t cc = c, un = n, co = c_out;
    CostReport r;
    r.name = name;
    r.params = cc * un + cc * co;
    r.flops = r.params;
    return r;
}

// Full linear map over the flattened c x n input.
inline CostReport cost_fc(index_t c, index_t n, index_t c_out, const std::string& name = "fc") {
    const std::uint64_t cc = c, un = n, co = c_out;
    CostReport r;
    r.name = name;
    r.params = cc * un * co;
    r.flops = r.params;
    return r;
}

// Parameter-free max + average pooling over the unit axis.
inline CostReport cost_pool(index_t c, index_t n, const std::string& name = "max & avg pooling") {
    CostReport r;
    r.name = name;
    r.params = 0;
    r.flops = 2 * static_cast<std::uint64_t>(c) * static_cast<std::uint64_t>(n);
    return r;
}

// Scalars actually stored by an instantiated layer's linear maps; must agree
// with the closed forms above as exact integers. The gate scalar is not a
// linear map and is excluded, matching the closed-form convention.
inline std::uint64_t count_instantiated(const ObjectAttentionBlock& b) {
    return static_cast<std::uint64_t>(b.w_v.value.size() + b.w_q.value.size() + b.w_k.value.size());
}

inline std::uint64_t count_instantiated(const OamStack& s) {
    std::uint64_t total = 0;
    for (const auto& b : s.blocks) total += count_instantiated(b);
    return total;
}

inline std::uint64_t count_instantiated(const GramLayer& g) {
    std::uint64_t total = static_cast<std::uint64_t>(g.depthwise.value.size() + g.pointwise.value.size());
    if (g.depthwise_bias) total += static_cast<std::uint64_t>(g.depthwise_bias->value.size());
    if (g.pointwise_bias) total += static_cast<std::uint64_t>(g.pointwise_bias->value.size());
    return total;
}

// Aligned table, one row per report, exact counts next to rounded millions.
inline std::string render_table(const std::vector<CostReport>& reports) {
    if (reports.empty()) throw UsageError("render_table: no reports");
    std::size_t name_w = 4;
    for (const auto& r : reports) name_w = std::max(name_w, r.name.size());
    std::ostringstream out;
    auto pad = [&](const std::string& s, std::size_t w) {
        out << s;
        for (std::size_t i = s.size(); i < w; ++i) out << ' ';
    };
    pad("name", name_w + 2);
    pad("params", 14);
    pad("parm(M)", 9);
    pad("flops", 14);
    out << "flops(M)\n";
    for (const auto& r : reports) {
        pad(r.name, name_w + 2);
        pad(std::to_string(r.params), 14);
        pad(r.params_m(), 9);
        pad(std::to_string(r.flops), 14);
        out << r.flops_m() << "\n";
    }
    return out.str();
}

inline std::string render_csv(const std::vector<CostReport>& reports) {
    if (reports.empty()) throw UsageError("render_csv: no reports");
    std::ostringstream out;
    out << "name,params,params_m,flops,flops_m\n";
    for (const auto& r : reports) {
        out << r.name << "," << r.params << "," << r.params_m() << "," << r.flops << ","
            << r.flops_m() << "\n";
    }
    return out.str();
}

// Every attention and aggregation row of the reference comparison, at the
// canonical 1024-channel / 150-unit configuration.
inline std::vector<CostReport> paper_preset() {
    const index_t n = 150;
    std::vector<CostReport> rows;
    rows.push_back(cost_self_attention(1024, 128, 512, 1024, n, "self-attention (1 block)"));
    rows.push_back(cost_nonlocal(1024, 512, 1024, n, "non-local (1 block)"));
    rows.push_back(cost_oab(1024, Alpha::of(1), n, "object attention block (alpha=1)"));
    rows.push_back(cost_oab(1024, Alpha::of(2), n, "object attention block (alpha=2)"));
    rows.push_back(cost_oab_chain(1024, default_alpha_chain(), n,
                                  "object attention blocks (alpha=2,1/2)"));
    {
        CostReport sa2 = cost_self_attention(1024, 128, 512, 1024, n);
        rows.push_back(CostReport{"self-attention (2 blocks)", 2 * sa2.params, 2 * sa2.flops});
        CostReport nl2 = cost_nonlocal(1024, 512, 1024, n);
        rows.push_back(CostReport{"non-local (2 blocks)", 2 * nl2.params, 2 * nl2.flops});
    }
    rows.push_back(cost_fc(1024, n, 2048, "fc aggregation"));
    rows.push_back(cost_pool(1024, n, "max & avg pooling"));
    rows.push_back(cost_gram(1024, n, 2048, "gram aggregation"));
    return rows;
}

}  // namespace ots
