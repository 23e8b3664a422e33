// Reverse-mode gradient tape over a fixed operation vocabulary, plus the
// finite-difference checker used to audit every backward rule.
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ots/matrix.hpp"
#include "ots/rng.hpp"

namespace ots {

// A learnable tensor. Gradients accumulate across backward calls until
// zero_grad; the optimizer owns the update step.
struct Param {
    Matrix value;
    Matrix grad;
    std::string name;
    bool decay_exempt = false;

    Param(Matrix v, std::string n, bool exempt = false)
        : value(std::move(v)), grad(value.rows(), value.cols()), name(std::move(n)),
          decay_exempt(exempt) {}

    void zero_grad() { grad.fill(0.0); }
};

inline void zero_grads(std::span<Param* const> params) {
    for (Param* p : params) p->zero_grad();
}

// Records one forward pass; replaying it backward visits operations in exact
// reverse execution order. A tape and the params it touches are confined to
// one thread for the duration of a forward/backward cycle.
class Tape {
public:
    struct Var {
        std::int32_t id = -1;
    };

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t node_count() const { return nodes_.size(); }

    const Matrix& value(Var v) const { return *node(v).value; }

    // Leaf holding a constant; no gradient flows into it.
    Var input(Matrix m) { return Var{push_owned(std::move(m))}; }

    // Leaf viewing caller-owned storage that must outlive the tape.
    Var input_ref(const Matrix& m) {
        nodes_.emplace_back();
        nodes_.back().value = &m;
        return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    // Leaf bound to a Param; backward accumulates directly into p.grad.
    Var use(Param& p) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.value = &p.value;
        n.param = grad_enabled_ ? &p : nullptr;
        n.needs_grad = grad_enabled_;
        return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    Var matmul(Var a, Var b) {
        Matrix out = ots::matmul(value(a), value(b));
        return push_op(std::move(out), a, b, [](Tape& t, Node& n) {
            if (t.wants_grad(n.a)) t.accumulate_gemm(n.a, n.grad, t.value_at(n.b), detail::MatOp::NT);
            if (t.wants_grad(n.b)) t.accumulate_gemm(n.b, t.value_at(n.a), n.grad, detail::MatOp::TN);
        });
    }

    // a^T b without materializing the transpose.
    Var matmul_tn(Var a, Var b) {
        Matrix out = ots::matmul_tn(value(a), value(b));
        return push_op(std::move(out), a, b, [](Tape& t, Node& n) {
            if (t.wants_grad(n.a)) t.accumulate_gemm(n.a, t.value_at(n.b), n.grad, detail::MatOp::NT);
            if (t.wants_grad(n.b)) t.accumulate_gemm(n.b, t.value_at(n.a), n.grad, detail::MatOp::NN);
        });
    }

    Var add(Var a, Var b) {
        Matrix out = ots::add(value(a), value(b));
        return push_op(std::move(out), a, b, [](Tape& t, Node& n) {
            if (t.wants_grad(n.a)) t.accumulate(n.a, n.grad);
            if (t.wants_grad(n.b)) t.accumulate(n.b, n.grad);
        });
    }

    // Elementwise product; one operand may be 1x1 (scalar broadcast).
    Var mul(Var a, Var b) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        if (av.same_shape(bv)) {
            Matrix out = ots::mul(av, bv);
            return push_op(std::move(out), a, b, [](Tape& t, Node& n) {
                if (t.wants_grad(n.a)) t.accumulate(n.a, ots::mul(n.grad, t.value_at(n.b)));
                if (t.wants_grad(n.b)) t.accumulate(n.b, ots::mul(n.grad, t.value_at(n.a)));
            });
        }
        if (av.size() == 1) return scalar_mul(a, b);
        if (bv.size() == 1) return scalar_mul(b, a);
        throw ShapeError("mul: shape mismatch, " + av.shape_string() + " vs " + bv.shape_string());
    }

    Var scale(Var a, double s) {
        Matrix out = ots::scale(value(a), s);
        return push_op(std::move(out), a, Var{-1}, [s](Tape& t, Node& n) {
            if (t.wants_grad(n.a)) t.accumulate(n.a, ots::scale(n.grad, s));
        });
    }

    // gamma must be 1x1; gradient of gamma is sum(a (*) upstream).
    Var scale_by_scalar_param(Var a, Param& gamma) {
        if (gamma.value.size() != 1) {
            throw ShapeError("scale_by_scalar_param: gamma must be 1x1, got " +
                             gamma.value.shape_string());
        }
        return mul(a, use(gamma));
    }

    Var softmax_cols(Var a) {
        Matrix out = ots::softmax_cols(value(a));
        return push_op(std::move(out), a, Var{-1}, [](Tape& t, Node& n) {
            if (!t.wants_grad(n.a)) return;
            const Matrix& p = n.owned;
            const Matrix& g = n.grad;
            Matrix da(p.rows(), p.cols(), detail::Uninit{});
            for (index_t j = 0; j < p.cols(); ++j) {
                double dot = 0.0;
                for (index_t i = 0; i < p.rows(); ++i) dot += p(i, j) * g(i, j);
                for (index_t i = 0; i < p.rows(); ++i) da(i, j) = p(i, j) * (g(i, j) - dot);
            }
            t.accumulate(n.a, std::move(da));
        });
    }

    Var concat_rows(Var a, Var b) {
        Matrix out = ots::concat_rows(value(a), value(b));
        const index_t top = value(a).rows();
        return push_op(std::move(out), a, b, [top](Tape& t, Node& n) {
            auto parts = split_rows(n.grad, top);
            if (t.wants_grad(n.a)) t.accumulate(n.a, std::move(parts.first));
            if (t.wants_grad(n.b)) t.accumulate(n.b, std::move(parts.second));
        });
    }

    Var row_sum(Var a) {
        Matrix out = ots::row_sum(value(a));
        return push_op(std::move(out), a, Var{-1}, [](Tape& t, Node& n) {
            if (!t.wants_grad(n.a)) return;
            const Matrix& x = t.value_at(n.a);
            Matrix da(x.rows(), x.cols(), detail::Uninit{});
            for (index_t i = 0; i < x.rows(); ++i)
                for (index_t j = 0; j < x.cols(); ++j) da(i, j) = n.grad(i, 0);
            t.accumulate(n.a, std::move(da));
        });
    }

    Var col_sum(Var a) {
        Matrix out = ots::col_sum(value(a));
        return push_op(std::move(out), a, Var{-1}, [](Tape& t, Node& n) {
            if (!t.wants_grad(n.a)) return;
            const Matrix& x = t.value_at(n.a);
            Matrix da(x.rows(), x.cols(), detail::Uninit{});
            for (index_t i = 0; i < x.rows(); ++i)
                for (index_t j = 0; j < x.cols(); ++j) da(i, j) = n.grad(0, j);
            t.accumulate(n.a, std::move(da));
        });
    }

    Var row_mean(Var a) {
        const double inv = 1.0 / static_cast<double>(value(a).cols());
        return scale(row_sum(a), inv);
    }

    // Ties route the gradient to the first attaining column.
    Var row_max(Var a) {
        auto argmax = std::make_shared<std::vector<index_t>>();
        Matrix out = ots::row_max(value(a), argmax.get());
        return push_op(std::move(out), a, Var{-1}, [argmax](Tape& t, Node& n) {
            if (!t.wants_grad(n.a)) return;
            const Matrix& x = t.value_at(n.a);
            Matrix da(x.rows(), x.cols());
            for (index_t i = 0; i < x.rows(); ++i) {
                da(i, (*argmax)[static_cast<std::size_t>(i)]) = n.grad(i, 0);
            }
            t.accumulate(n.a, std::move(da));
        });
    }

    Var sum(Var a) {
        Matrix out(1, 1);
        out(0, 0) = sum_all(value(a));
        return push_op(std::move(out), a, Var{-1}, [](Tape& t, Node& n) {
            if (!t.wants_grad(n.a)) return;
            const Matrix& x = t.value_at(n.a);
            t.accumulate(n.a, Matrix::constant(x.rows(), x.cols(), n.grad(0, 0)));
        });
    }

    Var log(Var a) {
        Matrix out = log_elem(value(a));
        return push_op(std::move(out), a, Var{-1}, [](Tape& t, Node& n) {
            if (!t.wants_grad(n.a)) return;
            const Matrix& x = t.value_at(n.a);
            Matrix da(x.rows(), x.cols(), detail::Uninit{});
            for (index_t i = 0; i < x.size(); ++i) da.data()[i] = n.grad.data()[i] / x.data()[i];
            t.accumulate(n.a, std::move(da));
        });
    }

    Var relu(Var a) {
        Matrix out = ots::relu(value(a));
        return push_op(std::move(out), a, Var{-1}, [](Tape& t, Node& n) {
            if (!t.wants_grad(n.a)) return;
            const Matrix& x = t.value_at(n.a);
            Matrix da(x.rows(), x.cols(), detail::Uninit{});
            for (index_t i = 0; i < x.size(); ++i)
                da.data()[i] = x.data()[i] > 0.0 ? n.grad.data()[i] : 0.0;
            t.accumulate(n.a, std::move(da));
        });
    }

    Var reshape(Var a, index_t rows, index_t cols) {
        Matrix out = ots::reshape(value(a), rows, cols);
        return push_op(std::move(out), a, Var{-1}, [](Tape& t, Node& n) {
            if (!t.wants_grad(n.a)) return;
            const Matrix& x = t.value_at(n.a);
            t.accumulate(n.a, ots::reshape(n.grad, x.rows(), x.cols()));
        });
    }

    // Stable -log softmax(logits)[label] via log-sum-exp with max
    // subtraction; logits must be a column vector.
    Var cross_entropy_with_logits(Var logits, index_t label) {
        const Matrix& l = value(logits);
        if (l.cols() != 1) {
            throw ShapeError("cross_entropy_with_logits: logits must be Kx1, got " +
                             l.shape_string());
        }
        if (label < 0 || label >= l.rows()) {
            throw UsageError("cross_entropy_with_logits: label " + std::to_string(label) +
                             " out of range for " + std::to_string(l.rows()) + " classes");
        }
        double mx = l(0, 0);
        for (index_t i = 1; i < l.rows(); ++i) mx = std::max(mx, l(i, 0));
        double sum = 0.0;
        for (index_t i = 0; i < l.rows(); ++i) sum += std::exp(l(i, 0) - mx);
        Matrix out(1, 1);
        out(0, 0) = mx + std::log(sum) - l(label, 0);

        auto probs = std::make_shared<Matrix>(l.rows(), 1, detail::Uninit{});
        for (index_t i = 0; i < l.rows(); ++i) (*probs)(i, 0) = std::exp(l(i, 0) - mx) / sum;
        return push_op(std::move(out), logits, Var{-1}, [probs, label](Tape& t, Node& n) {
            if (!t.wants_grad(n.a)) return;
            Matrix da = *probs;
            da(label, 0) -= 1.0;
            t.accumulate(n.a, ots::scale(da, n.grad(0, 0)));
        });
    }

    // Seeds the 1x1 loss with 1 and sweeps the tape in reverse execution
    // order; param adjoints land directly in Param::grad. Node adjoints are
    // cleared on entry, so calling backward twice without zero_grads doubles
    // the accumulated param gradients.
    void backward(Var loss) {
        if (!grad_enabled_) throw UsageError("backward: tape was created with gradients disabled");
        Node& ln = node(loss);
        if (ln.value->size() != 1) {
            throw UsageError("backward: loss must be a 1x1 scalar, got " +
                             ln.value->shape_string());
        }
        for (Node& n : nodes_) {
            if (!n.param) n.grad = Matrix();
        }
        accumulate(loss.id, Matrix::constant(1, 1, 1.0));
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.param || n.grad.size() == 0 || !n.back) continue;
            n.back(*this, n);
        }
    }

private:
    struct Node {
        Matrix owned;
        const Matrix* value = nullptr;
        Matrix grad;
        Param* param = nullptr;
        bool needs_grad = false;
        std::int32_t a = -1;
        std::int32_t b = -1;
        std::function<void(Tape&, Node&)> back;
    };

    Node& node(Var v) {
        if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
            throw UsageError("tape: variable does not belong to this tape");
        }
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    const Node& node(Var v) const { return const_cast<Tape*>(this)->node(v); }

    const Matrix& value_at(std::int32_t id) { return *nodes_[static_cast<std::size_t>(id)].value; }

    bool wants_grad(std::int32_t id) {
        return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad;
    }

    static void add_into(Matrix& dst, const Matrix& src) {
        for (index_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
    }

    void accumulate(std::int32_t id, Matrix&& g) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.param) {
            add_into(n.param->grad, g);
        } else if (n.grad.size() == 0) {
            n.grad = std::move(g);
        } else {
            add_into(n.grad, g);
        }
    }

    void accumulate(std::int32_t id, const Matrix& g) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.param) {
            add_into(n.param->grad, g);
        } else if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            add_into(n.grad, g);
        }
    }

    // dst_adjoint (+)= op(a) * op(b) without a temporary.
    void accumulate_gemm(std::int32_t id, const Matrix& a, const Matrix& b, detail::MatOp op) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        const auto [m, k, n_cols] = detail::product_dims(a, b, op, "backward gemm");
        if (n.param) {
            detail::gemm_into<true>(n.param->grad, a, b, op, m, k, n_cols);
            return;
        }
        if (n.grad.size() == 0) {
            n.grad = Matrix(m, n_cols, detail::Uninit{});
            detail::gemm_into<false>(n.grad, a, b, op, m, k, n_cols);
        } else {
            detail::gemm_into<true>(n.grad, a, b, op, m, k, n_cols);
        }
    }

    std::int32_t push_owned(Matrix m) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.owned = std::move(m);
        n.value = &n.owned;
        return static_cast<std::int32_t>(nodes_.size() - 1);
    }

    Var push_op(Matrix out, Var a, Var b, std::function<void(Tape&, Node&)> back) {
        const bool needs = grad_enabled_ && (wants_grad(a.id) || (b.id >= 0 && wants_grad(b.id)));
        const std::int32_t id = push_owned(std::move(out));
        Node& n = nodes_[static_cast<std::size_t>(id)];
        n.a = a.id;
        n.b = b.id;
        n.needs_grad = needs;
        if (needs) n.back = std::move(back);
        return Var{id};
    }

    // out = s00 * m, with s a 1x1 node.
    Var scalar_mul(Var s, Var m) {
        const double sv = value(s)(0, 0);
        Matrix out = ots::scale(value(m), sv);
        return push_op(std::move(out), s, m, [](Tape& t, Node& n) {
            const double s00 = t.value_at(n.a)(0, 0);
            if (t.wants_grad(n.b)) t.accumulate(n.b, ots::scale(n.grad, s00));
            if (t.wants_grad(n.a)) {
                const Matrix& mv = t.value_at(n.b);
                double dot = 0.0;
                for (index_t i = 0; i < mv.size(); ++i) dot += mv.data()[i] * n.grad.data()[i];
                t.accumulate(n.a, Matrix::constant(1, 1, dot));
            }
        });
    }

    std::deque<Node> nodes_;
    bool grad_enabled_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct GradcheckOptions {
    double step = 1e-5;
    int coords_per_param = 32;  // sampled per param, all if the param is smaller
    std::uint64_t seed = 0x0815c0de;
    double denom_floor = 1e-8;
};

struct GradcheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    index_t worst_coord = -1;
    int coords_checked = 0;
};

// Compares given analytic gradients against central differences of eval() on
// a sampled coordinate subset. eval() must rebuild the forward pass from the
// params' current values.
inline GradcheckReport finite_diff_compare(const std::function<double()>& eval,
                                           std::span<Param* const> params,
                                           const std::vector<Matrix>& analytic,
                                           const GradcheckOptions& opt = {}) {
    if (analytic.size() != params.size()) {
        throw UsageError("finite_diff_compare: analytic gradient count mismatch");
    }
    Rng rng(opt.seed);
    GradcheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Param& p = *params[pi];
        const index_t n = p.value.size();
        std::vector<index_t> coords;
        if (n <= opt.coords_per_param) {
            for (index_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            std::vector<index_t> all(static_cast<std::size_t>(n));
            for (index_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
            rng.shuffle(all);
            coords.assign(all.begin(), all.begin() + opt.coords_per_param);
        }
        for (index_t c : coords) {
            double& slot = p.value.data()[c];
            const double saved = slot;
            slot = saved + opt.step;
            const double up = eval();
            slot = saved - opt.step;
            const double down = eval();
            slot = saved;
            const double numeric = (up - down) / (2.0 * opt.step);
            const double exact = analytic[pi].data()[c];
            const double denom = std::max(opt.denom_floor, std::abs(exact) + std::abs(numeric));
            const double rel = std::abs(exact - numeric) / denom;
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p.name;
                report.worst_coord = c;
            }
        }
    }
    return report;
}

// Runs build_loss once for analytic gradients, then audits them against
// central differences. build_loss must be deterministic in the param values.
inline GradcheckReport gradcheck(const std::function<Tape::Var(Tape&)>& build_loss,
                                 std::span<Param* const> params,
                                 const GradcheckOptions& opt = {}) {
    zero_grads(params);
    {
        Tape tape;
        Tape::Var loss = build_loss(tape);
        tape.backward(loss);
    }
    std::vector<Matrix> analytic;
    analytic.reserve(params.size());
    for (Param* p : params) analytic.push_back(p->grad);

    auto eval = [&]() {
        Tape tape(false);
        return tape.value(build_loss(tape))(0, 0);
    };
    return finite_diff_compare(eval, params, analytic, opt);
}

}  // namespace ots
