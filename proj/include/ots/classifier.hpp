// Recognition head, loss, optimizer, and training loop over precomputed
// object features, with the swappable aggregation stage used by the
// ablation harness.
#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ots/dataio.hpp"
#include "ots/gram.hpp"
#include "ots/oam.hpp"

namespace ots {

enum class AggregatorKind { Gram, FlattenLinear, MaxAvgPool };

inline const char* aggregator_name(AggregatorKind k) {
    switch (k) {
        case AggregatorKind::Gram: return "gram";
        case AggregatorKind::FlattenLinear: return "fc";
        case AggregatorKind::MaxAvgPool: return "pool";
    }
    return "?";
}

inline AggregatorKind parse_aggregator(const std::string& s) {
    if (s == "gram") return AggregatorKind::Gram;
    if (s == "fc") return AggregatorKind::FlattenLinear;
    if (s == "pool") return AggregatorKind::MaxAvgPool;
    throw ConfigError("unknown aggregator '" + s + "' (expected gram, fc, or pool)");
}

// Collapses a channels x units map into the scene representation column.
struct Aggregator {
    AggregatorKind kind = AggregatorKind::Gram;
    index_t c_in = 0;
    index_t n_units = 0;
    index_t out_width = 0;
    std::optional<GramLayer> gram;
    std::optional<Param> fc_weight;

    static Aggregator make(AggregatorKind kind, index_t c_in, index_t n_units, index_t width,
                           Rng& rng, bool gram_bias = false, bool gram_relu = false) {
        Aggregator a;
        a.kind = kind;
        a.c_in = c_in;
        a.n_units = n_units;
        switch (kind) {
            case AggregatorKind::Gram:
                a.gram.emplace(c_in, n_units, width, rng, gram_bias, gram_relu);
                a.out_width = width;
                break;
            case AggregatorKind::FlattenLinear:
                a.fc_weight.emplace(rng.glorot_matrix(width, c_in * n_units, c_in * n_units, width),
                                    "agg.fc.W");
                a.out_width = width;
                break;
            case AggregatorKind::MaxAvgPool:
                a.out_width = 2 * c_in;
                break;
        }
        return a;
    }

    Tape::Var forward(Tape& t, Tape::Var x) {
        switch (kind) {
            case AggregatorKind::Gram:
                return gram_forward(t, *gram, x);
            case AggregatorKind::FlattenLinear:
                return t.matmul(t.use(*fc_weight), t.reshape(x, c_in * n_units, 1));
            case AggregatorKind::MaxAvgPool:
                return t.concat_rows(t.row_max(x), t.row_mean(x));
        }
        throw UsageError("aggregator: bad kind");
    }

    std::vector<Param*> params() {
        if (gram) return gram->params();
        if (fc_weight) return {&*fc_weight};
        return {};
    }

    std::uint64_t linear_param_count() const {
        if (gram) return count_gram();
        if (fc_weight) return static_cast<std::uint64_t>(fc_weight->value.size());
        return 0;
    }

private:
    std::uint64_t count_gram() const {
        std::uint64_t n = static_cast<std::uint64_t>(gram->depthwise.value.size() +
                                                     gram->pointwise.value.size());
        if (gram->depthwise_bias) n += static_cast<std::uint64_t>(gram->depthwise_bias->value.size());
        if (gram->pointwise_bias) n += static_cast<std::uint64_t>(gram->pointwise_bias->value.size());
        return n;
    }
};

struct ModelConfig {
    index_t channels = 1024;  // attention input channels
    index_t objects = 150;    // object slots per sample
    std::vector<Alpha> alphas = default_alpha_chain();
    Fusion fusion = Fusion::Concat;
    AggregatorKind aggregator = AggregatorKind::Gram;
    index_t representation_width = 2048;  // gram / fc output width
    index_t classes = 7;
    bool gram_bias = false;
    bool gram_relu = false;

    std::string alphas_str() const {
        std::string s;
        for (std::size_t i = 0; i < alphas.size(); ++i) {
            if (i) s += ",";
            s += alphas[i].str();
        }
        return s;
    }
};

struct OtsModel {
    ModelConfig config;
    OamStack oam;
    Aggregator aggregator;
    Param head_w;
    Param head_b;

    static OtsModel create(const ModelConfig& cfg, std::uint64_t seed) {
        Rng rng(seed);
        OamStack stack = OamStack::create(cfg.channels, cfg.alphas, rng, cfg.fusion);
        const index_t stack_out = stack.out_channels(cfg.channels);
        Aggregator agg = Aggregator::make(cfg.aggregator, stack_out, cfg.objects,
                                          cfg.representation_width, rng, cfg.gram_bias,
                                          cfg.gram_relu);
        Param w(rng.glorot_matrix(cfg.classes, agg.out_width, agg.out_width, cfg.classes),
                "head.W");
        Param b(Matrix(cfg.classes, 1), "head.b", /*decay_exempt=*/true);
        return OtsModel{cfg, std::move(stack), std::move(agg), std::move(w), std::move(b)};
    }

    std::vector<Param*> params() {
        std::vector<Param*> out = oam.params();
        for (Param* p : aggregator.params()) out.push_back(p);
        out.push_back(&head_w);
        out.push_back(&head_b);
        return out;
    }

    Tape::Var logits(Tape& t, const Matrix& x) {
        if (x.rows() != config.channels || x.cols() != config.objects) {
            throw ShapeError("model expects " +
                             Matrix::shape_string(config.channels, config.objects) +
                             " object features, got " + x.shape_string());
        }
        auto related = stack_forward(t, oam, t.input_ref(x));
        auto representation = aggregator.forward(t, related);
        return t.add(t.matmul(t.use(head_w), representation), t.use(head_b));
    }
};

inline Tape::Var forward_logits(Tape& t, OtsModel& m, const ObjectFeatures& x) {
    return m.logits(t, x.matrix);
}

inline Tape::Var cross_entropy(Tape& t, Tape::Var logits, index_t label) {
    return t.cross_entropy_with_logits(logits, label);
}

// ---------------------------------------------------------------------------
// Optimizer.

struct SgdConfig {
    double lr0 = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int step_epochs = 10;
    double step_factor = 0.1;
    int epochs = 40;
    int batch_size = 256;

    void validate() const {
        if (lr0 <= 0 || momentum < 0 || weight_decay < 0 || step_epochs <= 0 || step_factor <= 0 ||
            epochs <= 0 || batch_size <= 0) {
            throw ConfigError("sgd config: all fields must be positive");
        }
    }
};

inline double lr_at(const SgdConfig& cfg, int epoch) {
    return cfg.lr0 * std::pow(cfg.step_factor, epoch / cfg.step_epochs);
}

// v <- momentum v + grad + wd value (decay skipped for exempt params);
// value <- value - lr(epoch) v.
class SgdOptimizer {
public:
    explicit SgdOptimizer(std::span<Param* const> params) {
        velocity_.reserve(params.size());
        for (const Param* p : params) velocity_.emplace_back(p->value.rows(), p->value.cols());
    }

    void step(std::span<Param* const> params, const SgdConfig& cfg, int epoch) {
        if (params.size() != velocity_.size()) {
            throw UsageError("sgd step: param list does not match optimizer state");
        }
        const double lr = lr_at(cfg, epoch);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Param& p = *params[i];
            Matrix& v = velocity_[i];
            const double wd = p.decay_exempt ? 0.0 : cfg.weight_decay;
            for (index_t k = 0; k < v.size(); ++k) {
                const double g = p.grad.data()[k] + wd * p.value.data()[k];
                v.data()[k] = cfg.momentum * v.data()[k] + g;
                p.value.data()[k] -= lr * v.data()[k];
            }
            if (!p.value.all_finite()) {
                throw NumericError("sgd step drove param '" + p.name + "' non-finite");
            }
        }
    }

private:
    std::vector<Matrix> velocity_;
};

inline void sgd_step(SgdOptimizer& opt, std::span<Param* const> params, const SgdConfig& cfg,
                     int epoch) {
    opt.step(params, cfg, epoch);
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalResult {
    double overall = 0.0;
    double class_mean = 0.0;
    std::vector<double> per_class;
    std::vector<index_t> class_total;
    std::vector<index_t> class_correct;
};

inline int predict(OtsModel& m, const Matrix& x) {
    Tape t(false);
    const Matrix& l = t.value(m.logits(t, x));
    int best = 0;
    for (index_t i = 1; i < l.rows(); ++i) {
        if (l(i, 0) > l(best, 0)) best = static_cast<int>(i);
    }
    return best;
}

// Argmax-of-logits accuracy, overall and per class. The frozen model is
// shared read-only across shards; counts merge in shard order.
inline EvalResult evaluate(OtsModel& m, const SceneDataset& ds, int threads = 1) {
    const index_t k = m.config.classes;
    const std::size_t n = ds.samples.size();
    if (threads < 1) threads = 1;
    if (static_cast<std::size_t>(threads) > n && n > 0) threads = static_cast<int>(n);

    std::vector<std::vector<index_t>> totals(threads, std::vector<index_t>(k, 0));
    std::vector<std::vector<index_t>> corrects(threads, std::vector<index_t>(k, 0));

    auto shard = [&](int ti) {
        const std::size_t lo = n * ti / threads;
        const std::size_t hi = n * (ti + 1) / threads;
        for (std::size_t i = lo; i < hi; ++i) {
            const Sample& s = ds.samples[i];
            const int pred = predict(m, s.features.matrix);
            ++totals[ti][static_cast<std::size_t>(s.label)];
            if (pred == s.label) ++corrects[ti][static_cast<std::size_t>(s.label)];
        }
    };
    if (threads == 1) {
        shard(0);
    } else {
        std::vector<std::thread> pool;
        for (int ti = 1; ti < threads; ++ti) pool.emplace_back(shard, ti);
        shard(0);
        for (auto& t : pool) t.join();
    }

    EvalResult r;
    r.per_class.assign(static_cast<std::size_t>(k), 0.0);
    r.class_total.assign(static_cast<std::size_t>(k), 0);
    r.class_correct.assign(static_cast<std::size_t>(k), 0);
    index_t total = 0, correct = 0;
    index_t classes_seen = 0;
    double mean_acc = 0.0;
    for (index_t c = 0; c < k; ++c) {
        for (int ti = 0; ti < threads; ++ti) {
            r.class_total[c] += totals[ti][c];
            r.class_correct[c] += corrects[ti][c];
        }
        total += r.class_total[c];
        correct += r.class_correct[c];
        if (r.class_total[c] > 0) {
            r.per_class[c] = static_cast<double>(r.class_correct[c]) /
                             static_cast<double>(r.class_total[c]);
            mean_acc += r.per_class[c];
            ++classes_seen;
        }
    }
    r.overall = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    r.class_mean = classes_seen > 0 ? mean_acc / static_cast<double>(classes_seen) : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainReport {
    std::uint64_t seed = 0;
    SgdConfig sgd;
    std::string config_echo;
    std::vector<double> train_loss;      // per epoch, averaged over samples
    std::vector<double> train_accuracy;  // per epoch, measured during training
    std::vector<double> eval_accuracy;   // per epoch; empty without an eval set
    EvalResult final_eval;

    std::string to_table() const;
};

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string TrainReport::to_table() const {
    std::ostringstream out;
    out << "# seed=" << seed << "\n";
    out << "# " << config_echo << "\n";
    out << "# lr0=" << format_double(sgd.lr0) << " momentum=" << format_double(sgd.momentum)
        << " weight_decay=" << format_double(sgd.weight_decay) << " step_epochs=" << sgd.step_epochs
        << " step_factor=" << format_double(sgd.step_factor) << " epochs=" << sgd.epochs
        << " batch_size=" << sgd.batch_size << "\n";
    out << "epoch\tlr\ttrain_loss\ttrain_acc\teval_acc\n";
    for (std::size_t e = 0; e < train_loss.size(); ++e) {
        out << e << "\t" << format_double(lr_at(sgd, static_cast<int>(e))) << "\t"
            << format_double(train_loss[e]) << "\t" << format_double(train_accuracy[e]) << "\t"
            << (e < eval_accuracy.size() ? format_double(eval_accuracy[e]) : "-") << "\n";
    }
    out << "class\taccuracy\tcorrect\ttotal\n";
    for (std::size_t c = 0; c < final_eval.per_class.size(); ++c) {
        out << c << "\t" << format_double(final_eval.per_class[c]) << "\t"
            << final_eval.class_correct[c] << "\t" << final_eval.class_total[c] << "\n";
    }
    out << "class_mean\t" << format_double(final_eval.class_mean) << "\n";
    out << "overall\t" << format_double(final_eval.overall) << "\n";
    return out.str();
}

// Seeded-shuffle mini-batch SGD; the last partial batch is trained, with the
// loss averaged over the actual batch size. Deterministic in
// (model, dataset, cfg, seed). Per-epoch eval accuracy is recorded when an
// eval set is supplied; the final per-class table uses the eval set when
// present, the training set otherwise.
inline TrainReport train(OtsModel& model, const SceneDataset& dataset,
                         const SceneDataset* eval_set, const SgdConfig& cfg, std::uint64_t seed,
                         int eval_threads = 1,
                         const std::function<void(int, const TrainReport&)>& on_epoch = {}) {
    cfg.validate();
    if (dataset.samples.empty()) throw UsageError("train: dataset is empty");
    dataset.validate();
    if (dataset.class_count() > model.config.classes) {
        throw UsageError("train: dataset has more classes than the model head");
    }

    auto params = model.params();
    SgdOptimizer optimizer(params);

    TrainReport report;
    report.seed = seed;
    report.sgd = cfg;
    {
        std::ostringstream echo;
        echo << "channels=" << model.config.channels << " objects=" << model.config.objects
             << " alphas=" << model.config.alphas_str()
             << " fusion=" << (model.config.fusion == Fusion::Concat ? "concat" : "sum")
             << " aggregator=" << aggregator_name(model.config.aggregator)
             << " width=" << model.aggregator.out_width << " classes=" << model.config.classes;
        report.config_echo = echo.str();
    }

    Rng rng(seed);
    std::vector<index_t> order(dataset.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<index_t>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        index_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            const double inv_batch = 1.0 / static_cast<double>(stop - start);
            zero_grads(params);
            for (std::size_t bi = start; bi < stop; ++bi) {
                const Sample& s = dataset.samples[static_cast<std::size_t>(order[bi])];
                Tape t;
                auto logit_var = model.logits(t, s.features.matrix);
                const Matrix& l = t.value(logit_var);
                int arg = 0;
                for (index_t i = 1; i < l.rows(); ++i) {
                    if (l(i, 0) > l(arg, 0)) arg = static_cast<int>(i);
                }
                if (arg == s.label) ++correct;
                auto loss = t.cross_entropy_with_logits(logit_var, s.label);
                loss_sum += t.value(loss)(0, 0);
                t.backward(t.scale(loss, inv_batch));
            }
            optimizer.step(params, cfg, epoch);
        }
        report.train_loss.push_back(loss_sum / static_cast<double>(order.size()));
        report.train_accuracy.push_back(static_cast<double>(correct) /
                                        static_cast<double>(order.size()));
        if (eval_set) {
            report.eval_accuracy.push_back(evaluate(model, *eval_set, eval_threads).overall);
        }
        if (on_epoch) on_epoch(epoch, report);
    }
    report.final_eval = evaluate(model, eval_set ? *eval_set : dataset, eval_threads);
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: every named param plus a plain-text config echo, stored in
// the tensor container format.

inline std::string encode_model_config(const ModelConfig& c) {
    std::ostringstream out;
    out << "channels=" << c.channels << "\n";
    out << "objects=" << c.objects << "\n";
    out << "alphas=" << c.alphas_str() << "\n";
    out << "fusion=" << (c.fusion == Fusion::Concat ? "concat" : "sum") << "\n";
    out << "aggregator=" << aggregator_name(c.aggregator) << "\n";
    out << "representation_width=" << c.representation_width << "\n";
    out << "classes=" << c.classes << "\n";
    out << "gram_bias=" << (c.gram_bias ? 1 : 0) << "\n";
    out << "gram_relu=" << (c.gram_relu ? 1 : 0) << "\n";
    return out.str();
}

inline ModelConfig decode_model_config(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "channels") c.channels = std::stoll(value);
        else if (key == "objects") c.objects = std::stoll(value);
        else if (key == "alphas") {
            c.alphas.clear();
            std::istringstream alist(value);
            std::string tok;
            while (std::getline(alist, tok, ',')) {
                if (!tok.empty()) c.alphas.push_back(Alpha::parse(tok));
            }
        } else if (key == "fusion") c.fusion = value == "sum" ? Fusion::Sum : Fusion::Concat;
        else if (key == "aggregator") c.aggregator = parse_aggregator(value);
        else if (key == "representation_width") c.representation_width = std::stoll(value);
        else if (key == "classes") c.classes = std::stoll(value);
        else if (key == "gram_bias") c.gram_bias = value == "1";
        else if (key == "gram_relu") c.gram_relu = value == "1";
        else throw FormatError("checkpoint config: unknown key '" + key + "'");
    }
    return c;
}

inline void save_checkpoint(const std::string& path, OtsModel& model) {
    std::vector<TensorRecord> records;
    const std::string config = encode_model_config(model.config);
    records.push_back(TensorRecord::from_bytes(
        "config", std::vector<std::uint8_t>(config.begin(), config.end())));
    for (Param* p : model.params()) {
        records.push_back(TensorRecord::from_matrix(p->name, p->value));
    }
    write_container(path, records);
}

inline OtsModel load_checkpoint(const std::string& path) {
    std::vector<TensorRecord> records = read_container(path);
    const TensorRecord* config_rec = nullptr;
    for (const auto& r : records) {
        if (r.name == "config") config_rec = &r;
    }
    if (!config_rec) throw FormatError("'" + path + "': checkpoint has no config record");
    const std::string text(config_rec->payload.begin(), config_rec->payload.end());
    OtsModel model = OtsModel::create(decode_model_config(text), /*seed=*/0);
    for (Param* p : model.params()) {
        const TensorRecord* rec = nullptr;
        for (const auto& r : records) {
            if (r.name == p->name) rec = &r;
        }
        if (!rec) throw FormatError("'" + path + "': checkpoint is missing param '" + p->name + "'");
        Matrix value = rec->to_matrix();
        if (!value.same_shape(p->value)) {
            throw FormatError("'" + path + "': param '" + p->name + "' has shape " +
                              value.shape_string() + ", expected " + p->value.shape_string());
        }
        p->value = std::move(value);
    }
    return model;
}

}  // namespace ots
