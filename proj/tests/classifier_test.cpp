#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "ots/classifier.hpp"

namespace {

using ots::AggregatorKind;
using ots::Alpha;
using ots::Matrix;
using ots::ModelConfig;
using ots::ObjectFeatures;
using ots::OtsModel;
using ots::Param;
using ots::Rng;
using ots::Sample;
using ots::SceneDataset;
using ots::SgdConfig;
using ots::Tape;

ModelConfig tiny_config(ots::index_t channels = 8, ots::index_t objects = 4,
                        ots::index_t width = 16, ots::index_t classes = 2) {
    ModelConfig cfg;
    cfg.channels = channels;
    cfg.objects = objects;
    cfg.representation_width = width;
    cfg.classes = classes;
    return cfg;
}

SceneDataset orthogonal_two_class_dataset() {
    SceneDataset ds;
    ds.channel_count = 8;
    ds.object_count = 4;
    ds.class_names = {"a", "b"};
    for (int label = 0; label < 2; ++label) {
        Sample s;
        s.label = label;
        s.features.matrix = Matrix(8, 4);
        s.features.present.assign(4, 0);
        // class 0 lights object 0 with an all-ones column, class 1 lights
        // object 1 with an alternating-sign column: orthogonal signatures
        for (ots::index_t c = 0; c < 8; ++c) {
            s.features.matrix(c, label) = label == 0 ? 1.0 : (c % 2 == 0 ? 1.0 : -1.0);
        }
        s.features.present[static_cast<std::size_t>(label)] = 1;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

TEST(ForwardLogits, ZeroInputZeroBiasGivesUniformSoftmax) {
    auto model = OtsModel::create(tiny_config(8, 4, 16, 7), 5);
    ObjectFeatures x;
    x.matrix = Matrix(8, 4);
    x.present.assign(4, 0);
    Tape t;
    auto logits = ots::forward_logits(t, model, x);
    const Matrix& l = t.value(logits);
    ASSERT_EQ(l.rows(), 7);
    ASSERT_EQ(l.cols(), 1);
    for (ots::index_t i = 0; i < 7; ++i) EXPECT_EQ(l(i, 0), 0.0);
    Matrix p = softmax_cols(l);
    for (ots::index_t i = 0; i < 7; ++i) EXPECT_NEAR(p(i, 0), 1.0 / 7.0, 1e-15);
}

TEST(ForwardLogits, HeadShapeForBothClassSettings) {
    Rng rng(60);
    for (ots::index_t k : {7, 14}) {
        auto model = OtsModel::create(tiny_config(8, 4, 16, k), 6);
        Matrix x = rng.uniform_matrix(8, 4, -1, 1);
        Tape t;
        const Matrix& l = t.value(model.logits(t, x));
        EXPECT_EQ(l.rows(), k);
        EXPECT_EQ(l.cols(), 1);
        Matrix p = softmax_cols(l);
        double sum = 0.0;
        for (ots::index_t i = 0; i < k; ++i) sum += p(i, 0);
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(ForwardLogits, ShapeMismatchIsError) {
    auto model = OtsModel::create(tiny_config(), 7);
    Tape t;
    EXPECT_THROW(model.logits(t, Matrix(8, 5)), ots::ShapeError);
    EXPECT_THROW(model.logits(t, Matrix(9, 4)), ots::ShapeError);
}

TEST(CrossEntropy, UniformLogitsSevenClasses) {
    Tape t;
    auto loss = ots::cross_entropy(t, t.input(Matrix(7, 1)), 3);
    EXPECT_NEAR(t.value(loss)(0, 0), std::log(7.0), 1e-15);
}

TEST(CrossEntropy, ExtremeLogitsStayFinite) {
    Tape t;
    auto loss = ots::cross_entropy(t, t.input(Matrix::from_rows({{10.0}, {-10.0}})), 0);
    const double v = t.value(loss)(0, 0);
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, 2.0611536181902037e-9, 1e-15);
}

TEST(CrossEntropy, LabelOutOfRangeIsUsageError) {
    Tape t;
    auto logits = t.input(Matrix(3, 1));
    EXPECT_THROW(ots::cross_entropy(t, logits, 3), ots::UsageError);
    EXPECT_THROW(ots::cross_entropy(t, logits, -1), ots::UsageError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferenceTightly) {
    Rng rng(61);
    Param logits(rng.uniform_matrix(6, 1, -2, 2), "logits");
    Param* params[] = {&logits};
    ots::GradcheckOptions opt;
    opt.step = 1e-6;
    auto report = ots::gradcheck(
        [&](Tape& t) { return t.cross_entropy_with_logits(t.use(logits), 2); }, params, opt);
    EXPECT_LT(report.max_rel_err, 1e-8);
}

TEST(Sgd, LearningRateSchedule) {
    SgdConfig cfg;
    EXPECT_DOUBLE_EQ(ots::lr_at(cfg, 0), 0.1);
    EXPECT_DOUBLE_EQ(ots::lr_at(cfg, 9), 0.1);
    EXPECT_NEAR(ots::lr_at(cfg, 10), 0.01, 1e-15);
    EXPECT_NEAR(ots::lr_at(cfg, 39), 1e-4, 1e-16);
    for (int e = 1; e < 40; ++e) {
        EXPECT_LE(ots::lr_at(cfg, e), ots::lr_at(cfg, e - 1));
        if (e % 10 != 0) EXPECT_EQ(ots::lr_at(cfg, e), ots::lr_at(cfg, e - 1));
    }
}

TEST(Sgd, ZeroGradZeroVelocityNoDecayIsNoOp) {
    Param p(Matrix::constant(2, 2, 1.25), "p");
    Param* params[] = {&p};
    ots::SgdOptimizer opt(params);
    SgdConfig cfg;
    cfg.weight_decay = 0.0;
    p.zero_grad();
    opt.step(params, cfg, 0);
    for (ots::index_t i = 0; i < p.value.size(); ++i) EXPECT_EQ(p.value.data()[i], 1.25);
}

TEST(Sgd, MatchesScalarMomentumRecurrenceExactly) {
    // hand-rolled recurrence oracle on one scalar
    const double lr = 0.1, mu = 0.9, wd = 0.01;
    double x = 1.0, v = 0.0;
    const double g1 = 0.5, g2 = -0.25;
    v = mu * v + g1 + wd * x;
    const double x1 = x - lr * v;
    v = mu * v + g2 + wd * x1;
    const double x2 = x1 - lr * v;

    Param p(Matrix::constant(1, 1, 1.0), "p");
    Param* params[] = {&p};
    ots::SgdOptimizer opt(params);
    SgdConfig cfg;
    cfg.lr0 = lr;
    cfg.momentum = mu;
    cfg.weight_decay = wd;
    p.grad(0, 0) = g1;
    opt.step(params, cfg, 0);
    EXPECT_EQ(p.value(0, 0), x1);
    p.grad(0, 0) = g2;
    opt.step(params, cfg, 0);
    EXPECT_EQ(p.value(0, 0), x2);
}

TEST(Sgd, DecayExemptParamsSkipWeightDecay) {
    Param gate(Matrix::constant(1, 1, 2.0), "gate", /*decay_exempt=*/true);
    Param weight(Matrix::constant(1, 1, 2.0), "weight");
    Param* params[] = {&gate, &weight};
    ots::SgdOptimizer opt(params);
    SgdConfig cfg;
    cfg.lr0 = 0.5;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.1;
    gate.zero_grad();
    weight.zero_grad();
    opt.step(params, cfg, 0);
    EXPECT_EQ(gate.value(0, 0), 2.0);                 // no decay
    EXPECT_EQ(weight.value(0, 0), 2.0 - 0.5 * 0.2);  // decays toward zero
}

TEST(Train, SeparableTwoSampleTaskFitsWithinFiveEpochs) {
    auto model = OtsModel::create(tiny_config(), 8);
    SceneDataset ds = orthogonal_two_class_dataset();
    SgdConfig cfg;
    cfg.epochs = 5;
    auto report = ots::train(model, ds, nullptr, cfg, 9);
    EXPECT_EQ(report.train_accuracy.back(), 1.0);
    EXPECT_LT(report.train_loss.back(), report.train_loss.front());  // strict decrease
    EXPECT_EQ(report.final_eval.overall, 1.0);
}

TEST(Train, EmptyDatasetIsUsageError) {
    auto model = OtsModel::create(tiny_config(), 10);
    SceneDataset empty;
    empty.class_names = {"a", "b"};
    empty.channel_count = 8;
    empty.object_count = 4;
    SgdConfig cfg;
    EXPECT_THROW(ots::train(model, empty, nullptr, cfg, 1), ots::UsageError);
}

TEST(Train, IdenticalSeedsGiveBitwiseIdenticalReports) {
    SceneDataset ds;
    Rng rng(62);
    ds.channel_count = 8;
    ds.object_count = 4;
    ds.class_names = {"a", "b", "c"};
    for (int i = 0; i < 12; ++i) {
        Sample s;
        s.label = i % 3;
        s.features.matrix = rng.uniform_matrix(8, 4, -1, 1);
        s.features.present.assign(4, 1);
        ds.samples.push_back(std::move(s));
    }
    SgdConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 5;

    auto m1 = OtsModel::create(tiny_config(8, 4, 16, 3), 11);
    auto r1 = ots::train(m1, ds, &ds, cfg, 13);
    auto m2 = OtsModel::create(tiny_config(8, 4, 16, 3), 11);
    auto r2 = ots::train(m2, ds, &ds, cfg, 13);
    EXPECT_EQ(r1.to_table(), r2.to_table());

    // a different training seed shuffles differently
    auto m3 = OtsModel::create(tiny_config(8, 4, 16, 3), 11);
    auto r3 = ots::train(m3, ds, &ds, cfg, 14);
    EXPECT_NE(r1.to_table(), r3.to_table());
}

TEST(Evaluate, PerfectAndConstantPredictors) {
    // constant predictor: zero head makes every logit equal, argmax is 0
    auto model = OtsModel::create(tiny_config(8, 4, 16, 7), 12);
    model.head_w.value.fill(0.0);
    model.head_b.value.fill(0.0);
    SceneDataset ds;
    Rng rng(63);
    ds.channel_count = 8;
    ds.object_count = 4;
    for (int k = 0; k < 7; ++k) ds.class_names.push_back("c" + std::to_string(k));
    for (int i = 0; i < 21; ++i) {
        Sample s;
        s.label = i % 7;
        s.features.matrix = rng.uniform_matrix(8, 4, -1, 1);
        s.features.present.assign(4, 1);
        ds.samples.push_back(std::move(s));
    }
    auto r = ots::evaluate(model, ds);
    EXPECT_NEAR(r.overall, 1.0 / 7.0, 1e-15);
    EXPECT_EQ(r.per_class[0], 1.0);
    for (std::size_t c = 1; c < 7; ++c) EXPECT_EQ(r.per_class[c], 0.0);

    // perfect predictor: evaluate the dataset the model was overfit to
    auto fit = OtsModel::create(tiny_config(), 13);
    SceneDataset two = orthogonal_two_class_dataset();
    SgdConfig cfg;
    cfg.epochs = 12;
    ots::train(fit, two, nullptr, cfg, 14);
    auto rp = ots::evaluate(fit, two);
    for (double acc : rp.per_class) EXPECT_EQ(acc, 1.0);
    EXPECT_EQ(rp.class_mean, 1.0);
}

TEST(Evaluate, MatchesHandTalliedConfusionOnTwentySamples) {
    auto model = OtsModel::create(tiny_config(8, 4, 16, 3), 15);
    SceneDataset ds;
    Rng rng(64);
    ds.channel_count = 8;
    ds.object_count = 4;
    ds.class_names = {"a", "b", "c"};
    for (int i = 0; i < 20; ++i) {
        Sample s;
        s.label = static_cast<int>(rng.below(3));
        s.features.matrix = rng.uniform_matrix(8, 4, -2, 2);
        s.features.present.assign(4, 1);
        ds.samples.push_back(std::move(s));
    }
    // independent tally: per-sample argmax predictions counted by hand
    std::vector<int> total(3, 0), correct(3, 0);
    for (const auto& s : ds.samples) {
        Tape t(false);
        const Matrix& l = t.value(model.logits(t, s.features.matrix));
        int arg = 0;
        for (ots::index_t i = 1; i < 3; ++i) {
            if (l(i, 0) > l(arg, 0)) arg = static_cast<int>(i);
        }
        ++total[static_cast<std::size_t>(s.label)];
        if (arg == s.label) ++correct[static_cast<std::size_t>(s.label)];
    }
    auto r = ots::evaluate(model, ds);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(r.class_total[c], total[c]);
        EXPECT_EQ(r.class_correct[c], correct[c]);
        if (total[c] > 0) {
            EXPECT_EQ(r.per_class[c], static_cast<double>(correct[c]) / total[c]);
        }
    }
}

TEST(Evaluate, ShardedEvaluationMatchesSingleThread) {
    auto model = OtsModel::create(tiny_config(8, 4, 16, 3), 16);
    SceneDataset ds;
    Rng rng(65);
    ds.channel_count = 8;
    ds.object_count = 4;
    ds.class_names = {"a", "b", "c"};
    for (int i = 0; i < 17; ++i) {
        Sample s;
        s.label = i % 3;
        s.features.matrix = rng.uniform_matrix(8, 4, -1, 1);
        s.features.present.assign(4, 1);
        ds.samples.push_back(std::move(s));
    }
    auto single = ots::evaluate(model, ds, 1);
    auto sharded = ots::evaluate(model, ds, 3);
    EXPECT_EQ(single.overall, sharded.overall);
    EXPECT_EQ(single.class_correct, sharded.class_correct);
    EXPECT_EQ(single.class_total, sharded.class_total);
}

TEST(Evaluate, PredictionInvariantToUniformLogitShift) {
    auto model = OtsModel::create(tiny_config(8, 4, 16, 5), 17);
    Rng rng(66);
    std::vector<Matrix> inputs;
    for (int i = 0; i < 8; ++i) inputs.push_back(rng.uniform_matrix(8, 4, -1, 1));
    std::vector<int> before;
    for (const auto& x : inputs) before.push_back(ots::predict(model, x));
    for (ots::index_t i = 0; i < 5; ++i) model.head_b.value(i, 0) += 3.7;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        EXPECT_EQ(ots::predict(model, inputs[i]), before[i]);
    }
}

TEST(EndToEnd, GradcheckThroughFullPipeline) {
    // attention stack -> aggregator -> head -> cross-entropy at the small
    // reference dimensions
    ModelConfig cfg = tiny_config(32, 12, 24, 3);
    auto model = OtsModel::create(cfg, 18);
    Rng rng(67);
    for (auto& b : model.oam.blocks) b.gamma.value(0, 0) = rng.uniform(0.2, 0.8);
    Matrix x = rng.uniform_matrix(32, 12, -1, 1);
    auto params = model.params();
    auto report = ots::gradcheck(
        [&](Tape& t) { return t.cross_entropy_with_logits(model.logits(t, x), 1); },
        params);
    EXPECT_LT(report.max_rel_err, 1e-5);
}

TEST(EndToEnd, GradcheckThroughPoolAndFcAggregators) {
    Rng rng(68);
    Matrix x = rng.uniform_matrix(16, 5, -1, 1);
    for (auto kind : {AggregatorKind::MaxAvgPool, AggregatorKind::FlattenLinear}) {
        ModelConfig cfg = tiny_config(16, 5, 12, 3);
        cfg.aggregator = kind;
        auto model = OtsModel::create(cfg, 19);
        for (auto& b : model.oam.blocks) b.gamma.value(0, 0) = 0.5;
        auto params = model.params();
        auto report = ots::gradcheck(
            [&](Tape& t) { return t.cross_entropy_with_logits(model.logits(t, x), 2); },
            params);
        EXPECT_LT(report.max_rel_err, 1e-5) << aggregator_name(kind);
    }
}

TEST(Checkpoint, RoundTripPreservesLogitsAndAccuracy) {
    auto model = OtsModel::create(tiny_config(8, 4, 16, 2), 20);
    SceneDataset ds = orthogonal_two_class_dataset();
    SgdConfig cfg;
    cfg.epochs = 3;
    ots::train(model, ds, nullptr, cfg, 21);

    const std::string path = testing::TempDir() + "/ckpt_roundtrip.otsf";
    ots::save_checkpoint(path, model);
    auto restored = ots::load_checkpoint(path);

    EXPECT_EQ(restored.config.channels, 8);
    EXPECT_EQ(restored.config.classes, 2);
    for (const auto& s : ds.samples) {
        Tape t1(false), t2(false);
        const Matrix& a = t1.value(model.logits(t1, s.features.matrix));
        const Matrix& b = t2.value(restored.logits(t2, s.features.matrix));
        EXPECT_LE(max_abs_diff(a, b), 1e-12);
    }
    EXPECT_EQ(ots::evaluate(model, ds).overall, ots::evaluate(restored, ds).overall);
    std::remove(path.c_str());
}

TEST(Checkpoint, MissingParamIsFormatError) {
    auto model = OtsModel::create(tiny_config(8, 4, 16, 2), 22);
    const std::string path = testing::TempDir() + "/ckpt_missing.otsf";
    std::vector<ots::TensorRecord> records;
    const std::string config = ots::encode_model_config(model.config);
    records.push_back(ots::TensorRecord::from_bytes(
        "config", std::vector<std::uint8_t>(config.begin(), config.end())));
    ots::write_container(path, records);
    EXPECT_THROW(ots::load_checkpoint(path), ots::FormatError);
    std::remove(path.c_str());
}

}  // namespace
