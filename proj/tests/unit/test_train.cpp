#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "sedforge/inference.hpp"
#include "sedforge/metrics.hpp"
#include "sedforge/model_io.hpp"
#include "sedforge/train.hpp"

using namespace sedforge;

namespace {

nn::NetworkSpec make_spec(std::size_t F, std::size_t K, const std::string& layers,
                          std::uint64_t seed = 1) {
  nn::NetworkSpec s;
  s.input_bands = F;
  s.num_classes = K;
  s.layers = nn::parse_layers(layers, K);
  s.seed = seed;
  return s;
}

// Two classes with run-length activity; band k carries class k (+1/-1 plus
// noise), the remaining bands are noise.
LabeledRecording toy_recording(Rng& rng, std::size_t T, std::size_t F, const std::string& id) {
  LabeledRecording r;
  r.id = id;
  r.targets = EventRoll({"a", "b"}, T, 0.02);
  for (std::size_t k = 0; k < 2; ++k) {
    bool on = uniform(rng, 0, 1) < 0.5;
    for (std::size_t t = 0; t < T; ++t) {
      if (uniform(rng, 0, 1) < 0.05) on = !on;
      r.targets.activity.at(k, t) = on;
    }
  }
  r.features.values = Tensor<float>({F, T});
  std::normal_distribution<float> noise(0.0f, 0.3f);
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t t = 0; t < T; ++t)
      r.features.values.at(f, t) =
          noise(rng) + (f < 2 ? (r.targets.at(f, t) ? 1.0f : -1.0f) : 0.0f);
  r.features.normalized = true;
  return r;
}

std::vector<LabeledRecording> toy_split(std::uint64_t seed, std::size_t n, std::size_t T = 200,
                                        std::size_t F = 4) {
  Rng rng(seed);
  std::vector<LabeledRecording> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(toy_recording(rng, T, F, "r" + std::to_string(i)));
  return out;
}

TrainConfig toy_config() {
  TrainConfig c;
  c.sequence_length = 32;
  c.batch_size = 4;
  c.max_epochs = 8;
  c.patience = 100;
  c.adam.learning_rate = 1e-2;
  c.seed = 5;
  return c;
}

double frame_f1(const nn::Network<float>& net, const std::vector<LabeledRecording>& data,
                std::size_t L) {
  SegmentStats stats;
  for (const auto& rec : data) {
    const auto p = predict_matrix(net, rec.features.values, L);
    EventRoll pred(rec.targets.classes, rec.targets.num_frames(), 0.02);
    for (std::size_t i = 0; i < p.size(); ++i) pred.activity[i] = p[i] >= 0.5f;
    stats += accumulate_stats(segment_rolls(rec.targets, pred, 1));
  }
  return f1_from_stats(stats).f1;
}

void expect_same_state(const nn::NamedTensors<float>& a, const nn::NamedTensors<float>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].first, b[i].first);
    ASSERT_EQ(a[i].second.shape(), b[i].second.shape());
    for (std::size_t j = 0; j < a[i].second.size(); ++j)
      ASSERT_EQ(a[i].second[j], b[i].second[j]) << a[i].first << "[" << j << "]";
  }
}

}  // namespace

// ---- loss -------------------------------------------------------------------------

TEST(BceLoss, HalfProbabilityGivesLogTwo) {
  Tensor<double> p({2, 3, 4}, 0.5), y({2, 3, 4});
  Rng rng(1);
  for (auto& v : y.values()) v = uniform(rng, 0, 1) < 0.5;
  EXPECT_NEAR(bce_loss(p, y).loss, std::numbers::ln2, 1e-15);
}

TEST(BceLoss, MatchesDirectSumAndFiniteDifferences) {
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t B = 1 + uniform_index(rng, 3), K = 1 + uniform_index(rng, 3),
                      T = 1 + uniform_index(rng, 6);
    auto p = oracle::random_tensor(rng, {B, K, T}, 0.05, 0.95);
    Tensor<double> y({B, K, T});
    for (auto& v : y.values()) v = uniform(rng, 0, 1) < 0.5;
    std::vector<double> mask(B * T);
    for (auto& m : mask) m = uniform(rng, 0, 1) < 0.7;
    mask[0] = 1;
    double sum = 0, n = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t t = 0; t < T; ++t) {
          if (!mask[b * T + t]) continue;
          const double pi = p.at(b, k, t), yi = y.at(b, k, t);
          sum += -(yi * std::log(pi) + (1 - yi) * std::log(1 - pi));
          n += 1;
        }
    const auto r = bce_loss(p, y, mask);
    EXPECT_NEAR(r.loss, sum / n, 1e-12);
    EXPECT_EQ(r.weight, n);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i], h = 1e-7;
      p[i] = orig + h;
      const double up = bce_loss(p, y, mask).loss;
      p[i] = orig - h;
      const double down = bce_loss(p, y, mask).loss;
      p[i] = orig;
      EXPECT_NEAR(r.grad[i], (up - down) / (2 * h), 1e-6);
    }
  }
}

TEST(BceLoss, MaskedFramesDoNotContribute) {
  Tensor<double> p({1, 1, 3}), y({1, 1, 3});
  p[0] = 0.9, p[1] = 1e-12, p[2] = 0.2;
  y[0] = 1, y[1] = 1, y[2] = 0;
  const auto r = bce_loss(p, y, std::vector<double>{1, 0, 1});
  EXPECT_NEAR(r.loss, -(std::log(0.9) + std::log(0.8)) / 2, 1e-15);
  EXPECT_EQ(r.grad[1], 0.0);
  EXPECT_EQ(bce_loss(p, y, std::vector<double>{0, 0, 0}).loss, 0.0);
}

TEST(BceLoss, ClampsExtremeProbabilities) {
  Tensor<double> p({1, 2}), y({1, 2});
  p[0] = 0.0, p[1] = 1.0;
  y[0] = 1, y[1] = 0;
  const auto r = bce_loss(p, y);
  EXPECT_NEAR(r.loss, -std::log(kProbabilityClamp), 1e-9);
  EXPECT_TRUE(std::isfinite(r.grad[0]) && std::isfinite(r.grad[1]));
}

TEST(BceLoss, ShapeChecks) {
  EXPECT_THROW(bce_loss(Tensor<float>({1, 2, 3}), Tensor<float>({1, 3, 2})), ShapeError);
  EXPECT_THROW(bce_loss(Tensor<float>({1, 2, 3}), Tensor<float>({1, 2, 3}), {1, 1}), ShapeError);
}

// ---- Adam -------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesWeightsUnchanged) {
  Tensor<float> w({3}, 1.5f), g({3});
  std::vector<nn::ParamRef<float>> ps{{"w", &w, &g}};
  auto st = init_optimizer(ps);
  for (int i = 0; i < 5; ++i) adam_step(ps, st, {});
  for (float v : w.values()) EXPECT_EQ(v, 1.5f);
  EXPECT_EQ(st.step, 5u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Rng rng(3);
  Tensor<float> w({50}), g({50});
  for (auto& v : g.values()) v = static_cast<float>(uniform(rng, -10, 10));
  std::vector<nn::ParamRef<float>> ps{{"w", &w, &g}};
  auto st = init_optimizer(ps);
  AdamConfig cfg;
  cfg.learning_rate = 0.01;
  adam_step(ps, st, cfg);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_NEAR(w[i], g[i] > 0 ? -0.01 : 0.01, 1e-6);
}

TEST(Adam, MatchesReferenceRecursion) {
  Rng rng(4);
  Tensor<double> w({4}), g({4});
  std::vector<nn::ParamRef<double>> ps{{"w", &w, &g}};
  auto st = init_optimizer(ps);
  const AdamConfig cfg{0.05, 0.8, 0.95, 1e-8};
  std::vector<double> rw(4, 0.0), rm(4, 0.0), rv(4, 0.0);
  for (int step = 1; step <= 10; ++step) {
    for (std::size_t i = 0; i < 4; ++i) g[i] = uniform(rng, -1, 1);
    for (std::size_t i = 0; i < 4; ++i) {
      rm[i] = 0.8 * rm[i] + 0.2 * g[i];
      rv[i] = 0.95 * rv[i] + 0.05 * g[i] * g[i];
      rw[i] -= 0.05 * (rm[i] / (1 - std::pow(0.8, step))) /
               (std::sqrt(rv[i] / (1 - std::pow(0.95, step))) + 1e-8);
    }
    adam_step(ps, st, cfg);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w[i], rw[i], 1e-6);
  }
}

TEST(Adam, MinimizesAQuadratic) {
  Tensor<float> w({2}), g({2});
  w[0] = 3.0f, w[1] = -2.0f;
  std::vector<nn::ParamRef<float>> ps{{"w", &w, &g}};
  auto st = init_optimizer(ps);
  AdamConfig cfg;
  cfg.learning_rate = 0.05;
  for (int i = 0; i < 2000; ++i) {
    g[0] = 2 * (w[0] - 1.0f);
    g[1] = 2 * (w[1] + 0.5f);
    adam_step(ps, st, cfg);
  }
  EXPECT_NEAR(w[0], 1.0, 1e-2);
  EXPECT_NEAR(w[1], -0.5, 1e-2);
}

TEST(Adam, RejectsNonFiniteGradients) {
  Tensor<float> w({2}), g({2});
  g[1] = std::numeric_limits<float>::quiet_NaN();
  std::vector<nn::ParamRef<float>> ps{{"w", &w, &g}};
  auto st = init_optimizer(ps);
  EXPECT_THROW(adam_step(ps, st, {}), NumericError);
  EXPECT_EQ(w[0], 0.0f);
  EXPECT_EQ(st.step, 0u);
}

// ---- labels and configuration --------------------------------------------------------

TEST(WindowLabels, AnyActiveWithPartialTail) {
  Rng rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t T = 1 + uniform_index(rng, 40), L = 1 + uniform_index(rng, 9);
    const auto roll = oracle::random_roll(rng, 3, T, 0.1);
    const auto lab = window_labels(roll, L);
    ASSERT_EQ(lab.dim(1), oracle::segment_count(T, L));
    for (std::size_t w = 0; w < lab.dim(1); ++w) {
      const auto active = oracle::active_in_segment(roll, w, L);
      for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(lab.at(k, w) != 0, active.count(k) == 1);
    }
  }
  EXPECT_THROW(window_labels(oracle::random_roll(rng, 1, 4, 0.5), 0), ConfigError);
}

TEST(TrainConfigValidation, RejectsBadSettings) {
  const auto bad = [](auto mutate, bool tagging = false) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(validate(c, tagging), ConfigError);
  };
  bad([](TrainConfig& c) { c.sequence_length = 0; });
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.patience = 0; });
  bad([](TrainConfig& c) { c.adam.learning_rate = 0; });
  bad([](TrainConfig& c) { c.adam.beta1 = 1; });
  bad([](TrainConfig& c) { c.val_metric = "auc"; });
  bad([](TrainConfig& c) { c.val_metric = "eer"; });
  bad([](TrainConfig& c) { c.threshold = 1; });
  TrainConfig c;
  c.val_metric = "eer";
  EXPECT_NO_THROW(validate(c, true));
}

// ---- training loop -----------------------------------------------------------------

TEST(Training, ZeroEpochsReturnsInitialWeights) {
  nn::Network<float> net(make_spec(4, 2, "gru:4 dense:K:sigmoid", 3));
  const auto before = net.state();
  auto cfg = toy_config();
  cfg.max_epochs = 0;
  const auto log = train(net, toy_split(1, 2), toy_split(2, 1), cfg);
  EXPECT_TRUE(log.entries.empty());
  expect_same_state(before, net.state());
}

TEST(Training, LearnsASeparableProblem) {
  const auto tr = toy_split(10, 6), va = toy_split(11, 2), te = toy_split(12, 3);
  nn::Network<float> net(make_spec(4, 2, "dense:8:relu gru:6 dense:K:sigmoid", 4));
  auto cfg = toy_config();
  cfg.max_epochs = 25;
  const double before = frame_f1(net, te, cfg.sequence_length);
  const auto log = train(net, tr, va, cfg);
  const double after = frame_f1(net, te, cfg.sequence_length);
  EXPECT_GT(after, 0.95) << "before " << before;
  EXPECT_LT(log.entries.back().train_loss, log.entries.front().train_loss);
}

TEST(Training, TaggingLearnsWindowLabels) {
  const auto tr = toy_split(20, 6), va = toy_split(21, 2);
  nn::Network<float> net(make_spec(4, 2, "dense:8:relu gru:6 tmaxpool dense:K:sigmoid", 4));
  auto cfg = toy_config();
  cfg.max_epochs = 25;
  cfg.val_metric = "eer";
  const auto log = train(net, tr, va, cfg);
  double best = 1;
  for (const auto& e : log.entries) best = std::min(best, e.val_metric);
  EXPECT_LT(best, 0.1);
}

TEST(Training, EndsWithBestValidationWeights) {
  const auto tr = toy_split(30, 3), va = toy_split(31, 1);
  nn::Network<float> net(make_spec(4, 2, "gru:4 dense:K:sigmoid", 5));
  auto cfg = toy_config();
  cfg.max_epochs = 12;
  cfg.val_metric = "loss";
  TrainState st;
  const auto log = train(net, tr, va, cfg, {}, &st);
  ASSERT_FALSE(log.entries.empty());
  std::size_t best_epoch = 0;
  double best = 1e300;
  for (const auto& e : log.entries)
    if (e.val_metric < best) best = e.val_metric, best_epoch = e.epoch;
  EXPECT_EQ(st.best_epoch, best_epoch);
  EXPECT_EQ(log.entries[best_epoch - 1].event.find("best"), 0u);
  expect_same_state(net.state(), st.best_weights);
  EXPECT_NEAR(validation_metric(net, va, cfg), best, 1e-12);
}

TEST(Training, EarlyStoppingAfterPatienceEpochsWithoutImprovement) {
  const auto tr = toy_split(40, 2), va = toy_split(41, 1);
  nn::Network<float> net(make_spec(4, 2, "gru:3 dense:K:sigmoid", 6));
  auto cfg = toy_config();
  cfg.max_epochs = 200;
  cfg.patience = 3;
  cfg.adam.learning_rate = 0.3;  // noisy enough to stall quickly
  TrainState st;
  const auto log = train(net, tr, va, cfg, {}, &st);
  ASSERT_LT(log.entries.size(), 200u);
  EXPECT_TRUE(st.stopped);
  EXPECT_EQ(log.entries.size(), st.best_epoch + cfg.patience);
  EXPECT_NE(log.entries.back().event.find("stop"), std::string::npos);
  for (std::size_t i = st.best_epoch; i < log.entries.size(); ++i)
    EXPECT_EQ(log.entries[i].event.find("best"), std::string::npos);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  const auto tr = toy_split(50, 3), va = toy_split(51, 1);
  const auto spec = make_spec(4, 2, "dense:6:relu bn dropout:0.2 gru:4:0.2 dense:K:sigmoid", 7);
  auto cfg = toy_config();
  cfg.max_epochs = 6;

  nn::Network<float> straight(spec);
  TrainState full;
  train(straight, tr, va, cfg, {}, &full);

  nn::Network<float> first(spec);
  TrainState part = start_training(first);
  continue_training(first, part, tr, va, cfg, 3);
  ASSERT_EQ(part.epochs_done, 3u);
  // Round-trip through a checkpoint before continuing.
  Model m{first, FeatureConfig{}, {"a", "b"}, NormStats{}, cfg.sequence_length};
  auto cp = decode_checkpoint(encode_checkpoint(m, part));
  continue_training(cp.model.network, cp.state, tr, va, cfg, cfg.max_epochs);
  finish_training(cp.model.network, cp.state);

  EXPECT_EQ(cp.state.log, full.log);
  expect_same_state(cp.model.network.state(), straight.state());
}

TEST(Training, SameSeedIsBitwiseReproducible) {
  const auto tr = toy_split(60, 2), va = toy_split(61, 1);
  const auto spec = make_spec(4, 2, "dense:6:relu dropout:0.3 gru:4 dense:K:sigmoid", 8);
  auto cfg = toy_config();
  cfg.max_epochs = 3;
  nn::Network<float> a(spec), b(spec);
  EXPECT_EQ(train(a, tr, va, cfg), train(b, tr, va, cfg));
  expect_same_state(a.state(), b.state());
  cfg.seed = 6;
  nn::Network<float> c(spec);
  train(c, tr, va, cfg);
  EXPECT_NE(a.state()[0].second[0], c.state()[0].second[0]);
}

TEST(Training, NonFiniteLossRestoresBestWeightsAndThrows) {
  auto tr = toy_split(70, 2);
  const auto va = toy_split(71, 1);
  tr[1].features.values.at(0, 5) = std::numeric_limits<float>::quiet_NaN();
  nn::Network<float> net(make_spec(4, 2, "gru:3 dense:K:sigmoid", 9));
  const auto before = net.state();
  auto cfg = toy_config();
  EXPECT_THROW(train(net, tr, va, cfg), NumericError);
  expect_same_state(before, net.state());
}

TEST(Training, RejectsMismatchedData) {
  nn::Network<float> net(make_spec(5, 2, "gru:3 dense:K:sigmoid"));
  auto cfg = toy_config();
  EXPECT_THROW(train(net, toy_split(1, 1), toy_split(2, 1), cfg), ShapeError);
  nn::Network<float> ok(make_spec(4, 2, "gru:3 dense:K:sigmoid"));
  EXPECT_THROW(train(ok, {}, toy_split(2, 1), cfg), EmptyInputError);
  EXPECT_THROW(train(ok, toy_split(1, 1), {}, cfg), EmptyInputError);
}

TEST(Training, ShortRecordingsStillTrain) {
  // Recordings shorter than the sequence length become a single masked window.
  const auto tr = toy_split(80, 3, 10), va = toy_split(81, 1, 10);
  nn::Network<float> net(make_spec(4, 2, "gru:3 dense:K:sigmoid", 1));
  auto cfg = toy_config();
  cfg.max_epochs = 2;
  const auto log = train(net, tr, va, cfg);
  EXPECT_EQ(log.entries.size(), 2u);
  for (const auto& e : log.entries) EXPECT_TRUE(std::isfinite(e.train_loss));
}

TEST(TrainLogText, HasHeaderAndOneLinePerEpoch) {
  TrainLog log;
  log.entries.push_back({1, 0.5, 0.25, "best"});
  log.entries.push_back({2, 0.4, 0.2, ""});
  EXPECT_EQ(log.format(), "epoch\ttrain_loss\tval_metric\tevent\n1\t0.5\t0.25\tbest\n2\t0.4\t0.2\t-\n");
}
