#include <gtest/gtest.h>

#include <sstream>

#include "eqprune/train.hpp"
#include "testing.hpp"

namespace eqprune {
namespace {

using testing::random_split;

Model<float> tiny_mlp(std::uint64_t seed) {
  Model<float> m(Arch::efficient_eq, {1, 2, 2});
  m.add(std::make_unique<Flatten<float>>());
  Rng rng(seed);
  Tensor<float> w({2, 4});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(rng.uniform(-0.5, 0.5));
  m.add(std::make_unique<Linear<float>>(w, Tensor<float>({2})));
  return m;
}

RotatedDataset two_points() {
  RotatedDataset d;
  Split s;
  s.images = Tensor<float>({2, 1, 2, 2}, std::vector<float>{1, 1, 0, 0, 0, 0, 1, 1});
  s.labels = {0, 1};
  s.rotations = {0, 0};
  d.train = d.val = d.test = s;
  return d;
}

TEST(TrainConfigTest, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lr = 0;
  EXPECT_NO_THROW(c.validate());
  c.lr = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.device = "cuda";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainConfigTest, Defaults) {
  const TrainConfig c;
  EXPECT_DOUBLE_EQ(c.lr, 0.01);
  EXPECT_DOUBLE_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(c.batch_size, 128u);
  EXPECT_EQ(c.max_epochs, 50u);
  const FineTuneConfig f;
  EXPECT_DOUBLE_EQ(f.trigger_drop, 0.02);
  EXPECT_DOUBLE_EQ(f.ft_lr, 0.001);
  EXPECT_DOUBLE_EQ(f.plateau_factor, 0.5);
  EXPECT_EQ(f.plateau_patience, 10u);
  EXPECT_DOUBLE_EQ(f.excellent_drop, 0.01);
  EXPECT_DOUBLE_EQ(f.acceptable_drop, 0.02);
  EXPECT_EQ(f.max_epochs, 50u);
}

TEST(FineTuneConfigTest, Validation) {
  FineTuneConfig f;
  f.excellent_drop = 0.03;
  EXPECT_THROW(f.validate(), ConfigError);
  f = FineTuneConfig{};
  f.plateau_factor = 1.0;
  EXPECT_THROW(f.validate(), ConfigError);
}

TEST(Train, ZeroLrKeepsParameters) {
  auto m = build_model<float>(Arch::efficient_eq, 1, 8);
  RotatedDataset d;
  d.train = random_split(16, 8, 2);
  d.val = random_split(8, 8, 3);
  const auto before = m.state();
  TrainConfig c;
  c.lr = 0;
  c.max_epochs = 2;
  c.batch_size = 8;
  train(m, d, c);
  for (auto& p : m.params()) {
    const auto* e = find_entry(before, p.name);
    ASSERT_NE(e, nullptr);
    EXPECT_EQ(std::get<std::vector<float>>(e->data), p.value->storage()) << p.name;
  }
}

TEST(Train, SeparableToySetReachesFullAccuracy) {
  auto m = tiny_mlp(4);
  const auto d = two_points();
  TrainConfig c;
  c.max_epochs = 50;
  c.batch_size = 2;
  c.stop_patience = 50;
  const auto metrics = train(m, d, c);
  EXPECT_DOUBLE_EQ(evaluate(m, d.train), 1.0);
  EXPECT_DOUBLE_EQ(metrics.best_val_acc, 1.0);
}

TEST(Train, Deterministic) {
  RotatedDataset d;
  d.train = random_split(24, 8, 5);
  d.val = random_split(8, 8, 6);
  TrainConfig c;
  c.max_epochs = 2;
  c.batch_size = 8;
  c.seed = 9;
  auto a = build_model<float>(Arch::efficient_eq, 7, 8);
  auto b = build_model<float>(Arch::efficient_eq, 7, 8);
  const auto ma = train(a, d, c), mb = train(b, d, c);
  EXPECT_EQ(metrics_summary(ma), metrics_summary(mb));
  EXPECT_EQ(metrics_jsonl(ma), metrics_jsonl(mb));
  EXPECT_EQ(a.state(), b.state());
}

TEST(Train, MetricsShape) {
  RotatedDataset d;
  d.train = random_split(16, 8, 10);
  d.val = random_split(8, 8, 11);
  TrainConfig c;
  c.max_epochs = 3;
  c.batch_size = 8;
  auto m = build_model<float>(Arch::efficient_eq, 12, 8);
  const auto r = train(m, d, c);
  ASSERT_EQ(r.epochs.size(), 3u);
  std::istringstream lines(metrics_jsonl(r));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("epoch").get<std::size_t>(), ++n);
    EXPECT_GE(j.at("val_acc").get<double>(), 0.0);
    EXPECT_LE(j.at("val_acc").get<double>(), 1.0);
  }
  EXPECT_EQ(n, 3u);
  EXPECT_FALSE(metrics_summary(r).contains("wall_seconds"));
}

TEST(Train, EmptySplit) {
  auto m = tiny_mlp(1);
  RotatedDataset d;
  EXPECT_THROW(train(m, d, TrainConfig{}), DataError);
  EXPECT_THROW(evaluate(m, Split{}), DataError);
}

TEST(Evaluate, ConstantLogitsFavorLowestClass) {
  Model<float> m(Arch::efficient_eq, {1, 2, 2});
  m.add(std::make_unique<Flatten<float>>());
  m.add(std::make_unique<Linear<float>>(4, 3));  // zero weights, zero bias
  auto s = random_split(9, 2, 13, 3);
  // labels cycle 0,1,2 -> a third are class 0
  EXPECT_NEAR(evaluate(m, s), 1.0 / 3.0, 1e-12);
  for (auto p : predict(m, s)) EXPECT_EQ(p, 0);
}

TEST(Evaluate, MatchesPerSampleLoop) {
  auto m = build_model<float>(Arch::efficient_eq, 14, 8);
  const auto s = random_split(37, 8, 15);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto logits = m.forward(s.batch<float>(i, 1), Mode::eval);
    std::size_t best = 0;
    for (std::size_t k = 1; k < 10; ++k)
      if (logits[k] > logits[best]) best = k;
    correct += static_cast<std::int32_t>(best) == s.labels[i];
  }
  EXPECT_EQ(evaluate(m, s, 16), static_cast<double>(correct) / 37.0);
}

TEST(Plateau, ImprovingSequenceKeepsLr) {
  PlateauScheduler s(0.001, 0.5, 10);
  for (int i = 0; i < 30; ++i) EXPECT_EQ(s.step(0.5 + 0.01 * i), 0.001);
}

TEST(Plateau, FlatElevenValuesHalveOnce) {
  PlateauScheduler s(0.001, 0.5, 10);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(s.step(0.9), 0.001);
  EXPECT_EQ(s.step(0.9), 0.0005);
  EXPECT_EQ(s.reductions(), 1u);
}

TEST(Plateau, HandTracedTwoHalvings) {
  PlateauScheduler s(0.001, 0.5, 10);
  std::vector<double> seq(11, 0.9);
  seq.push_back(0.95);
  seq.insert(seq.end(), 10, 0.95);
  for (double v : seq) s.step(v);
  EXPECT_EQ(s.reductions(), 2u);
  EXPECT_EQ(s.lr(), 0.00025);
}

TEST(Plateau, ThresholdIsAbsolute) {
  PlateauScheduler s(1.0, 0.5, 2, 1e-4);
  s.step(0.5);
  s.step(0.50005);  // below threshold: bad
  EXPECT_EQ(s.num_bad(), 1u);
  s.step(0.5002);
  EXPECT_EQ(s.num_bad(), 0u);
}

TEST(Controller, SkipWithinTrigger) {
  FineTuneController c(FineTuneConfig{}, 0.95);
  EXPECT_FALSE(c.begin(0.94));
  EXPECT_TRUE(c.finished());
  EXPECT_EQ(c.verdict(), Verdict::skip);
  EXPECT_EQ(c.epochs(), 0u);
}

TEST(Controller, TriggerThreshold) {
  FineTuneController at(FineTuneConfig{}, 0.5);
  EXPECT_FALSE(at.begin(0.5 - 0.015625));  // drop below trigger
  FineTuneController over(FineTuneConfig{}, 0.5);
  EXPECT_TRUE(over.begin(0.5 - 0.03125));
}

TEST(Controller, ExcellentExitsAtCrossingEpoch) {
  FineTuneController c(FineTuneConfig{}, 0.95);
  ASSERT_TRUE(c.begin(0.40));
  const std::vector<double> seq{0.6, 0.8, 0.9, 0.93, 0.945, 0.95};
  std::size_t k = 0;
  while (c.observe(seq[k])) ++k;
  EXPECT_EQ(c.epochs(), 5u);
  EXPECT_EQ(c.verdict(), Verdict::excellent);
  EXPECT_EQ(c.best_epoch(), 5u);
}

TEST(Controller, AcceptableAfterPatience) {
  FineTuneController c(FineTuneConfig{}, 0.95);
  ASSERT_TRUE(c.begin(0.5));
  std::size_t n = 0;
  while (c.observe(0.935)) ++n;
  // Best at epoch 1, then 20 epochs without improvement.
  EXPECT_EQ(c.epochs(), 21u);
  EXPECT_EQ(c.verdict(), Verdict::acceptable);
}

TEST(Controller, DegradedAtMaxEpochs) {
  FineTuneConfig cfg;
  cfg.stop_patience = 100;
  FineTuneController c(cfg, 0.95);
  ASSERT_TRUE(c.begin(0.5));
  double v = 0.6;
  while (c.observe(v)) v += 0.001;
  EXPECT_EQ(c.epochs(), 50u);
  EXPECT_EQ(c.verdict(), Verdict::degraded);
}

TEST(Controller, HalvingSchedule) {
  FineTuneController c(FineTuneConfig{}, 0.95);
  ASSERT_TRUE(c.begin(0.5));
  std::vector<double> lrs;
  for (int e = 0; e < 21; ++e) {
    lrs.push_back(c.lr());
    if (!c.observe(0.7)) break;
  }
  // Epochs 1..11 at 0.001, the 11th stagnant step halves, later ones follow.
  for (std::size_t e = 0; e < 11; ++e) EXPECT_EQ(lrs[e], 0.001) << e;
  EXPECT_EQ(lrs[11], 0.0005);
  EXPECT_EQ(lrs[20], 0.0005);
  EXPECT_EQ(c.lr(), 0.00025);
  for (std::size_t e = 1; e < lrs.size(); ++e) EXPECT_LE(lrs[e], lrs[e - 1]);
}

TEST(Controller, MisuseThrows) {
  FineTuneController c(FineTuneConfig{}, 0.9);
  EXPECT_THROW(c.observe(0.5), StateError);
  EXPECT_THROW(c.verdict(), StateError);
  c.begin(0.89);
  EXPECT_THROW(c.begin(0.89), StateError);
}

TEST(AdaptiveFinetune, SkipLeavesModelUnchanged) {
  auto m = tiny_mlp(3);
  const auto d = two_points();
  const double acc = evaluate(m, d.val);
  const auto before = m.state();
  const auto r = adaptive_finetune(m, acc, d, FineTuneConfig{});
  EXPECT_FALSE(r.triggered);
  EXPECT_EQ(r.verdict, Verdict::skip);
  EXPECT_TRUE(r.metrics.epochs.empty());
  EXPECT_EQ(m.state(), before);
}

TEST(AdaptiveFinetune, NeverWorseThanItsBest) {
  auto m = build_model<float>(Arch::efficient_eq, 20, 8);
  RotatedDataset d;
  d.train = random_split(32, 8, 21);
  d.val = random_split(16, 8, 22);
  FineTuneConfig cfg;
  cfg.max_epochs = 4;
  cfg.batch_size = 8;
  const auto r = adaptive_finetune(m, 1.0, d, cfg);
  ASSERT_TRUE(r.triggered);
  double best = r.initial_val_acc;
  for (const auto& e : r.metrics.epochs) best = std::max(best, e.val_acc);
  EXPECT_EQ(evaluate(m, d.val), best);
  EXPECT_EQ(r.final_val_acc, best);
  for (std::size_t i = 1; i < r.lr_schedule.size(); ++i) EXPECT_LE(r.lr_schedule[i], r.lr_schedule[i - 1]);
}

TEST(ConfigHash, StableAndSensitive) {
  TrainConfig a, b;
  EXPECT_EQ(config_hash(to_json(a)), config_hash(to_json(b)));
  b.seed = 1;
  EXPECT_NE(config_hash(to_json(a)), config_hash(to_json(b)));
  EXPECT_EQ(config_hash(to_json(a)).size(), 16u);
}

}  // namespace
}  // namespace eqprune
