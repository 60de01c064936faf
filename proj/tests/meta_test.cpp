#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mta/errors.hpp"
#include "mta/meta.hpp"
#include "test_util.hpp"

namespace mta {
namespace {

// 4x4 grayscale inputs, three classes.
ArchitectureSpec tiny_msm() {
  ArchitectureSpec s;
  s.family = ArchFamily::UserDefined;
  s.num_classes = 3;
  s.input_shape = {4, 4, 1};
  apply_dataset_normalization(s, "mnist");
  s.layers = {{"conv", 2, 3}, {"relu"}, {"flatten"}, {"linear", 3}};
  return s;
}

ArchitectureSpec tiny_source(std::size_t hidden) {
  ArchitectureSpec s = tiny_msm();
  s.layers = {{"flatten"}, {"linear", hidden}, {"relu"}, {"linear", 3}};
  return s;
}

ExampleBatch tiny_batch(std::size_t n, std::uint64_t seed, double lo = 40.0, double hi = 215.0) {
  std::mt19937_64 rng(seed);
  ExampleBatch b{testing::random_tensor({n, 4, 4, 1}, rng, lo, hi), std::vector<int>(n), std::nullopt};
  for (std::size_t i = 0; i < n; ++i) b.labels[i] = static_cast<int>(i % 3);
  return b;
}

MetaTrainConfig tiny_config() {
  MetaTrainConfig c;
  c.msm_arch = tiny_msm();
  c.inner_steps = 2;
  c.batch_size = 4;
  c.alpha = 0.01;
  c.epochs = 2;
  c.eval_every = 3;
  c.eval_examples = 6;
  c.eval_steps = 2;
  c.eval_epsilon = 30;
  c.epsilon_c_init = 30;
  c.seed = 3;
  return c;
}

TEST(EpsilonCSchedule, StepsDownEveryDecayInterval) {
  const MetaTrainConfig c;
  EXPECT_EQ(epsilon_c_schedule(0, c), 1600.0);
  EXPECT_EQ(epsilon_c_schedule(3999, c), 1600.0);
  EXPECT_DOUBLE_EQ(epsilon_c_schedule(4000, c), 1440.0);
  EXPECT_DOUBLE_EQ(epsilon_c_schedule(8001, c), 1296.0);
  MetaTrainConfig fast = c;
  fast.epsilon_c_decay_every = 1000;
  EXPECT_DOUBLE_EQ(epsilon_c_schedule(2500, fast), 1296.0);
}

TEST(MetaTrainConfig, JsonRoundTripAndValidation) {
  MetaTrainConfig c = tiny_config();
  c.source_checkpoints = {"zoo/a.mtaw", "zoo/b.mtaw"};
  const nlohmann::json j = c;
  const MetaTrainConfig back = j.get<MetaTrainConfig>();
  EXPECT_EQ(back.msm_arch, c.msm_arch);
  EXPECT_EQ(back.source_checkpoints, c.source_checkpoints);
  EXPECT_EQ(back.inner_steps, 2u);
  EXPECT_EQ(back.epsilon_c_init, 30.0);
  EXPECT_EQ(nlohmann::json(back), j);

  MetaTrainConfig bad = c;
  bad.inner_steps = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.epsilon_c_decay = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.alpha = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"({"alpha": "fast"})").get<MetaTrainConfig>(), ConfigError);
}

TEST(MetaObjective, SecondOrderGradientMatchesFiniteDifferences) {
  const MetaTrainConfig config = tiny_config();
  const Classifier msm(tiny_msm(), 5);
  ASSERT_LE(msm.parameter_count(), 200u);
  const Classifier source(tiny_source(5), 6);
  const Classifier* sources[] = {&source};
  const ExampleBatch batch = tiny_batch(3, 7);
  const double eps_c = 30.0;

  const MetaObjective obj = meta_objective(msm, sources, batch, eps_c, config);
  Tensor ad_grad({msm.parameter_count()});
  std::size_t at = 0;
  for (const Tensor& g : obj.gradient) {
    std::copy_n(g.ptr(), g.size(), ad_grad.ptr() + at);
    at += g.size();
  }
  ASSERT_EQ(at, msm.parameter_count());

  Classifier probe = msm;
  auto J = [&](const Tensor& w) {
    probe.set_flat_parameters(w);
    return meta_objective(probe, sources, batch, eps_c, config).value;
  };
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> pick(0, msm.parameter_count() - 1);
  const Tensor w0 = msm.flat_parameters();
  for (int k = 0; k < 10; ++k) {
    const std::size_t i = pick(rng);
    const double fd = testing::central_difference(J, w0, i, 1e-3);
    EXPECT_TRUE(testing::close(ad_grad[i], fd, 1e-3, 1e-10)) << "coordinate " << i << " ad=" << ad_grad[i] << " fd=" << fd;
  }
}

TEST(MetaObjective, SignOnlyDirectionCarriesNoGradient) {
  MetaTrainConfig config = tiny_config();
  config.g1_weight = 0.0;
  config.gamma1 = 0.0;
  config.gamma2 = 0.01;
  const Classifier msm(tiny_msm(), 5);
  const Classifier source(tiny_source(5), 6);
  const Classifier* sources[] = {&source};
  const MetaObjective obj = meta_objective(msm, sources, tiny_batch(3, 7), 30.0, config);
  EXPECT_TRUE(std::isfinite(obj.value));
  for (const Tensor& g : obj.gradient) {
    for (double v : g.data()) ASSERT_EQ(v, 0.0);
  }
}

TEST(MetaObjective, ValueIsTheSumOfPerSourceMeanLosses) {
  const MetaTrainConfig config = tiny_config();
  const Classifier msm(tiny_msm(), 5);
  const Classifier a(tiny_source(5), 6), b(tiny_source(4), 8);
  const Classifier* sources[] = {&a, &b};
  const ExampleBatch batch = tiny_batch(4, 2);
  const MetaObjective obj = meta_objective(msm, sources, batch, 30.0, config);
  ASSERT_EQ(obj.source_loss.size(), 2u);
  EXPECT_NEAR(obj.value, obj.source_loss[0] + obj.source_loss[1], 1e-12);

  // Independent recount: the attacked batch scored by each source.
  AttackConfig ac;
  ac.epsilon_c = 30.0;
  ac.steps = config.inner_steps;
  ac.gamma1 = config.gamma1;
  ac.gamma2 = config.gamma2;
  ExampleBatch adv = batch;
  {
    ad::NoGradGuard guard;
    adv.images = customized_pgd(msm, batch, ac, false).value();
  }
  for (std::size_t s = 0; s < 2; ++s) {
    const Tensor logits = sources[s]->logits(adv.images);
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      double mx = -1e300, z = 0.0;
      for (std::size_t k = 0; k < 3; ++k) mx = std::max(mx, logits[i * 3 + k]);
      for (std::size_t k = 0; k < 3; ++k) z += std::exp(logits[i * 3 + k] - mx);
      loss += mx + std::log(z) - logits[i * 3 + batch.labels[i]];
    }
    EXPECT_NEAR(obj.source_loss[s], loss / double(batch.size()), 1e-10);
  }
}

TEST(MetaObjective, NonFiniteSourceIsNamed) {
  const MetaTrainConfig config = tiny_config();
  const Classifier msm(tiny_msm(), 5);
  const Classifier good(tiny_source(5), 6);
  Classifier broken(tiny_source(5), 7);
  Tensor w = broken.flat_parameters();
  w[0] = std::numeric_limits<double>::quiet_NaN();
  broken.set_flat_parameters(w);
  const Classifier* sources[] = {&good, &broken};
  try {
    meta_objective(msm, sources, tiny_batch(2, 1), 30.0, config);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("source 1"), std::string::npos) << e.what();
  }
}

TEST(MetaStep, ZeroLearningRateLeavesWeightsBitExact) {
  MetaTrainConfig config = tiny_config();
  config.alpha = 0.0;
  Classifier msm(tiny_msm(), 5);
  const Tensor before = msm.flat_parameters();
  const Classifier source(tiny_source(5), 6);
  const Classifier* sources[] = {&source};
  const MetaStepMetrics m = meta_step(msm, sources, tiny_batch(3, 7), 0, config);
  EXPECT_EQ(msm.flat_parameters(), before);
  EXPECT_GT(m.grad_norm, 0.0);
}

TEST(MetaStep, AscendsTheObjectiveAndLeavesSourcesAlone) {
  MetaTrainConfig config = tiny_config();
  config.alpha = 1e-4;
  Classifier msm(tiny_msm(), 5);
  const Classifier source(tiny_source(5), 6);
  const Tensor source_before = source.flat_parameters();
  const Classifier* sources[] = {&source};
  const ExampleBatch batch = tiny_batch(3, 7);
  const double before = meta_objective(msm, sources, batch, 30.0, config).value;
  const MetaStepMetrics m = meta_step(msm, sources, batch, 0, config);
  EXPECT_EQ(m.epsilon_c, 30.0);
  EXPECT_NEAR(m.loss_sum, before, 1e-12);
  EXPECT_GT(meta_objective(msm, sources, batch, 30.0, config).value, before);
  EXPECT_EQ(source.flat_parameters(), source_before);
}

TEST(MetaStep, UpdateIsClippedToTheGlobalNorm) {
  MetaTrainConfig config = tiny_config();
  config.alpha = 0.5;
  config.grad_clip = 1e-3;
  Classifier msm(tiny_msm(), 5);
  const Tensor before = msm.flat_parameters();
  const Classifier source(tiny_source(5), 6);
  const Classifier* sources[] = {&source};
  const MetaStepMetrics m = meta_step(msm, sources, tiny_batch(3, 7), 0, config);
  ASSERT_GT(m.grad_norm, config.grad_clip);
  const Tensor after = msm.flat_parameters();
  double norm = 0.0;
  for (std::size_t i = 0; i < after.size(); ++i) norm += (after[i] - before[i]) * (after[i] - before[i]);
  EXPECT_NEAR(std::sqrt(norm), config.alpha * config.grad_clip, 1e-12);
}

struct TinySetup {
  Classifier a{tiny_source(5), 6}, b{tiny_source(4), 8}, held_out{tiny_source(6), 9};
  MetaSources sources{{"src-a", "src-b"}, {&a, &b}};
  MetaTargets targets;
  ExampleBatch train = tiny_batch(10, 4);

  TinySetup() {
    targets.targets = {{"tgt", &held_out}};
    targets.eval_sets = {tiny_batch(6, 5)};
  }
};

TEST(TrainMsm, LogsEveryStepAndSnapshotsOnSchedule) {
  const TinySetup s;
  const MetaTrainConfig config = tiny_config();  // 3 batches x 2 epochs = 6 steps
  std::vector<std::size_t> seen;
  const MetaTrainResult r =
      train_msm(config, s.sources, s.train, s.targets, [&](const MetaLogRecord& rec) { seen.push_back(rec.iteration); });
  ASSERT_EQ(r.log.records.size(), 6u);
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  std::vector<std::size_t> snaps;
  for (const auto* rec : r.log.snapshots()) {
    snaps.push_back(rec->iteration);
    ASSERT_EQ(rec->eval_success->size(), 1u);
  }
  EXPECT_EQ(snaps, (std::vector<std::size_t>{0, 2, 5}));
  EXPECT_EQ(r.log.source_ids, s.sources.ids);
  EXPECT_EQ(r.log.target_ids, (std::vector<std::string>{"tgt"}));
}

TEST(TrainMsm, SameSeedSameSurrogateAndLog) {
  const TinySetup s;
  const MetaTrainConfig config = tiny_config();
  const MetaTrainResult a = train_msm(config, s.sources, s.train, s.targets);
  const MetaTrainResult b = train_msm(config, s.sources, s.train, s.targets);
  EXPECT_EQ(a.msm.flat_parameters(), b.msm.flat_parameters());
  EXPECT_EQ(a.log.to_csv("h"), b.log.to_csv("h"));
  MetaTrainConfig other = config;
  other.seed = 4;
  EXPECT_NE(train_msm(other, s.sources, s.train, s.targets).msm.flat_parameters(), a.msm.flat_parameters());
}

TEST(TrainMsm, FailureReportsTheIterationAndKeepsTheLastStableWeights) {
  TinySetup s;
  Tensor w = s.b.flat_parameters();
  w[0] = std::numeric_limits<double>::infinity();
  s.b.set_flat_parameters(w);
  Classifier stable(tiny_msm(), 0);
  try {
    train_msm(tiny_config(), s.sources, s.train, s.targets, {}, &stable);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
  }
  EXPECT_EQ(stable.flat_parameters(), Classifier(tiny_msm(), tiny_config().seed).flat_parameters());
}

TEST(MetaTrainLog, CsvRoundTrip) {
  MetaTrainLog log;
  log.source_ids = {"a", "b"};
  log.target_ids = {"t"};
  log.records = {{0, 1600, 1.25, {0.5, 0.75}, std::vector<double>{0.125}},
                 {1, 1600, 1.5, {0.625, 0.875}, std::nullopt},
                 {2, 1440, 2.0 / 3.0, {1.0 / 3.0, 1.0 / 3.0}, std::vector<double>{0.25}}};
  const std::string csv = log.to_csv("abc");
  const MetaTrainLog back = MetaTrainLog::from_csv(csv);
  EXPECT_EQ(back.source_ids, log.source_ids);
  EXPECT_EQ(back.target_ids, log.target_ids);
  ASSERT_EQ(back.records.size(), 3u);
  EXPECT_EQ(back.records[2].loss_sum, 2.0 / 3.0);
  EXPECT_FALSE(back.records[1].eval_success);
  EXPECT_EQ(back.snapshots().size(), 2u);
  EXPECT_EQ(back.to_csv("abc"), csv);
  EXPECT_THROW(MetaTrainLog::from_csv("iteration,foo\n"), FormatError);
}

}  // namespace
}  // namespace mta
