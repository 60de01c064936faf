#include <gtest/gtest.h>

#include "mta/dataset.hpp"
#include "mta/errors.hpp"
#include "mta/evaluator.hpp"
#include "mta/train.hpp"
#include "test_util.hpp"

namespace mta {
namespace {

ArchitectureSpec small_cnn(std::vector<std::size_t> widths) {
  ArchitectureSpec s;
  s.family = ArchFamily::PlainCnn;
  s.block_widths = std::move(widths);
  apply_dataset_normalization(s, "mnist-5k");
  return s;
}

// Two briefly trained classifiers and a pool of held-out images, built once.
struct Fixture {
  Classifier source{small_cnn({4, 8}), 1};
  Classifier target{small_cnn({6}), 2};
  ExampleBatch pool;

  Fixture() {
    const Dataset train = load_dataset("mnist-5k", Split::Train, MTA_TEST_DATA_DIR).subset(800, 3);
    pool = load_dataset("mnist-5k", Split::Test, MTA_TEST_DATA_DIR).subset(120, 3).examples;
    TrainRecipe r;
    r.epochs = 2;
    r.batch_size = 32;
    train_classifier(source, train.examples, pool, r);
    train_classifier(target, train.examples, pool, r);
  }
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

EvalSettings settings(double epsilon, std::size_t steps, std::size_t n = 40) {
  EvalSettings s;
  s.attack.epsilon = epsilon;
  s.attack.steps = steps;
  s.n_examples = n;
  s.seed = 11;
  s.chunk = 16;
  return s;
}

std::size_t recount(const Classifier& target, const ExampleBatch& adv, bool targeted) {
  const std::vector<int> pred = target.predict(adv.images);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    hits += targeted ? pred[i] == (*adv.target_labels)[i] : pred[i] != adv.labels[i];
  }
  return hits;
}

TEST(FilterCorrect, KeepsExactlyTheCorrectlyClassifiedRows) {
  const auto& f = fx();
  const ExampleBatch kept = filter_correct(f.target, f.pool);
  const std::vector<int> all_pred = f.target.predict(f.pool.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < all_pred.size(); ++i) correct += all_pred[i] == f.pool.labels[i];
  EXPECT_EQ(kept.size(), correct);
  EXPECT_GT(kept.size(), 0u);
  EXPECT_EQ(f.target.predict(kept.images), kept.labels);
}

TEST(LogitEnsemble, IsTheMeanOfMemberLogits) {
  const auto& f = fx();
  const LogitEnsemble ens({&f.source, &f.target});
  const Tensor x = f.pool.slice(0, 5).images;
  Tensor out;
  {
    ad::NoGradGuard guard;
    out = ens.forward(ad::Var(x)).value();
  }
  const Tensor a = f.source.logits(x), b = f.target.logits(x);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], 0.5 * (a[i] + b[i]), 1e-12);
  const Classifier* members[] = {&f.source, &f.target};
  EXPECT_LE(max_abs_diff(ensemble_logits(members, x), out), 1e-12);
  EXPECT_THROW(LogitEnsemble({}), ConfigError);
  ArchitectureSpec other = small_cnn({4});
  other.num_classes = 3;
  const Classifier three(other, 1);
  EXPECT_THROW(LogitEnsemble({&f.source, &three}), ConfigError);
}

TEST(NextClassTargets, WrapsAround) {
  const std::vector<int> y{0, 9, 3};
  EXPECT_EQ(next_class_targets(y, 10), (std::vector<int>{1, 0, 4}));
}

TEST(EvaluationSet, SeededFilteredAndCapped) {
  const auto& f = fx();
  const Target t{"tgt", &f.target};
  const ExampleBatch a = evaluation_set(t, f.pool, settings(15, 10, 30));
  const ExampleBatch b = evaluation_set(t, f.pool, settings(15, 10, 30));
  EXPECT_EQ(a.size(), 30u);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(f.target.predict(a.images), a.labels);
  EXPECT_FALSE(a.target_labels);
  EvalSettings targeted = settings(15, 10, 30);
  targeted.attack.targeted = true;
  const ExampleBatch c = evaluation_set(t, f.pool, targeted);
  ASSERT_TRUE(c.target_labels);
  EXPECT_EQ(*c.target_labels, next_class_targets(c.labels, 10));
  EXPECT_EQ(evaluation_set(t, f.pool, settings(15, 10, 100000)).size(), filter_correct(f.target, f.pool).size());
}

TEST(EvaluateCell, SuccessRateMatchesAnIndependentRecount) {
  const auto& f = fx();
  const Target t{"tgt", &f.target};
  const Surrogate s{"src", &f.source};
  for (bool targeted : {false, true}) {
    EvalSettings es = settings(40, 5);
    es.attack.targeted = targeted;
    const ExampleBatch set = evaluation_set(t, f.pool, es);
    const TransferRow row = evaluate_cell(s, t, set, es);
    const ExampleBatch adv = pgd(f.source, set, es.attack);
    EXPECT_EQ(row.successes, recount(f.target, adv, targeted));
    EXPECT_DOUBLE_EQ(row.success_rate, double(row.successes) / double(set.size()));
    EXPECT_EQ(row.n, set.size());
    EXPECT_EQ(row.attack, targeted ? "pgd-targeted" : "pgd");
    EXPECT_EQ(row.epsilon, 40.0);
    EXPECT_EQ(row.t_v, 5u);
    if (targeted) {
      // Landing on the target class implies leaving the true class.
      EXPECT_LE(row.successes, recount(f.target, adv, false));
    }
  }
}

TEST(EvaluateCell, ZeroBudgetNeverSucceeds) {
  const auto& f = fx();
  const Target t{"tgt", &f.target};
  const Surrogate s{"src", &f.source};
  EvalSettings es = settings(0, 3);
  const TransferRow row = evaluate_cell(s, t, evaluation_set(t, f.pool, es), es);
  EXPECT_EQ(row.successes, 0u);
}

TEST(EvaluateCell, WhiteBoxAttackBeatsChanceOnItsOwnModel) {
  const auto& f = fx();
  const Target t{"tgt", &f.target};
  const Surrogate s{"tgt", &f.target};
  EvalSettings es = settings(60, 10);
  const TransferRow row = evaluate_cell(s, t, evaluation_set(t, f.pool, es), es);
  EXPECT_GT(row.success_rate, 0.5);
}

TEST(EvaluateCell, GradientsThroughATargetAreRejected) {
  const auto& f = fx();
  const Target t{"tgt", &f.target};
  const LogitEnsemble leaky({&f.source, &f.target});
  const Surrogate s{"leaky", &leaky};
  EvalSettings es = settings(15, 2, 8);
  EXPECT_THROW(evaluate_cell(s, t, evaluation_set(t, f.pool, es), es), Error);
}

TEST(EvaluateCell, RejectsIdsThatBreakTheCsv) {
  const auto& f = fx();
  const Target t{"tgt", &f.target};
  const Surrogate s{"a,b", &f.source};
  EvalSettings es = settings(15, 2, 8);
  EXPECT_THROW(evaluate_cell(s, t, evaluation_set(t, f.pool, es), es), ConfigError);
}

TEST(TransferEval, CoversEveryPairInOrderAndIsDeterministic) {
  const auto& f = fx();
  const LogitEnsemble ens({&f.source});
  const std::vector<Surrogate> surs{{"src", &f.source}, {"ens", &ens}};
  const std::vector<Target> tgts{{"tgt", &f.target}, {"tgt-again", &f.target}};
  EvalSettings es = settings(20, 3, 20);
  es.method = AttackMethod::MomentumPgd;
  const TransferReport a = transfer_eval(surs, tgts, f.pool, es);
  const TransferReport b = transfer_eval(surs, tgts, f.pool, es);
  ASSERT_EQ(a.rows.size(), 4u);
  EXPECT_EQ(a.rows, b.rows);
  EXPECT_EQ(a.rows[1].surrogate, "ens");
  EXPECT_EQ(a.rows[2].target, "tgt-again");
  EXPECT_EQ(a.rows[0].attack, "mpgd");
  const TransferReport t = targeted_eval(surs, tgts, f.pool, es);
  EXPECT_EQ(t.rows[0].attack, "mpgd-targeted");
}

TEST(Sweep, VariesOneAxisAtATime) {
  const auto& f = fx();
  const std::vector<Target> tgts{{"tgt", &f.target}};
  const EvalSettings es = settings(20, 3, 10);
  const std::vector<double> tv{1, 4};
  const TransferReport r = sweep(SweepAxis::Tv, tv, [&](double) { return std::vector<Surrogate>{{"src", &f.source}}; },
                                 tgts, f.pool, es);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].t_v, 1u);
  EXPECT_EQ(r.rows[1].t_v, 4u);
  EXPECT_EQ(r.rows[1].epsilon, 20.0);
  const std::vector<double> eps{5, 25};
  const TransferReport e = sweep(SweepAxis::Epsilon, eps,
                                 [&](double) { return std::vector<Surrogate>{{"src", &f.source}}; }, tgts, f.pool, es);
  EXPECT_EQ(e.rows[1].epsilon, 25.0);
  EXPECT_EQ(e.rows[1].t_v, 3u);
  const std::vector<double> bad{1.5};
  EXPECT_THROW(sweep(SweepAxis::Tv, bad, [&](double) { return std::vector<Surrogate>{{"src", &f.source}}; }, tgts,
                     f.pool, es),
               ConfigError);
  EXPECT_EQ(parse_sweep_axis(sweep_axis_name(SweepAxis::TtCheckpoints)), SweepAxis::TtCheckpoints);
}

TransferReport sample_report() {
  TransferReport r;
  r.seed = 5;
  r.config_hash = "00ff00ff00ff00ff";
  r.timestamp = "2026-01-01T00:00:00Z";
  r.rows = {{"pgd", "msm", "tgt-a", 15.0, 10, 200, 37, 0.185}, {"pgd", "ensemble", "tgt-a", 15.0, 10, 200, 20, 0.1},
            {"di-pgd-targeted", "msm", "tgt-b", 2.5, 7, 3, 1, 1.0 / 3.0}};
  return r;
}

TEST(TransferReport, CsvRoundTrip) {
  const TransferReport r = sample_report();
  const std::string csv = r.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "# config_hash=00ff00ff00ff00ff");
  const TransferReport back = TransferReport::from_csv(csv);
  EXPECT_EQ(back.rows, r.rows);
  EXPECT_EQ(back.config_hash, r.config_hash);
  EXPECT_EQ(back.to_csv(), csv);
}

TEST(TransferReport, JsonRoundTrip) {
  const TransferReport r = sample_report();
  const TransferReport back = TransferReport::from_json(r.to_json());
  EXPECT_EQ(back.rows, r.rows);
  EXPECT_EQ(back.seed, r.seed);
  EXPECT_EQ(back.timestamp, r.timestamp);
  EXPECT_EQ(back.target_label_rule, r.target_label_rule);
}

TEST(TransferReport, SchemaMismatchesAreFormatErrors) {
  EXPECT_THROW(TransferReport::from_csv("attack,surrogate,target\npgd,a,b\n"), FormatError);
  EXPECT_THROW(TransferReport::from_csv("attack,surrogate,target,epsilon,T_v,n,success_rate\npgd,a,b,1,2,3\n"),
               FormatError);
  EXPECT_THROW(TransferReport::from_csv("attack,surrogate,target,epsilon,T_v,n,success_rate\npgd,a,b,1,2,3,1.5\n"),
               FormatError);
  EXPECT_THROW(TransferReport::from_csv(""), FormatError);
  EXPECT_THROW(TransferReport::from_json(nlohmann::json{{"rows", 3}}), FormatError);
}

TEST(MeanSuccess, AveragesOverMatchingRows) {
  const TransferReport r = sample_report();
  EXPECT_NEAR(mean_success(r, "msm"), (0.185 + 1.0 / 3.0) / 2.0, 1e-15);
  EXPECT_THROW(mean_success(r, "nobody"), ConfigError);
}

}  // namespace
}  // namespace mta
