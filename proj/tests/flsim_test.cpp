#include "gradinv/flsim.hpp"

#include <gtest/gtest.h>

#include "gradinv/data.hpp"
#include "testutil.hpp"

using namespace gradinv;

namespace {

struct Fixture {
  nn::ModelSpec spec = nn::ModelSpec::tiny_cnn(8, 10);
  data::Dataset ds = data::gen_synthetic(8, 8, 77);
  nn::ModelState model = nn::init_model(spec, 5);
};

}  // namespace

TEST(Schedule, IdentityOrderWithoutSeed) {
  auto rounds = fl::schedule_batches(4, 1, 1, std::nullopt);
  ASSERT_EQ(rounds.size(), 4u);
  for (int i = 0; i < 4; ++i) {
    ASSERT_EQ(rounds[static_cast<std::size_t>(i)].size(), 1u);
    EXPECT_EQ(rounds[static_cast<std::size_t>(i)][0], std::vector<int>{i});
  }
}

TEST(Schedule, EveryIndexAppearsOncePerEpoch) {
  auto rounds = fl::schedule_batches(12, 2, 3, 99u);
  std::vector<int> seen(12, 0);
  for (const auto& round : rounds) {
    EXPECT_EQ(round.size(), 3u);
    for (const auto& batch : round) {
      EXPECT_EQ(batch.size(), 2u);
      for (int i : batch) seen[static_cast<std::size_t>(i)]++;
    }
  }
  for (int c : seen) EXPECT_EQ(c, 1);
}

TEST(Schedule, DifferentSeedsGiveDifferentPermutations) {
  auto a = fl::schedule_batches(8, 1, 1, 1u);
  auto b = fl::schedule_batches(8, 1, 1, 2u);
  bool differ = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i][0] != b[i][0]) differ = true;
  }
  EXPECT_TRUE(differ);
}

TEST(Schedule, RejectsDegenerateArguments) {
  EXPECT_THROW(fl::schedule_batches(4, 0, 1, std::nullopt), ValueError);
  EXPECT_THROW(fl::schedule_batches(4, 1, 0, std::nullopt), ValueError);
  EXPECT_THROW(fl::schedule_batches(3, 2, 2, std::nullopt), ValueError);
}

TEST(Schedule, TruncatesIncompleteLastRound) {
  auto rounds = fl::schedule_batches(7, 2, 1, std::nullopt);
  EXPECT_EQ(rounds.size(), 3u);  // sample 6 dropped
}

TEST(RunRound, SingleStepDeltaIsMinusMuGradient) {
  Fixture f;
  const double mu = 0x1p-13;
  auto [next, rec] = fl::run_round(f.spec, f.model, f.ds.images, f.ds.labels, {{0}}, mu,
                                   fl::UpdateKind::kModelDelta);
  ad::Graph g;
  std::vector<Tensor> grads =
      nn::batch_gradient(g, f.spec, f.model.params, fl::stack_batch(f.ds.images, {0}),
                         {f.ds.labels[0]});
  for (std::size_t i = 0; i < rec.payload.size(); ++i) {
    Tensor want = Tensor::zeros(grads[i].shape);
    for (std::int64_t k = 0; k < want.size(); ++k) want[k] = -mu * grads[i][k];
    EXPECT_TRUE(bit_equal(rec.payload[i], want)) << "param " << i;
  }
}

TEST(RunRound, TwoStepsMatchManualComposition) {
  Fixture f;
  const double mu = 1e-4;
  auto [next, rec] = fl::run_round(f.spec, f.model, f.ds.images, f.ds.labels, {{0}, {1}}, mu,
                                   fl::UpdateKind::kModelDelta);
  // manual: gradient at base, step, gradient at updated, step
  ad::Graph g1;
  std::vector<Tensor> grad1 = nn::batch_gradient(
      g1, f.spec, f.model.params, fl::stack_batch(f.ds.images, {0}), {f.ds.labels[0]});
  std::vector<Tensor> v1;
  for (const Tensor& t : grad1) v1.push_back(t.detached_copy());
  nn::ModelState mid = nn::apply_sgd_step(f.model, v1, mu);
  ad::Graph g2;
  std::vector<Tensor> grad2 = nn::batch_gradient(
      g2, f.spec, mid.params, fl::stack_batch(f.ds.images, {1}), {f.ds.labels[1]});
  std::vector<Tensor> v2;
  for (const Tensor& t : grad2) v2.push_back(t.detached_copy());
  nn::ModelState manual = nn::apply_sgd_step(mid, v2, mu);
  // The released state applies the accumulated payload to the base model;
  // it matches the chained composition to floating-point association.
  for (std::size_t i = 0; i < manual.params.size(); ++i) {
    EXPECT_LT(max_abs_diff(next.params[i], manual.params[i]), 1e-12) << "param " << i;
  }
}

TEST(RunRound, BaseSnapshotIsPreRoundStateBitExact) {
  Fixture f;
  auto [next, rec] = fl::run_round(f.spec, f.model, f.ds.images, f.ds.labels, {{0}, {1}}, 1e-4,
                                   fl::UpdateKind::kModelDelta);
  for (std::size_t i = 0; i < f.model.params.size(); ++i) {
    EXPECT_TRUE(bit_equal(rec.base.params[i], f.model.params[i]));
  }
}

TEST(RunRound, ConservationBaseplusPayloadEqualsPostModel) {
  Fixture f;
  for (int T : {1, 2, 4}) {
    std::vector<std::vector<int>> batches;
    for (int t = 0; t < T; ++t) batches.push_back({t});
    auto [next, rec] = fl::run_round(f.spec, f.model, f.ds.images, f.ds.labels, batches, 1e-4,
                                     fl::UpdateKind::kModelDelta);
    for (std::size_t i = 0; i < next.params.size(); ++i) {
      Tensor sum = Tensor::zeros(next.params[i].shape);
      for (std::int64_t k = 0; k < sum.size(); ++k) {
        sum[k] = rec.base.params[i][k] + rec.payload[i][k];
      }
      EXPECT_TRUE(bit_equal(sum, next.params[i])) << "T=" << T << " param " << i;
    }
  }
}

TEST(RunRound, GradientKindRecordsGradientAndAdvances) {
  Fixture f;
  const double mu = 1e-4;
  auto [next, rec] = fl::run_round(f.spec, f.model, f.ds.images, f.ds.labels, {{2}}, mu,
                                   fl::UpdateKind::kGradient);
  EXPECT_EQ(rec.kind, fl::UpdateKind::kGradient);
  EXPECT_EQ(rec.local_steps, 1);
  ad::Graph g;
  std::vector<Tensor> grads = nn::batch_gradient(
      g, f.spec, f.model.params, fl::stack_batch(f.ds.images, {2}), {f.ds.labels[2]});
  for (std::size_t i = 0; i < grads.size(); ++i) {
    EXPECT_TRUE(bit_equal(rec.payload[i], grads[i].detached_copy()));
  }
  EXPECT_THROW(
      fl::run_round(f.spec, f.model, f.ds.images, f.ds.labels, {{0}, {1}}, mu,
                    fl::UpdateKind::kGradient),
      ValueError);
}

TEST(RunTraining, CountsAndOrdering) {
  Fixture f;
  fl::TrainingSchedule sched;
  sched.n_samples = 4;
  sched.epochs = 1;
  sched.batch_size = 1;
  sched.local_steps = 4;
  sched.mu = 1e-4;
  sched.shuffle_seed = std::nullopt;
  std::vector<Tensor> imgs(f.ds.images.begin(), f.ds.images.begin() + 4);
  std::vector<int> labels(f.ds.labels.begin(), f.ds.labels.begin() + 4);
  fl::TrainingLog log =
      fl::run_training(f.spec, f.model, imgs, labels, sched, fl::UpdateKind::kModelDelta);
  ASSERT_EQ(log.records.size(), 1u);
  EXPECT_EQ(log.truths[0].step_indices.size(), 4u);
  EXPECT_FALSE(log.truncated_last_round);
}

TEST(RunTraining, EachSampleOncePerEpochAndRoundsIncrease) {
  Fixture f;
  fl::TrainingSchedule sched;
  sched.n_samples = 8;
  sched.epochs = 2;
  sched.batch_size = 1;
  sched.local_steps = 2;
  sched.mu = 1e-4;
  sched.shuffle_seed = 31u;
  fl::TrainingLog log =
      fl::run_training(f.spec, f.model, f.ds.images, f.ds.labels, sched, fl::UpdateKind::kModelDelta);
  ASSERT_EQ(log.records.size(), 8u);  // 4 rounds per epoch x 2
  int prev = -1;
  std::vector<int> count_epoch0(8, 0), count_epoch1(8, 0);
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    EXPECT_GT(log.records[i].round_index, prev);
    prev = log.records[i].round_index;
    for (int idx : log.truths[i].flat()) {
      (log.records[i].epoch_index == 0 ? count_epoch0 : count_epoch1)[static_cast<std::size_t>(idx)]++;
    }
  }
  for (int c : count_epoch0) EXPECT_EQ(c, 1);
  for (int c : count_epoch1) EXPECT_EQ(c, 1);
}

TEST(RunTraining, ReplayDeterminism) {
  Fixture f;
  fl::TrainingSchedule sched;
  sched.n_samples = 8;
  sched.epochs = 2;
  sched.batch_size = 2;
  sched.local_steps = 2;
  sched.mu = 1e-4;
  sched.shuffle_seed = 12u;
  fl::TrainingLog a =
      fl::run_training(f.spec, f.model, f.ds.images, f.ds.labels, sched, fl::UpdateKind::kModelDelta);
  fl::TrainingLog b =
      fl::run_training(f.spec, f.model, f.ds.images, f.ds.labels, sched, fl::UpdateKind::kModelDelta);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    for (std::size_t p = 0; p < a.records[i].payload.size(); ++p) {
      EXPECT_TRUE(bit_equal(a.records[i].payload[p], b.records[i].payload[p]));
    }
    EXPECT_EQ(a.truths[i].step_indices, b.truths[i].step_indices);
  }
}

TEST(RunTraining, FullBatchGradientMakesOneRoundPerEpoch) {
  Fixture f;
  fl::TrainingSchedule sched;
  sched.n_samples = 8;
  sched.epochs = 3;
  sched.batch_size = 8;
  sched.local_steps = 1;
  sched.mu = 1e-4;
  sched.shuffle_seed = 3u;
  fl::TrainingLog log =
      fl::run_training(f.spec, f.model, f.ds.images, f.ds.labels, sched, fl::UpdateKind::kGradient);
  EXPECT_EQ(log.records.size(), 3u);
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    EXPECT_EQ(log.records[i].epoch_index, static_cast<int>(i));
  }
}

TEST(RunTraining, FreezeFlagRestartsEachEpochFromInitialModel) {
  Fixture f;
  fl::TrainingSchedule sched;
  sched.n_samples = 4;
  sched.epochs = 2;
  sched.batch_size = 1;
  sched.local_steps = 1;
  sched.mu = 1e-2;
  sched.shuffle_seed = std::nullopt;
  sched.freeze_model = true;
  std::vector<Tensor> imgs(f.ds.images.begin(), f.ds.images.begin() + 4);
  std::vector<int> labels(f.ds.labels.begin(), f.ds.labels.begin() + 4);
  fl::TrainingLog log =
      fl::run_training(f.spec, f.model, imgs, labels, sched, fl::UpdateKind::kModelDelta);
  ASSERT_EQ(log.records.size(), 8u);
  // First record of each epoch starts from the same (initial) weights.
  for (std::size_t p = 0; p < f.model.params.size(); ++p) {
    EXPECT_TRUE(bit_equal(log.records[0].base.params[p], log.records[4].base.params[p]));
  }
}

TEST(Serialization, LogRoundTripsBitExactly) {
  Fixture f;
  fl::TrainingSchedule sched;
  sched.n_samples = 4;
  sched.epochs = 1;
  sched.batch_size = 2;
  sched.local_steps = 2;
  sched.mu = 1e-4;
  sched.shuffle_seed = 9u;
  std::vector<Tensor> imgs(f.ds.images.begin(), f.ds.images.begin() + 4);
  std::vector<int> labels(f.ds.labels.begin(), f.ds.labels.begin() + 4);
  fl::TrainingLog log =
      fl::run_training(f.spec, f.model, imgs, labels, sched, fl::UpdateKind::kModelDelta);
  fl::TrainingLog back = fl::deserialize_log(fl::serialize_log(log));
  ASSERT_EQ(back.records.size(), log.records.size());
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    EXPECT_EQ(back.records[i].kind, log.records[i].kind);
    EXPECT_EQ(back.records[i].round_index, log.records[i].round_index);
    EXPECT_EQ(back.records[i].mu, log.records[i].mu);
    for (std::size_t p = 0; p < log.records[i].payload.size(); ++p) {
      EXPECT_TRUE(bit_equal(back.records[i].payload[p], log.records[i].payload[p]));
      EXPECT_TRUE(bit_equal(back.records[i].base.params[p], log.records[i].base.params[p]));
    }
  }
  EXPECT_EQ(back.truths.size(), log.truths.size());
  EXPECT_THROW(fl::deserialize_log("{not json"), IoError);
}
