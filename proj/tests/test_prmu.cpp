#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "oracles.hpp"
#include "prmu_fixtures.hpp"
#include "tagpr/prmu.hpp"
#include "tagpr/synth_env.hpp"

using namespace tagpr;

namespace {

FeaturizedPair pair_with_gap(double gap) {
  // w = e0 and b = 0 give score(x) = x[0]
  return {"u", {gap, 0.0}, {0.0, 0.0}};
}

PrmuModel unit_w_model() {
  PrmuModel m(2);
  m.w = {1.0, 0.0};
  return m;
}

}  // namespace

TEST(Featurize, DeterministicUnitNorm) {
  const std::vector<ProfileEntry> prof{{"classify d0p", "c1"}, {"classify d1n", "c2"}};
  const auto a = featurize("u1", "classify d0p d1n", prof, "<x>c1</x>", "c1");
  const auto b = featurize("u1", "classify d0p d1n", prof, "<x>c1</x>", "c1");
  EXPECT_EQ(a, b);
  double norm = 0;
  for (double v : a) norm += v * v;
  EXPECT_NEAR(norm, 1.0, 1e-12);
  const auto z = featurize("", "", {}, "", "");
  EXPECT_TRUE(std::all_of(z.begin(), z.end(), [](double v) { return v == 0.0; }));
}

TEST(Featurize, OneTokenChangeTouchesOnlyItsBuckets) {
  const std::vector<ProfileEntry> prof{{"classify d0p", "c1"}};
  const auto keys_a = feature_keys("classify d0p", prof, "w1 w2", "c1");
  const auto keys_b = feature_keys("classify d0p", prof, "w1 w3", "c1");
  std::set<std::size_t> affected;
  for (const auto& k : {std::string("c:w2"), std::string("c:w3")}) affected.insert(feature_bucket(k, kDefaultFeatureDim));
  auto raw = [](const std::vector<std::string>& keys) {
    std::vector<double> v(kDefaultFeatureDim, 0.0);
    for (const auto& k : keys) v[static_cast<std::size_t>(fnv1a(k) % kDefaultFeatureDim)] += 1.0;
    return v;
  };
  const auto ra = raw(keys_a), rb = raw(keys_b);
  for (std::size_t i = 0; i < kDefaultFeatureDim; ++i) {
    if (!affected.count(i)) {
      EXPECT_EQ(ra[i], rb[i]) << i;
    }
  }
}

TEST(Featurize, UserIdIsNotHashed) {
  EXPECT_EQ(featurize("u1", "q", {}, "c", "a"), featurize("u2", "q", {}, "c", "a"));
}

TEST(Score, WorkedExamples) {
  PrmuModel zero;
  const auto phi = featurize("u", "classify d0p", {}, "w1", "c1");
  EXPECT_EQ(score(zero, "u", phi), 0.0);
  PrmuModel m;
  m.w = phi;
  EXPECT_NEAR(score(m, "u", phi), 1.0, 1e-12);
  m.embedding_mut("known");  // zero row
  EXPECT_EQ(score(m, "stranger", phi), score(m, "known", phi));
}

TEST(Score, SigmoidValues) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(10.0), oracle::sigmoid(10.0), 1e-15);
  EXPECT_NEAR(sigmoid(10.0), 0.9999546021312976, 1e-12);
  EXPECT_NEAR(sigmoid(-10.0), 4.5397868702434395e-05, 1e-15);
  for (double z : {-700.0, -30.0, 30.0, 700.0}) {
    EXPECT_TRUE(std::isfinite(sigmoid(z)));
  }
  for (double z : {-30.0, -1.0, 0.3, 30.0}) {
    EXPECT_GT(sigmoid(z), 0.0);
    EXPECT_LT(sigmoid(z), 1.0);
  }
}

TEST(BtLoss, WorkedExamples) {
  const auto m = unit_w_model();
  EXPECT_NEAR(bt_loss(m, std::vector<FeaturizedPair>{pair_with_gap(0.0)}), std::log(2.0), 1e-15);
  EXPECT_NEAR(bt_loss(m, std::vector<FeaturizedPair>{pair_with_gap(10.0)}), std::log1p(std::exp(-10.0)), 1e-15);
  EXPECT_NEAR(bt_loss(m, std::vector<FeaturizedPair>{pair_with_gap(-10.0)}), std::log1p(std::exp(10.0)), 1e-12);
  EXPECT_NEAR(bt_loss(m, std::vector<FeaturizedPair>{pair_with_gap(-10.0)}), 10.0000453989, 1e-9);
  EXPECT_THROW(bt_loss(m, std::vector<FeaturizedPair>{}), std::invalid_argument);
}

TEST(BtLoss, SwappedPairsAndTranslation) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n01;
  for (int i = 0; i < 500; ++i) {
    const double gap = 4 * n01(rng);
    const auto m = unit_w_model();
    const double fwd = bt_loss(m, std::vector<FeaturizedPair>{pair_with_gap(gap)});
    const double back = bt_loss(m, std::vector<FeaturizedPair>{pair_with_gap(-gap)});
    EXPECT_GE(fwd + back, 2 * std::log(2.0) - 1e-12);
    // shifting both scores by c through the bias leaves the loss unchanged
    auto shifted = m;
    shifted.b = 3.7;
    EXPECT_NEAR(bt_loss(shifted, std::vector<FeaturizedPair>{pair_with_gap(gap)}), fwd, 1e-12);
  }
  const auto m = unit_w_model();
  EXPECT_NEAR(bt_loss(m, std::vector<FeaturizedPair>{pair_with_gap(0)}) * 2, 2 * std::log(2.0), 1e-15);
}

TEST(BtGrad, SymmetricPairHasZeroGradient) {
  PrmuModel m(3);
  m.w = {0.3, -0.2, 0.1};
  const auto g = bt_grad(m, std::vector<FeaturizedPair>{{"u", {1, 2, 3}, {1, 2, 3}}});
  for (double v : g.w) EXPECT_EQ(v, 0.0);
  for (double v : g.users.at("u")) EXPECT_EQ(v, 0.0);
}

TEST(BtGrad, OnlyTouchedUsers) {
  PrmuModel m(2);
  m.embedding_mut("a");
  m.embedding_mut("b");
  const auto g = bt_grad(m, std::vector<FeaturizedPair>{{"a", {1, 0}, {0, 1}}});
  EXPECT_EQ(g.users.size(), 1u);
  EXPECT_TRUE(g.users.count("a"));
}

TEST(BtGrad, MatchesFiniteDifferences) {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = fixtures::random_prmu_problem(rng);
    EXPECT_LT(fixtures::prmu_gradient_error(p), 1e-4);
  }
}

TEST(TrainPrmu, ZeroEpochsAndDeterminism) {
  const auto d = fixtures::opposite_users_dataset(16, 100, 10, 3);
  PrmuTrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_EQ(train_prmu(PrmuModel(16), d.train, cfg).model, PrmuModel(16));
  cfg.epochs = 3;
  const auto a = train_prmu(PrmuModel(16), d.train, cfg);
  const auto b = train_prmu(PrmuModel(16), d.train, cfg);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  EXPECT_THROW(train_prmu(PrmuModel(16), std::vector<FeaturizedPair>{}, cfg), std::invalid_argument);
}

TEST(TrainPrmu, OppositeUsersAreSeparated) {
  const auto d = fixtures::opposite_users_dataset(32, 2000, 200, 4);
  EXPECT_EQ(pairwise_accuracy(PrmuModel(32), d.heldout), 0.5);
  PrmuTrainConfig cfg;
  cfg.epochs = 100;
  cfg.lr = 2.0;
  const auto res = train_prmu(PrmuModel(32), d.train, cfg);
  EXPECT_GE(pairwise_accuracy(res.model, d.heldout), 0.95);
  const FeaturizedPair alice{"alice", d.shared_a, d.shared_b}, bob{"bob", d.shared_a, d.shared_b};
  EXPECT_GT(score_gap(res.model, alice), 0.0);
  EXPECT_LT(score_gap(res.model, bob), 0.0);
}

TEST(PreferenceData, PrpPairs) {
  SynthEnv env{EnvConfig{}};
  EXPECT_TRUE(build_prp_dataset(env, oracle_generator(env), 0).empty());
  // Record the gold answer behind every generated pair, in call order.
  struct Call {
    std::string gold;
    OracleResponse with, without;
  };
  std::vector<Call> calls;
  const auto base = oracle_generator(env);
  ResponseGenerator recording = [&](const TaskInstance& t, bool show, Rng& rng) {
    auto r = base(t, show, rng);
    if (show) calls.push_back({t.gold, r, {}});
    else calls.back().without = r;
    return r;
  };
  const auto pairs = build_prp_dataset(env, recording, 600);
  std::vector<const Call*> emitted;
  for (const auto& c : calls) {
    if (!(c.with.chain == c.without.chain && c.with.answer == c.without.answer)) emitted.push_back(&c);
  }
  ASSERT_EQ(emitted.size(), pairs.size());
  ASSERT_GE(pairs.size(), 500u);
  double pref_hits = 0, rej_hits = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    EXPECT_EQ(p.source, PreferenceSource::PRP);
    EXPECT_FALSE(p.preferred.chain == p.rejected.chain && p.preferred.answer == p.rejected.answer);
    EXPECT_EQ(p.preferred.answer, emitted[i]->with.answer);
    pref_hits += p.preferred.answer == emitted[i]->gold;
    rej_hits += p.rejected.answer == emitted[i]->gold;
  }
  EXPECT_GT(pref_hits - rej_hits, 0.0);
}

TEST(PreferenceData, PqpPairsStrictlyOrdered) {
  SynthEnv env{EnvConfig{}};
  std::vector<std::pair<TaskInstance, std::vector<OracleResponse>>> calls;
  const auto base = noisy_oracle_generator(env);
  CandidateGenerator recording = [&](const TaskInstance& t, int n, Rng& rng) {
    auto c = base(t, n, rng);
    calls.emplace_back(t, c);
    return c;
  };
  const auto pairs = build_pqp_dataset(env, recording, 300);
  EXPECT_EQ(pairs.size(), 300u);
  std::vector<const TaskInstance*> emitted;
  for (const auto& [t, cands] : calls) {
    double lo = 2, hi = -1;
    for (const auto& c : cands) {
      lo = std::min(lo, candidate_quality(t, c));
      hi = std::max(hi, candidate_quality(t, c));
    }
    if (hi > lo) emitted.push_back(&t);
  }
  ASSERT_EQ(emitted.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    EXPECT_EQ(p.source, PreferenceSource::PQP);
    const auto& t = *emitted[i];
    EXPECT_EQ(p.user_id, t.user_id);
    EXPECT_GT(verifiable_reward(t.kind, p.preferred.answer, t.gold), verifiable_reward(t.kind, p.rejected.answer, t.gold));
  }
}

TEST(PreferenceData, TiesAreDiscarded) {
  SynthEnv env{EnvConfig{}};
  CandidateGenerator same = [&env](const TaskInstance& t, int n, Rng&) {
    return std::vector<OracleResponse>(static_cast<std::size_t>(n), env.oracle_responder(t, true));
  };
  EXPECT_TRUE(build_pqp_dataset(env, same, 20).empty());
  CandidateGenerator right_wrong = [&env](const TaskInstance& t, int, Rng&) {
    auto good = env.oracle_responder(t, true);
    auto bad = good;
    bad.answer = t.gold == "c0" ? "c1" : "c0";
    return std::vector<OracleResponse>{bad, good};
  };
  const auto pairs = build_pqp_dataset(env, right_wrong, 20);
  ASSERT_EQ(pairs.size(), 20u);
  for (const auto& p : pairs) EXPECT_NE(p.preferred.answer, p.rejected.answer);
}

TEST(PrmuSerialization, RoundTrip) {
  std::mt19937_64 rng(33);
  auto p = fixtures::random_prmu_problem(rng);
  EXPECT_EQ(prmu_from_json(nlohmann::json::parse(to_json(p.model).dump())), p.model);
  SynthEnv env{EnvConfig{}};
  const auto pairs = build_prp_dataset(env, oracle_generator(env), 3);
  for (const auto& pp : pairs) {
    const auto back = preference_pair_from_json(to_json(pp));
    EXPECT_EQ(to_json(back), to_json(pp));
  }
}
