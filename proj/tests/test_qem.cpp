#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "qem/dsl.hpp"
#include "qem/oracles.hpp"
#include "qem/qem.hpp"
#include "qem/random.hpp"

using namespace qem;

namespace {

Model model_from(const std::string& src, Dataset data) {
  ModelIR ir = dsl::parse_or_throw(src);
  ir.data = std::move(data);
  return compile(ir);
}

QState single_gaussian_state(double mean, double var) {
  QState q;
  const auto c = gaussian(mean, var);
  q.latents.push_back({Family::gaussian, {conventional_to_mean(c)}, {c}});
  return q;
}

double standard_normal(const CounterRng& rng, std::uint64_t i) { return special::normal_quantile(rng.uniform(i)); }

}  // namespace

TEST(Lambda, ScheduleAndFixedExamples) {
  EXPECT_EQ(lambda_of(1, EmaConfig::scheduled(0.5)), 0.0);
  EXPECT_DOUBLE_EQ(lambda_of(4, EmaConfig::scheduled(0.5)), 0.5);
  for (std::size_t t : {1u, 7u, 1000u}) EXPECT_DOUBLE_EQ(lambda_of(t, EmaConfig::fixed(0.3)), 0.7);
  EXPECT_THROW((void)lambda_of(0, EmaConfig::fixed(0.3)), Error);
  for (std::size_t t = 1; t < 200; ++t) {
    const double l = lambda_of(t, EmaConfig::scheduled(0.7));
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, 1.0);
  }
}

TEST(Lambda, ConfigRanges) {
  EXPECT_THROW(check_ema(EmaConfig::fixed(0.0)), Error);
  EXPECT_THROW(check_ema(EmaConfig::fixed(1.5)), Error);
  EXPECT_NO_THROW(check_ema(EmaConfig::fixed(1.0)));
  EXPECT_THROW(check_ema(EmaConfig::scheduled(0.0)), Error);
  EXPECT_THROW(check_ema(EmaConfig::scheduled(1.0)), Error);
  EXPECT_NO_THROW(check_ema(EmaConfig::scheduled(0.5)));
}

TEST(Ema, Examples) {
  const MeanParams prev{Family::gaussian, {0, 1}}, next{Family::gaussian, {2, 5}};
  EXPECT_EQ(ema_update(prev, next, 0.5), (MeanParams{Family::gaussian, {1, 3}}));
  EXPECT_EQ(ema_update(prev, next, 0.0), next);
  EXPECT_THROW((void)ema_update(prev, MeanParams{Family::bernoulli, {0.5, 0}}, 0.5), Error);
}

TEST(Ema, DeterministicClosedForm) {
  const MeanParams c{Family::gaussian, {1.7, 4.1}};
  for (double lambda : {0.1, 0.5, 0.9, 0.999}) {
    MeanParams m{Family::gaussian, {0, 0}};
    for (int t = 1; t <= 20; ++t) {
      m = ema_update(m, c, lambda);
      const double f = 1.0 - std::pow(lambda, t);
      EXPECT_NEAR(m.m[0], f * c.m[0], 1e-12);
      EXPECT_NEAR(m.m[1], f * c.m[1], 1e-12);
    }
  }
}

TEST(Ema, BiasLawUnderNoisyStub) {
  const double lambda = 0.8, truth = 2.0, m0 = -1.0;
  const int reps = 10000, T = 15;
  std::vector<double> sum(T + 1, 0.0), sum2(T + 1, 0.0);
  for (int r = 0; r < reps; ++r) {
    const CounterRng rng(static_cast<std::uint64_t>(r), {label_hash("bias-stub")});
    MeanParams m{Family::gaussian, {m0, m0 * m0 + 1}};
    for (int t = 1; t <= T; ++t) {
      const double x = truth + 1.5 * standard_normal(rng, static_cast<std::uint64_t>(t));
      m = ema_update(m, {Family::gaussian, {x, x * x}}, lambda);
      sum[t] += m.m[0];
      sum2[t] += m.m[0] * m.m[0];
    }
  }
  for (int t : {1, 3, 8, 15}) {
    const double mean = sum[t] / reps;
    const double se = std::sqrt((sum2[t] / reps - mean * mean) / reps);
    const double expected = (1 - std::pow(lambda, t)) * truth + std::pow(lambda, t) * m0;
    EXPECT_LT(std::abs(mean - expected), 4 * se) << "t=" << t;
  }
}

TEST(Ema, ScheduledVarianceDecays) {
  const auto ema = EmaConfig::scheduled(0.5);
  const int reps = 1000;
  const std::vector<std::size_t> checkpoints{10, 100, 1000};
  std::vector<double> sum(3, 0.0), sum2(3, 0.0);
  for (int r = 0; r < reps; ++r) {
    const CounterRng rng(static_cast<std::uint64_t>(r), {label_hash("variance-stub")});
    MeanParams m{Family::gaussian, {0, 1}};
    std::size_t next = 0;
    for (std::size_t t = 1; t <= 1000; ++t) {
      const double x = standard_normal(rng, t);
      m = ema_update(m, {Family::gaussian, {x, x * x}}, lambda_of(t, ema));
      if (t == checkpoints[next]) {
        sum[next] += m.m[0];
        sum2[next] += m.m[0] * m.m[0];
        ++next;
      }
    }
  }
  std::vector<double> var(3);
  for (int i = 0; i < 3; ++i) var[i] = sum2[i] / reps - (sum[i] / reps) * (sum[i] / reps);
  EXPECT_GT(var[0], var[1]);
  EXPECT_GT(var[1], var[2]);
}

TEST(MStep, Examples) {
  const QState g = single_gaussian_state(0, 1);
  const QState a = m_step(g, {{MeanParams{Family::gaussian, {2, 5}}}}, 1e-8);
  EXPECT_EQ(a.latents[0].conv[0], gaussian(2, 1));
  EXPECT_EQ(a.clamps, 0u);

  const QState b = m_step(g, {{MeanParams{Family::gaussian, {1, 1.0000001}}}}, 1e-6);
  EXPECT_DOUBLE_EQ(b.latents[0].conv[0].values[1], 1e-6);
  EXPECT_EQ(b.latents[0].conv[0].values[0], 1.0);
  EXPECT_EQ(b.clamps, 1u);
  // The stored moments agree with the clamped conventional parameters.
  EXPECT_NEAR(b.latents[0].mean[0].m[1] - 1.0, 1e-6, 1e-15);

  QState beta_q;
  beta_q.latents.push_back({Family::beta, {conventional_to_mean(beta(2, 2))}, {beta(2, 2)}});
  const QState c = m_step(beta_q, {{MeanParams{Family::beta, {-1, -1}}}}, 1e-8);
  EXPECT_NEAR(c.latents[0].conv[0].values[0], 1.0, 1e-10);
  EXPECT_NEAR(c.latents[0].conv[0].values[1], 1.0, 1e-10);
}

TEST(MStep, CachedParamsMatchMoments) {
  QState q;
  q.latents.push_back({Family::gamma, {conventional_to_mean(gamma(2, 3))}, {gamma(2, 3)}});
  q.latents.push_back({Family::bernoulli, {conventional_to_mean(bernoulli(0.3))}, {bernoulli(0.3)}});
  const QState out = m_step(q, {{conventional_to_mean(gamma(4.5, 0.7))}, {MeanParams{Family::bernoulli, {0.8, 0}}}}, 1e-8);
  for (const auto& e : out.latents)
    for (std::size_t c = 0; c < e.mean.size(); ++c) {
      const auto conv = mean_to_conventional(e.mean[c]);
      for (std::size_t j = 0; j < param_count(e.family); ++j)
        EXPECT_NEAR(conv.values[j], e.conv[c].values[j], 1e-9 * std::abs(conv.values[j]));
    }
}

TEST(MStep, BernoulliClampAndInfeasibleErrors) {
  QState q;
  q.latents.push_back({Family::bernoulli, {conventional_to_mean(bernoulli(0.5))}, {bernoulli(0.5)}});
  const QState out = m_step(q, {{MeanParams{Family::bernoulli, {1.0, 0}}}}, 1e-8);
  EXPECT_EQ(out.clamps, 1u);
  EXPECT_LT(out.latents[0].conv[0].values[0], 1.0);

  QState g;
  g.latents.push_back({Family::gamma, {conventional_to_mean(gamma(2, 3))}, {gamma(2, 3)}});
  // log E[z] < E[log z] is impossible by Jensen.
  try {
    (void)m_step(g, {{MeanParams{Family::gamma, {1.0, 0.5}}}}, 1e-8, {"tau"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::m_step);
    EXPECT_NE(std::string(e.what()).find("tau"), std::string::npos) << e.what();
  }
  EXPECT_THROW((void)m_step(g, {{MeanParams{Family::gaussian, {0, 1}}}}, 1e-8), Error);
}

TEST(NaturalEma, NewWeightOneIsReplacement) {
  const auto eta = conventional_to_natural(gaussian(3, 2));
  const auto out = ema_over_natural(gaussian(0, 1), eta, 0.0);
  EXPECT_NEAR(out.values[0], 3, 1e-12);
  EXPECT_NEAR(out.values[1], 2, 1e-12);
}

TEST(NaturalEma, AgreesWhenEstimatesAreDeterministic) {
  const auto target = gaussian(0, 2.5);
  ConventionalParams nat = gaussian(0, 1);
  MeanParams mean = conventional_to_mean(gaussian(0, 1));
  for (int t = 0; t < 2000; ++t) {
    nat = ema_over_natural(nat, conventional_to_natural(target), 0.9);
    mean = ema_update(mean, conventional_to_mean(target), 0.9);
  }
  EXPECT_NEAR(nat.values[1], 2.5, 1e-9);
  EXPECT_NEAR(mean_to_conventional(mean).values[1], 2.5, 1e-9);
}

TEST(NaturalEma, FixedPointDiffersOnAlternatingEstimates) {
  const MeanParams a{Family::gaussian, {0, 1}}, b{Family::gaussian, {0, 3}};
  ConventionalParams nat = gaussian(0, 1);
  MeanParams mean = a;
  const double lambda = 0.99;
  for (int t = 0; t < 10000; ++t) {
    const auto& est = t % 2 ? b : a;
    nat = ema_over_natural(nat, conventional_to_natural(mean_to_conventional(est)), lambda);
    mean = ema_update(mean, est, lambda);
  }
  EXPECT_NEAR(mean.m[1], 2.0, 0.02);
  const double nat_m2 = conventional_to_mean(nat).m[1];
  EXPECT_GT(std::abs(nat_m2 - mean.m[1]), 0.05);
}

// ---------------------------------------------------------------------------
// run_qem

TEST(RunQem, SingleIterationIsRawEstimate) {
  const auto b = oracles::conjugate_chain(2);
  const Model m = compile(b.ir);
  QemConfig cfg;
  cfg.K = 8;
  cfg.T = 1;
  cfg.seed = 11;
  const Trace tr = run_qem(m, cfg);
  ASSERT_EQ(tr.rows.size(), 1u);
  EXPECT_EQ(tr.rows[0].lambda, 0.0);
  const QState q = m_step(initial_state(m), state_moments(initial_state(m)), cfg.variance_floor);
  const auto bank = draw_sample_bank(m, q, cfg.seed, cfg.K, 1);
  const auto est = posterior_moments(m, bank, q, build_log_factors(m, bank, q));
  for (std::size_t i = 0; i < est.moments.size(); ++i) {
    const auto& mp = tr.rows[0].moments[i][0];
    // The M-step may clamp, so compare the mean which it never touches.
    EXPECT_EQ(mp.m[0], est.moments[i][0].m[0]);
  }
  EXPECT_EQ(tr.rows[0].log_evidence, est.log_evidence);
}

TEST(RunQem, ConjugateConvergesWithinTwoPercent) {
  const Model m = model_from("latent z ~ Gaussian(0, 1)\nobserve x ~ Gaussian(z, 1) from xd\n", {{"xd", Tensor(2.0)}});
  QemConfig cfg;
  cfg.K = 128;
  cfg.T = 10;
  cfg.seed = 3;
  const Trace tr = run_qem(m, cfg);
  EXPECT_EQ(tr.rows.size(), 10u);
  EXPECT_LT(std::abs(tr.rows.back().moments[0][0].m[0] - 1.0), 0.02);
}

TEST(RunQem, DeterministicTrace) {
  const auto b = oracles::radon_full();
  QemConfig cfg;
  cfg.K = 6;
  cfg.T = 4;
  cfg.seed = 21;
  EXPECT_EQ(run_qem(b.ir, cfg), run_qem(b.ir, cfg));
  cfg.seed = 22;
  const auto other = run_qem(b.ir, cfg);
  cfg.seed = 21;
  EXPECT_FALSE(other == run_qem(b.ir, cfg));
}

TEST(RunQem, FixedProposalStillAveragesEstimates) {
  const auto b = oracles::conjugate_chain(3);
  const Model m = compile(b.ir);
  QemConfig cfg;
  cfg.K = 8;
  cfg.T = 5;
  cfg.adapt = false;
  const Trace tr = run_qem(m, cfg);
  EXPECT_EQ(tr.final_state, m_step(initial_state(m), state_moments(initial_state(m)), cfg.variance_floor));
  EXPECT_NE(tr.rows.back().moments, state_moments(tr.final_state));
}

TEST(RunQem, ErrorsCarryIterationIndex) {
  const Model m = model_from("latent z ~ Gaussian(0, 1)\nobserve x ~ Gaussian(z, 1) from xd\n", {{"xd", Tensor(1.0)}});
  QemConfig cfg;
  cfg.T = 3;
  cfg.factors.rank_cap = 0;
  try {
    (void)run_qem(m, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 1"), std::string::npos) << e.what();
  }
  QemConfig bad;
  bad.K = 0;
  EXPECT_THROW((void)run_qem(m, bad), Error);
}

TEST(RunQem, FixedPointMatchesExpectedEstimate) {
  // At a fixed point the proposal's moments equal the mean of fresh-seed MPIW estimates.
  const Model m = model_from("latent z ~ Gaussian(0, 1)\nobserve x ~ Gaussian(z, 0.25) from xd\n", {{"xd", Tensor(2.0)}});
  QemConfig cfg;
  cfg.K = 4;
  cfg.T = 20000;
  cfg.seed = 8;
  cfg.ema = EmaConfig::scheduled(0.99);
  const Trace tr = run_qem(m, cfg);
  for (std::size_t t = cfg.T - 20; t < cfg.T; ++t) {
    const auto& a = tr.rows[t].moments[0][0];
    const auto& b = tr.rows[t - 1].moments[0][0];
    ASSERT_LT(std::hypot(a.m[0] - b.m[0], a.m[1] - b.m[1]), 1e-3);
  }
  const QState& q = tr.final_state;
  const int reps = 40000;
  double s1 = 0, s11 = 0, s2 = 0, s22 = 0;
  for (int r = 0; r < reps; ++r) {
    const auto seed = derive_seed(static_cast<std::uint64_t>(r), "fixed-point");
    const auto bank = draw_sample_bank(m, q, seed, cfg.K);
    const auto est = posterior_moments(m, bank, q, build_log_factors(m, bank, q)).moments[0][0];
    s1 += est.m[0];
    s11 += est.m[0] * est.m[0];
    s2 += est.m[1];
    s22 += est.m[1] * est.m[1];
  }
  const double e1 = s1 / reps, e2 = s2 / reps;
  const double se1 = std::sqrt((s11 / reps - e1 * e1) / reps), se2 = std::sqrt((s22 / reps - e2 * e2) / reps);
  EXPECT_LT(std::abs(q.latents[0].mean[0].m[0] - e1), 4 * se1);
  EXPECT_LT(std::abs(q.latents[0].mean[0].m[1] - e2), 4 * se2);
}

TEST(RunQem, ReparameterizationInvariance) {
  const auto b = oracles::radon_linear();
  QemConfig cfg;
  cfg.K = 8;
  cfg.T = 10;
  cfg.seed = 4;
  const Model plain = compile(b.ir);
  const Trace base = run_qem(plain, cfg);
  const std::size_t idx = *plain.ir.latent_index(*b.scaled_latent);
  for (double alpha : {1e-2, 1e-3, 1e-4}) {
    const Model sc = compile(oracles::scaled(b.ir, *b.scaled_latent, alpha));
    ASSERT_EQ(*sc.ir.latent_index(*b.scaled_latent), idx);
    const Trace tr = run_qem(sc, cfg);
    for (std::size_t t = 0; t < cfg.T; ++t)
      for (std::size_t i = 0; i < base.rows[t].moments.size(); ++i)
        for (std::size_t c = 0; c < base.rows[t].moments[i].size(); ++c) {
          const MeanParams want = base.rows[t].moments[i][c];
          const MeanParams got = i == idx ? scale_mean_params(tr.rows[t].moments[i][c], alpha) : tr.rows[t].moments[i][c];
          for (int j = 0; j < 2; ++j)
            EXPECT_LE(std::abs(got.m[j] - want.m[j]), 1e-6 * std::max(std::abs(want.m[j]), 1e-300))
                << "alpha=" << alpha << " t=" << t + 1 << " latent " << i << " cell " << c << " stat " << j;
        }
  }
}

TEST(RunQem, PredictiveColumnFilledWhenRequested) {
  const auto b = oracles::conjugate_chain(2);
  QemConfig cfg;
  cfg.K = 8;
  cfg.T = 3;
  cfg.predictive_samples = 50;
  cfg.test_data = Dataset{{"x1_data", Tensor(0.1)}, {"x2_data", Tensor(-0.2)}};
  const Trace tr = run_qem(b.ir, cfg);
  for (const auto& row : tr.rows) {
    ASSERT_TRUE(row.predictive_ll.has_value());
    EXPECT_TRUE(std::isfinite(*row.predictive_ll));
    EXPECT_FALSE(row.elapsed_ms.has_value());
  }
  cfg.record_timing = true;
  cfg.predictive_samples = 0;
  const Trace timed = run_qem(b.ir, cfg);
  for (const auto& row : timed.rows) {
    EXPECT_FALSE(row.predictive_ll.has_value());
    ASSERT_TRUE(row.elapsed_ms.has_value());
    EXPECT_GE(*row.elapsed_ms, 0.0);
  }
}

TEST(RunQem, GlobalIwOnSingleLatentEqualsMpiw) {
  const Model m = model_from("latent z ~ Gaussian(0, 1)\nobserve x ~ Gaussian(z, 1) from xd\n", {{"xd", Tensor(0.7)}});
  QemConfig cfg;
  cfg.K = 16;
  cfg.T = 5;
  const Trace a = run_qem(m, cfg);
  cfg.estep = EStep::global_iw;
  const Trace b = run_qem(m, cfg);
  for (std::size_t t = 0; t < cfg.T; ++t) {
    EXPECT_NEAR(a.rows[t].moments[0][0].m[0], b.rows[t].moments[0][0].m[0], 1e-12);
    EXPECT_NEAR(a.rows[t].log_evidence, b.rows[t].log_evidence, 1e-12);
  }
}
