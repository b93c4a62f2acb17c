// One PASS/FAIL line per acceptance criterion. Exit status is the number of failures.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "qem/cli.hpp"
#include "qem/engine.hpp"
#include "qem/io.hpp"
#include "qem/oracles.hpp"
#include "qem/qem.hpp"

using namespace qem;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double rel(double a, double b) {
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? 0.0 : std::abs(a - b) / s;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double mse(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

// Trace first moments in the oracle's latent order.
std::vector<double> first_moments(const Trace& t, std::size_t row, const oracles::ExactPosterior& ex) {
  std::vector<double> out;
  for (const auto& name : ex.latents) {
    const auto i = static_cast<std::size_t>(std::find(t.latents.begin(), t.latents.end(), name) - t.latents.begin());
    for (const auto& m : t.rows[row].moments.at(i)) out.push_back(m.m[0]);
  }
  return out;
}

Outcome enumeration_equivalence() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Model m = compile(oracles::random_model(1000 + seed, {.max_latents = 4, .max_plate = 3}));
    const std::size_t K = 1 + seed % 4;
    const QState q = initial_state(m);
    const auto bank = draw_sample_bank(m, q, seed, K);
    const auto est = posterior_moments(m, bank, q, build_log_factors(m, bank, q));
    const auto ref = oracles::enumerate(m, bank, q);
    worst = std::max(worst, rel(est.log_evidence, ref.log_pe));
    for (std::size_t i = 0; i < m.latent_count(); ++i)
      for (std::size_t c = 0; c < ref.moments[i].size(); ++c)
        for (std::size_t s = 0; s < stat_count(q.latents[i].family); ++s)
          worst = std::max(worst, rel(est.moments[i][c].m[s], ref.moments[i][c].m[s]));
  }
  return {worst <= 1e-10, fmt("50 models, worst relative error %.3g", worst)};
}

Outcome evidence_unbiased() {
  const auto b = oracles::conjugate_chain(2);
  const Model m = compile(b.ir);
  const double truth = std::exp(oracles::linear_gaussian_posterior(b.ir).log_evidence);
  const QState q = initial_state(m);
  const int reps = 10000;
  double sum = 0.0, sum2 = 0.0;
  for (int s = 0; s < reps; ++s) {
    const auto bank = draw_sample_bank(m, q, static_cast<std::uint64_t>(s), 5);
    const double e = std::exp(log_evidence(build_log_factors(m, bank, q), 5));
    sum += e;
    sum2 += e * e;
  }
  const double mean = sum / reps;
  const double se = std::sqrt((sum2 / reps - mean * mean) / (reps - 1));
  const double z = (mean - truth) / se;
  return {std::abs(z) < 4.0, fmt("mean %.6g vs P(x) %.6g, %.2f standard errors", mean, truth, z)};
}

Outcome ema_schedule() {
  double worst = 0.0;
  const MeanParams c{Family::gaussian, {1.7, 4.1}};
  for (double lambda : {0.1, 0.5, 0.9, 0.999}) {
    MeanParams m{Family::gaussian, {0.0, 0.0}};
    for (int t = 1; t <= 20; ++t) {
      m = ema_update(m, c, lambda);
      const double f = 1.0 - std::pow(lambda, t);
      worst = std::max({worst, std::abs(m.m[0] - f * c.m[0]), std::abs(m.m[1] - f * c.m[1])});
    }
  }
  const auto ema = EmaConfig::scheduled(0.5);
  const std::vector<std::size_t> at{10, 100, 1000};
  std::vector<double> sum(3, 0.0), sum2(3, 0.0);
  const int reps = 1000;
  for (int r = 0; r < reps; ++r) {
    const CounterRng rng(static_cast<std::uint64_t>(r), {label_hash("acceptance-stub")});
    MeanParams m{Family::gaussian, {0.0, 1.0}};
    std::size_t next = 0;
    for (std::size_t t = 1; t <= 1000; ++t) {
      const double x = special::normal_quantile(rng.uniform(t));
      m = ema_update(m, {Family::gaussian, {x, x * x}}, lambda_of(t, ema));
      if (t == at[next]) {
        sum[next] += m.m[0];
        sum2[next] += m.m[0] * m.m[0];
        ++next;
      }
    }
  }
  std::vector<double> var(3);
  for (int i = 0; i < 3; ++i) var[i] = sum2[i] / reps - (sum[i] / reps) * (sum[i] / reps);
  const bool decays = var[0] > var[1] && var[1] > var[2];
  return {worst <= 1e-12 && decays,
          fmt("closed-form error %.2g; Var at t=10,100,1000: %.4g %.4g %.4g", worst, var[0], var[1], var[2])};
}

Outcome one_step() {
  ModelIR ir = dsl::parse_or_throw("latent z ~ Gaussian(0, 1)\nobserve x ~ Gaussian(z, 1) from x_data\n");
  ir.data["x_data"] = Tensor(2.0);
  const double post_mean = 1.0;
  auto errors = [&](std::uint64_t seed) {
    QemConfig cfg;
    cfg.K = 128;
    cfg.T = 10;
    cfg.seed = seed;
    const Trace t = run_qem(ir, cfg);
    if (t.rows[0].lambda != 0.0) fail(ErrorKind::config, "first iteration must use lambda = 0");
    return std::pair{t.rows[0].moments[0][0].m[0], t.rows[9].moments[0][0].m[0]};
  };
  const auto [a, b] = errors(0);
  const double e1 = rel(a, post_mean), e10 = rel(b, post_mean);
  // Context for the single-run check: how often a seed meets it, and the seed-averaged estimate.
  const int seeds = 200;
  int hits = 0;
  double mean1 = 0.0, mean10 = 0.0;
  for (int s = 0; s < seeds; ++s) {
    const auto [x, y] = errors(static_cast<std::uint64_t>(s));
    hits += rel(x, post_mean) <= 0.05 && rel(y, post_mean) <= 0.02;
    mean1 += x / seeds;
    mean10 += y / seeds;
  }
  return {e1 <= 0.05 && e10 <= 0.02,
          fmt("seed 0 relative error %.4f after 1 iteration, %.4f after 10; %d of %d seeds meet both bounds; "
              "seed-averaged estimate off by %.4f and %.4f",
              e1, e10, hits, seeds, rel(mean1, post_mean), rel(mean10, post_mean))};
}

Outcome reparameterization() {
  double worst = 0.0;
  for (const auto& b : {oracles::radon_linear(), oracles::bus_mini(), oracles::occupancy_mini()}) {
    QemConfig cfg;
    cfg.K = 8;
    cfg.T = 50;
    cfg.seed = 5;
    const Model plain = compile(b.ir);
    const Trace base = run_qem(plain, cfg);
    const std::size_t idx = *plain.ir.latent_index(*b.scaled_latent);
    for (double alpha : {1e-2, 1e-3, 1e-4}) {
      const Model sc = compile(oracles::scaled(b.ir, *b.scaled_latent, alpha));
      const Trace tr = run_qem(sc, cfg);
      for (std::size_t r = 0; r < cfg.T; ++r)
        for (std::size_t i = 0; i < base.rows[r].moments.size(); ++i)
          for (std::size_t c = 0; c < base.rows[r].moments[i].size(); ++c) {
            const auto& want = base.rows[r].moments[i][c];
            const auto got = i == idx ? scale_mean_params(tr.rows[r].moments[i][c], alpha) : tr.rows[r].moments[i][c];
            for (std::size_t s = 0; s < stat_count(want.family); ++s) worst = std::max(worst, rel(got.m[s], want.m[s]));
          }
    }
  }
  return {worst <= 1e-6, fmt("3 models x 3 scales x 50 iterations, worst relative error %.3g", worst)};
}

Outcome convergence_trend() {
  QemConfig cfg;
  cfg.K = 30;
  cfg.T = 250;
  const Trace full = run_qem(oracles::radon_full().ir, cfg);
  double first = 0.0, last = 0.0;
  for (std::size_t r = 0; r < 10; ++r) {
    first += full.rows[r].log_evidence / 10;
    last += full.rows[cfg.T - 10 + r].log_evidence / 10;
  }
  const auto lin = oracles::radon_linear();
  const auto exact = oracles::linear_gaussian_posterior(lin.ir);
  const Trace t = run_qem(lin.ir, cfg);
  const double m1 = mse(first_moments(t, 0, exact), exact.first_moments());
  const double mT = mse(first_moments(t, cfg.T - 1, exact), exact.first_moments());
  return {last > first && m1 >= 10.0 * mT,
          fmt("radon_full log evidence first 10 %.3f, last 10 %.3f; radon_linear MSE %.4g -> %.4g (%.0fx)", first, last,
              m1, mT, m1 / mT)};
}

Outcome mpiw_beats_global() {
  const auto b = oracles::conjugate_chain(8);
  const auto exact = oracles::linear_gaussian_posterior(b.ir);
  const Model m = compile(b.ir);
  double mp = 0.0, gl = 0.0;
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    QemConfig cfg;
    cfg.K = 8;
    cfg.T = 100;
    cfg.seed = static_cast<std::uint64_t>(s);
    const Trace a = run_qem(m, cfg);
    mp += mse(first_moments(a, cfg.T - 1, exact), exact.first_moments()) / seeds;
    cfg.estep = EStep::global_iw;
    const Trace g = run_qem(m, cfg);
    gl += mse(first_moments(g, cfg.T - 1, exact), exact.first_moments()) / seeds;
  }
  return {mp < gl, fmt("mean final MSE: MPIW %.4g, global IW %.4g", mp, gl)};
}

Outcome m_step_inversions() {
  const CounterRng rng(42, {label_hash("acceptance-roundtrip")});
  std::uint64_t c = 0;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double a = std::exp(-2.0 + 5.0 * rng.uniform(c++)), b = std::exp(-2.0 + 5.0 * rng.uniform(c++));
    for (const auto& p : {beta(a, b), gamma(a, b)}) {
      const auto back = mean_to_conventional(conventional_to_mean(p));
      for (std::size_t j = 0; j < 2; ++j) worst = std::max(worst, rel(back[j], p[j]));
    }
  }
  // Beta(1,1): E[log z] = E[log(1-z)] = psi(1) - psi(2) = -1
  const auto flat = conventional_to_mean(beta(1.0, 1.0));
  const auto back = mean_to_conventional({Family::beta, {-1.0, -1.0}});
  const double flat_err = std::max({std::abs(flat.m[0] + 1.0), std::abs(flat.m[1] + 1.0), std::abs(back[0] - 1.0),
                                    std::abs(back[1] - 1.0)});
  return {worst <= 1e-6 && flat_err <= 1e-12,
          fmt("worst round-trip relative error %.3g; Beta(1,1) error %.3g", worst, flat_err)};
}

Outcome discrete_latents() {
  const auto b = oracles::occupancy_exact();
  const auto exact = oracles::discrete_posterior(b.ir);
  const auto ze = static_cast<std::size_t>(std::find(exact.latents.begin(), exact.latents.end(), "z") - exact.latents.begin());
  const Model m = compile(b.ir);
  auto worst_error = [&](std::uint64_t seed) {
    QemConfig cfg;
    cfg.K = 30;
    cfg.T = 100;
    cfg.seed = seed;
    const Trace t = run_qem(m, cfg);
    const auto zi = static_cast<std::size_t>(std::find(t.latents.begin(), t.latents.end(), "z") - t.latents.begin());
    double worst = 0.0;
    for (std::size_t c = 0; c < exact.moments[ze].size(); ++c)
      worst = std::max(worst, std::abs(t.final_state.latents[zi].conv[c].values[0] - exact.moments[ze][c].m[0]));
    return worst;
  };
  const double worst = worst_error(0);
  const int seeds = 20;
  int hits = 0;
  for (int s = 0; s < seeds; ++s) hits += worst_error(static_cast<std::uint64_t>(s)) <= 0.02;
  return {worst <= 0.02, fmt("%zu sites, seed 0 worst |q(z=1) - p(z=1|x)| %.4f; %d of %d seeds meet 0.02",
                             exact.moments[ze].size(), worst, hits, seeds)};
}

Outcome memory_bound() {
  std::string detail;
  bool pass = true;
  for (const auto& b : {oracles::conjugate_chain(4), oracles::conjugate_chain(8), oracles::radon_linear(),
                        oracles::radon_full(), oracles::bus_mini(), oracles::occupancy_mini(), oracles::occupancy_exact()}) {
    // A latent's factor spans itself and its parents; an observation's spans its parents.
    const auto report = validate(b.ir);
    std::size_t bound = 0;
    for (const auto& [name, ps] : report.latent_parents) bound = std::max(bound, 1 + ps.size());
    for (const auto& [name, ps] : report.observation_parents) bound = std::max(bound, ps.size());
    const Model m = compile(b.ir);
    const QState q = initial_state(m);
    const auto bank = draw_sample_bank(m, q, 1, 3);
    const auto est = posterior_moments(m, bank, q, build_log_factors(m, bank, q));
    pass = pass && est.peak_rank == bound;
    detail += fmt(" %s %zu/%zu", b.id.c_str(), est.peak_rank, bound);
  }
  return {pass, "peak rank / largest factor arity:" + detail};
}

Outcome determinism() {
  const auto dir = fs::temp_directory_path() / ("qem_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (const char* name : {"a", "b"}) {
    std::ofstream(dir / (std::string(name) + ".cfg"))
        << "builtin = bus_mini\nK = 6\nT = 20\nseed = 3\npredictive_samples = 200\noutput = " << name << "\n";
  }
  std::ostringstream out, err;
  const int ra = cli::cmd_run(dir / "a.cfg", out, err);
  const int rb = cli::cmd_run(dir / "b.cfg", out, err);
  const bool same = ra == 0 && rb == 0 && dsl::read_text(dir / "a" / "trace.csv") == dsl::read_text(dir / "b" / "trace.csv");

  const auto b = oracles::bus_mini();
  QemConfig cfg;
  cfg.K = 6;
  cfg.T = 20;
  cfg.seed = 3;
  cfg.predictive_samples = 200;
  cfg.test_data = oracles::synth_data(b.ir, {.seed = 1000, .overrides = b.truth}).data;
  const Trace t = run_qem(b.ir, cfg);
  std::ifstream in(dir / "a" / "trace.csv", std::ios::binary);
  const Trace back = ra == 0 ? io::read_trace(in, t) : Trace{};
  const bool lossless = back.rows == t.rows;
  fs::remove_all(dir);
  return {same && lossless, fmt("repeated run byte-identical: %s; re-parsed trace equals in-memory trace: %s",
                                same ? "yes" : "no", lossless ? "yes" : "no")};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> all{
      {1, "enumeration equivalence", 60, enumeration_equivalence},
      {2, "evidence unbiasedness", 120, evidence_unbiased},
      {3, "EMA closed form and variance decay", 60, ema_schedule},
      {4, "one-step behaviour at K=128", 10, one_step},
      {5, "reparameterization invariance", 120, reparameterization},
      {6, "convergence trend on radon", 120, convergence_trend},
      {7, "MPIW beats global IW on an 8-latent chain", 180, mpiw_beats_global},
      {8, "Beta and Gamma M-step inversions", 5, m_step_inversions},
      {9, "discrete latents on occupancy", 60, discrete_latents},
      {10, "peak factor rank", 5, memory_bound},
      {11, "determinism and CSV round trip", 10, determinism},
  };
  int failures = 0;
  for (const auto& c : all) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s [%2d] %s: %s (%.2fs of %.0fs)%s\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs,
                c.budget_s, in_time ? "" : " over time budget");
    std::fflush(stdout);
  }
  return failures;
}
