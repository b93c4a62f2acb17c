#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qem/distributions.hpp"
#include "qem/engine.hpp"
#include "qem/error.hpp"
#include "qem/graph.hpp"

namespace qem {

struct EmaConfig {
  enum class Mode { fixed, scheduled };
  Mode mode = Mode::scheduled;
  double new_weight = 0.3;  // fixed mode: weight on the fresh estimate
  double p = 0.5;           // scheduled mode exponent

  static EmaConfig fixed(double w) { return {Mode::fixed, w, 0.5}; }
  static EmaConfig scheduled(double p) { return {Mode::scheduled, 0.3, p}; }
  bool operator==(const EmaConfig&) const = default;
};

enum class Denominator { self_normalized, fresh_sample };
enum class EStep { mpiw, global_iw };

struct QemConfig {
  std::size_t K = 30;
  std::size_t T = 100;
  std::uint64_t seed = 0;
  EmaConfig ema;
  Denominator denominator = Denominator::self_normalized;
  double variance_floor = 1e-8;
  EStep estep = EStep::mpiw;
  bool adapt = true;  // false keeps the initial proposal and only averages the estimates
  FactorOptions factors;
  bool record_timing = false;
  std::size_t predictive_samples = 0;
  std::optional<Dataset> test_data;
};

/// History weight for iteration t (1-based).
inline double lambda_of(std::size_t t, const EmaConfig& ema) {
  if (t < 1) fail(ErrorKind::config, "iterations are numbered from 1");
  if (ema.mode == EmaConfig::Mode::fixed) return 1.0 - ema.new_weight;
  return 1.0 - std::pow(static_cast<double>(t), -ema.p);
}

inline void check_ema(const EmaConfig& ema) {
  if (ema.mode == EmaConfig::Mode::fixed && !(ema.new_weight > 0.0 && ema.new_weight <= 1.0))
    fail(ErrorKind::config, "fixed EMA weight must lie in (0, 1]");
  if (ema.mode == EmaConfig::Mode::scheduled && !(ema.p > 0.0 && ema.p < 1.0))
    fail(ErrorKind::config, "EMA schedule exponent must lie in (0, 1)");
}

inline MeanParams ema_update(const MeanParams& prev, const MeanParams& next, double lambda) {
  if (prev.family != next.family) fail(ErrorKind::validation, "EMA over mean parameters of different families");
  MeanParams out{prev.family, {0.0, 0.0}};
  for (std::size_t i = 0; i < stat_count(prev.family); ++i) out.m[i] = lambda * prev.m[i] + (1.0 - lambda) * next.m[i];
  return out;
}

inline constexpr double bernoulli_margin = 1e-10;

/// Sets each proposal from mean parameters. Gaussian variances below `floor` and Bernoulli
/// probabilities at 0 or 1 are clamped and counted; other infeasible moments are errors.
inline QState m_step(const QState& q, const std::vector<std::vector<MeanParams>>& m, double floor,
                     const std::vector<std::string>& names = {}) {
  if (m.size() != q.latents.size()) fail(ErrorKind::validation, "moment estimate does not cover every latent");
  QState out;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto name = i < names.size() ? names[i] : "#" + std::to_string(i);
    QState::Entry e;
    e.family = q.latents[i].family;
    for (const MeanParams& raw : m[i]) {
      if (raw.family != e.family) fail(ErrorKind::m_step, "family mismatch for latent '" + name + "'");
      MeanParams mp = raw;
      if (!std::isfinite(mp.m[0]) || (stat_count(mp.family) > 1 && !std::isfinite(mp.m[1])))
        fail(ErrorKind::m_step, "non-finite moments for latent '" + name + "'");
      if (mp.family == Family::gaussian && mp.m[1] - mp.m[0] * mp.m[0] < floor) {
        mp.m[1] = mp.m[0] * mp.m[0] + floor;
        ++out.clamps;
      } else if (mp.family == Family::bernoulli && (mp.m[0] < bernoulli_margin || mp.m[0] > 1.0 - bernoulli_margin)) {
        mp.m[0] = std::clamp(mp.m[0], bernoulli_margin, 1.0 - bernoulli_margin);
        ++out.clamps;
      }
      ConventionalParams conv;
      try {
        conv = mean_to_conventional(mp);
      } catch (const Error& err) {
        fail(ErrorKind::m_step, "latent '" + name + "': " + err.detail());
      }
      if (mp.family == Family::gaussian) conv.values[1] = std::max(conv.values[1], floor);
      e.mean.push_back(mp);
      e.conv.push_back(conv);
    }
    out.latents.push_back(std::move(e));
  }
  return out;
}

/// EMA carried out over natural parameters instead. Only used to show its fixed point differs.
inline ConventionalParams ema_over_natural(const ConventionalParams& prev, const NaturalParams& next, double lambda) {
  const NaturalParams a = conventional_to_natural(prev);
  if (a.family != next.family) fail(ErrorKind::validation, "EMA over natural parameters of different families");
  NaturalParams out{a.family, {0.0, 0.0}};
  for (std::size_t i = 0; i < stat_count(a.family); ++i) out.eta[i] = lambda * a.eta[i] + (1.0 - lambda) * next.eta[i];
  return natural_to_conventional(out);
}

struct TraceRow {
  std::size_t iter = 0;
  double lambda = 0.0;
  double log_evidence = 0.0;
  std::optional<double> predictive_ll;
  std::vector<std::vector<MeanParams>> moments;  // post-EMA, per latent and cell
  std::size_t clamp_count = 0;
  std::optional<double> elapsed_ms;
  bool operator==(const TraceRow&) const = default;
};

struct Trace {
  std::vector<std::string> latents;
  std::vector<std::vector<std::string>> cells;
  std::vector<Family> families;
  std::vector<TraceRow> rows;
  QState final_state;
  bool operator==(const Trace&) const = default;

  /// First moments of the final row, flattened in cell-label order.
  std::vector<double> final_first_moments() const {
    std::vector<double> out;
    if (rows.empty()) return out;
    for (const auto& l : rows.back().moments)
      for (const auto& m : l) out.push_back(m.m[0]);
    return out;
  }
};

inline std::vector<std::vector<MeanParams>> state_moments(const QState& q) {
  std::vector<std::vector<MeanParams>> out;
  for (const auto& e : q.latents) out.push_back(e.mean);
  return out;
}

/// M-step from m_0, then T rounds of E-step, EMA and M-step.
inline Trace run_qem(const Model& model, const QemConfig& cfg, std::optional<QState> init = std::nullopt) {
  if (cfg.K < 1) fail(ErrorKind::config, "K must be at least 1");
  if (cfg.T < 1) fail(ErrorKind::config, "T must be at least 1");
  if (!(cfg.variance_floor > 0.0)) fail(ErrorKind::config, "variance floor must be positive");
  check_ema(cfg.ema);

  Trace trace;
  for (const auto& l : model.ir.latents) trace.latents.push_back(l.name);
  trace.cells = cell_labels(model);

  const QState q0 = init ? *init : initial_state(model);
  for (const auto& l : q0.latents) trace.families.push_back(l.family);
  std::vector<std::vector<MeanParams>> m = state_moments(q0);
  QState q = m_step(q0, m, cfg.variance_floor, trace.latents);
  m = state_moments(q);

  using clock = std::chrono::steady_clock;
  for (std::size_t t = 1; t <= cfg.T; ++t) {
    const auto start = clock::now();
    TraceRow row;
    row.iter = t;
    try {
      MomentEstimate est;
      std::optional<double> pll;
      if (cfg.estep == EStep::global_iw) {
        est = global_iw(model, q, cfg.seed, cfg.K, t, cfg.factors);
      } else {
        const auto bank = draw_sample_bank(model, q, cfg.seed, cfg.K, t);
        const auto factors = build_log_factors(model, bank, q, cfg.factors);
        if (cfg.denominator == Denominator::fresh_sample) {
          const double z = fresh_denominator_evidence(model, q, cfg.seed, cfg.K, t, cfg.factors);
          est = posterior_moments(model, bank, q, factors, Normalizer::external, z);
        } else {
          est = posterior_moments(model, bank, q, factors);
        }
        if (cfg.predictive_samples > 0 && cfg.test_data) {
          const auto idx = backward_resample(factors, model.latent_count(), cfg.K, derive_seed(cfg.seed, "predictive") + t,
                                             cfg.predictive_samples);
          pll = predictive_log_likelihood(model, bank, q, idx, *cfg.test_data, cfg.factors);
        }
      }
      row.lambda = lambda_of(t, cfg.ema);
      row.log_evidence = est.log_evidence;
      row.predictive_ll = pll;
      for (std::size_t i = 0; i < m.size(); ++i)
        for (std::size_t c = 0; c < m[i].size(); ++c) m[i][c] = ema_update(m[i][c], est.moments[i][c], row.lambda);
      if (cfg.adapt) {
        q = m_step(q, m, cfg.variance_floor, trace.latents);
        m = state_moments(q);
        row.clamp_count = q.clamps;
      }
      row.moments = m;
    } catch (const Error& e) {
      fail(e.kind(), "iteration " + std::to_string(t) + ": " + e.detail());
    }
    if (cfg.record_timing) row.elapsed_ms = std::chrono::duration<double, std::milli>(clock::now() - start).count();
    trace.rows.push_back(std::move(row));
  }
  trace.final_state = q;
  return trace;
}

inline Trace run_qem(const ModelIR& ir, const QemConfig& cfg) { return run_qem(compile(ir), cfg); }

}  // namespace qem
