#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>

#include "qem/error.hpp"
#include "qem/special_functions.hpp"

namespace qem {

enum class Family { gaussian, bernoulli, beta, gamma, negative_binomial_lik };

inline std::string_view family_name(Family f) {
  switch (f) {
    case Family::gaussian: return "Gaussian";
    case Family::bernoulli: return "Bernoulli";
    case Family::beta: return "Beta";
    case Family::gamma: return "Gamma";
    case Family::negative_binomial_lik: return "NegativeBinomialLik";
  }
  return "?";
}

inline std::optional<Family> family_from_name(std::string_view name) {
  for (Family f : {Family::gaussian, Family::bernoulli, Family::beta, Family::gamma, Family::negative_binomial_lik}) {
    if (family_name(f) == name) return f;
  }
  return std::nullopt;
}

/// Number of conventional parameters the family takes.
inline std::size_t param_count(Family f) {
  switch (f) {
    case Family::bernoulli: return 1;
    default: return 2;
  }
}

/// Length of the sufficient-statistic (and mean-parameter) vector.
inline std::size_t stat_count(Family f) {
  switch (f) {
    case Family::bernoulli: return 1;
    case Family::negative_binomial_lik: return 0;
    default: return 2;
  }
}

/// Families that can serve as a latent's approximate posterior.
inline bool is_proposal_family(Family f) { return f != Family::negative_binomial_lik; }

/// Families whose support is discrete.
inline bool is_discrete(Family f) { return f == Family::bernoulli || f == Family::negative_binomial_lik; }

using ParamArray = std::array<double, 2>;

// Gaussian: (mean, variance). Bernoulli: (p). Beta: (alpha, beta). Gamma: (shape, rate).
// NegativeBinomialLik: (total_count, success probability).
struct ConventionalParams {
  Family family = Family::gaussian;
  ParamArray values{0.0, 1.0};

  std::size_t size() const { return param_count(family); }
  double operator[](std::size_t i) const { return values[i]; }
  bool operator==(const ConventionalParams&) const = default;
};

struct NaturalParams {
  Family family = Family::gaussian;
  ParamArray eta{0.0, -0.5};

  std::size_t size() const { return stat_count(family); }
  double operator[](std::size_t i) const { return eta[i]; }
  bool operator==(const NaturalParams&) const = default;
};

/// Expected sufficient statistics E[T(z)].
struct MeanParams {
  Family family = Family::gaussian;
  ParamArray m{0.0, 1.0};

  std::size_t size() const { return stat_count(family); }
  double operator[](std::size_t i) const { return m[i]; }
  bool operator==(const MeanParams&) const = default;
};

namespace detail {

inline std::string describe(std::string_view what, Family f, const ParamArray& v, std::size_t n) {
  std::ostringstream os;
  os.precision(17);
  os << what << " " << family_name(f) << "(";
  for (std::size_t i = 0; i < n; ++i) os << (i ? ", " : "") << v[i];
  os << ")";
  return os.str();
}

}  // namespace detail

inline bool params_valid(Family f, const ParamArray& v) {
  switch (f) {
    case Family::gaussian: return std::isfinite(v[0]) && std::isfinite(v[1]) && v[1] > 0.0;
    case Family::bernoulli: return v[0] > 0.0 && v[0] < 1.0;
    case Family::beta:
    case Family::gamma: return v[0] > 0.0 && v[1] > 0.0 && std::isfinite(v[0]) && std::isfinite(v[1]);
    case Family::negative_binomial_lik: return v[0] > 0.0 && std::isfinite(v[0]) && v[1] > 0.0 && v[1] < 1.0;
  }
  return false;
}

inline ConventionalParams make_params(Family f, std::span<const double> values) {
  if (values.size() != param_count(f)) {
    fail(ErrorKind::domain, std::string(family_name(f)) + " takes " + std::to_string(param_count(f)) +
                                " parameters, got " + std::to_string(values.size()));
  }
  ConventionalParams p{f, {0.0, 0.0}};
  for (std::size_t i = 0; i < values.size(); ++i) p.values[i] = values[i];
  if (!params_valid(f, p.values)) fail(ErrorKind::domain, detail::describe("invalid parameters", f, p.values, p.size()));
  return p;
}

inline ConventionalParams gaussian(double mean, double variance) {
  const double v[] = {mean, variance};
  return make_params(Family::gaussian, v);
}
inline ConventionalParams bernoulli(double p) {
  const double v[] = {p};
  return make_params(Family::bernoulli, v);
}
inline ConventionalParams beta(double a, double b) {
  const double v[] = {a, b};
  return make_params(Family::beta, v);
}
inline ConventionalParams gamma(double shape, double rate) {
  const double v[] = {shape, rate};
  return make_params(Family::gamma, v);
}
inline ConventionalParams negative_binomial(double total_count, double p) {
  const double v[] = {total_count, p};
  return make_params(Family::negative_binomial_lik, v);
}

inline bool in_support(Family f, double x) {
  switch (f) {
    case Family::gaussian: return std::isfinite(x);
    case Family::bernoulli: return x == 0.0 || x == 1.0;
    case Family::beta: return x > 0.0 && x < 1.0;
    case Family::gamma: return x > 0.0 && std::isfinite(x);
    case Family::negative_binomial_lik: return x >= 0.0 && std::isfinite(x) && x == std::floor(x);
  }
  return false;
}

// Unchecked density kernels shared by the engine's inner loops. Invalid parameters yield NaN.
namespace kernel {

inline constexpr double half_log_2pi = 0.91893853320467274178;

inline double gaussian(double x, double mean, double var) {
  if (!(var > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  const double d = x - mean;
  return -half_log_2pi - 0.5 * std::log(var) - 0.5 * d * d / var;
}

inline double bernoulli(double x, double p) {
  if (!(p >= 0.0 && p <= 1.0)) return std::numeric_limits<double>::quiet_NaN();
  if (x == 1.0) return std::log(p);
  if (x == 0.0) return std::log1p(-p);
  return -std::numeric_limits<double>::infinity();
}

inline double bernoulli_logit(double x, double logit) {
  if (std::isnan(logit)) return logit;
  if (x == 1.0) return special::log_sigmoid(logit);
  if (x == 0.0) return special::log_sigmoid(-logit);
  return -std::numeric_limits<double>::infinity();
}

inline double beta(double x, double a, double b) {
  if (!(a > 0.0 && b > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  if (!(x > 0.0 && x < 1.0)) return -std::numeric_limits<double>::infinity();
  return (a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) - special::log_beta(a, b);
}

inline double gamma(double x, double shape, double rate) {
  if (!(shape > 0.0 && rate > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  if (!(x > 0.0)) return -std::numeric_limits<double>::infinity();
  return shape * std::log(rate) + (shape - 1.0) * std::log(x) - rate * x - std::lgamma(shape);
}

inline double negative_binomial(double x, double total_count, double p) {
  if (!(total_count > 0.0 && p > 0.0 && p < 1.0)) return std::numeric_limits<double>::quiet_NaN();
  if (!(x >= 0.0 && x == std::floor(x))) return -std::numeric_limits<double>::infinity();
  return std::lgamma(x + total_count) - std::lgamma(total_count) - std::lgamma(x + 1.0) + x * std::log(p) +
         total_count * std::log1p(-p);
}

inline double log_prob(Family f, double x, double p0, double p1) {
  switch (f) {
    case Family::gaussian: return gaussian(x, p0, p1);
    case Family::bernoulli: return bernoulli(x, p0);
    case Family::beta: return beta(x, p0, p1);
    case Family::gamma: return gamma(x, p0, p1);
    case Family::negative_binomial_lik: return negative_binomial(x, p0, p1);
  }
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace kernel

/// Log density (or mass) of `value`. Continuous families reject out-of-support values.
inline double log_prob(const ConventionalParams& params, double value) {
  if (!params_valid(params.family, params.values)) {
    fail(ErrorKind::domain, detail::describe("invalid parameters", params.family, params.values, params.size()));
  }
  if (!in_support(params.family, value)) {
    if (is_discrete(params.family) && std::isfinite(value)) return -std::numeric_limits<double>::infinity();
    fail(ErrorKind::domain, "value " + std::to_string(value) + " outside the support of " +
                                std::string(family_name(params.family)));
  }
  return kernel::log_prob(params.family, value, params.values[0], params.values[1]);
}

namespace detail {

// Standard Gamma(shape, 1) quantile by bracketed Newton with bisection fallback.
inline double standard_gamma_quantile(double shape, double u) {
  double lo = 0.0;
  double hi = std::max(1.0, shape);
  while (special::gamma_p(shape, hi) < u) {
    lo = hi;
    hi *= 2.0;
    if (!std::isfinite(hi)) fail(ErrorKind::numerical, "gamma quantile bracket overflow");
  }
  double x;
  {
    // Wilson-Hilferty start, falling back to the small-u power law.
    const double z = special::normal_quantile(u);
    const double c = 1.0 - 1.0 / (9.0 * shape) + z / (3.0 * std::sqrt(shape));
    x = shape * c * c * c;
    if (!(x > lo && x < hi)) x = std::exp((std::log(u) + std::lgamma(shape + 1.0)) / shape);
    if (!(x > lo && x < hi)) x = 0.5 * (lo + hi);
  }
  const double log_norm = std::lgamma(shape);
  for (int it = 0; it < 200; ++it) {
    const double f = special::gamma_p(shape, x) - u;
    if (f == 0.0) return x;
    if (f < 0.0) lo = x; else hi = x;
    const double pdf = std::exp((shape - 1.0) * std::log(x) - x - log_norm);
    double next = x - f / pdf;
    if (!(next > lo && next < hi) || !std::isfinite(next)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= 4.0 * std::numeric_limits<double>::epsilon() * x || hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * hi) {
      x = next;
      if (std::abs(special::gamma_p(shape, x) - u) <= 1e-12) return x;
      break;
    }
    x = next;
  }
  if (std::abs(special::gamma_p(shape, x) - u) <= 1e-12) return x;
  fail(ErrorKind::numerical, "gamma quantile did not converge for shape " + std::to_string(shape) +
                                 ", u " + std::to_string(u));
}

inline double beta_quantile(double a, double b, double u) {
  double lo = 0.0;
  double hi = 1.0;
  double x = std::clamp(a / (a + b), 1e-12, 1.0 - 1e-12);
  const double log_norm = special::log_beta(a, b);
  for (int it = 0; it < 200; ++it) {
    const double f = special::beta_i(a, b, x) - u;
    if (f == 0.0) return x;
    if (f < 0.0) lo = x; else hi = x;
    const double pdf = std::exp((a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) - log_norm);
    double next = x - f / pdf;
    if (!(next > lo && next < hi) || !std::isfinite(next)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(x, 1e-300) ||
        hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * hi) {
      x = next;
      break;
    }
    x = next;
  }
  if (std::abs(special::beta_i(a, b, x) - u) <= 1e-12) return x;
  fail(ErrorKind::numerical, "beta quantile did not converge for (" + std::to_string(a) + ", " +
                                 std::to_string(b) + "), u " + std::to_string(u));
}

}  // namespace detail

/// Inverse-transform sample F^{-1}(u) for u in (0, 1).
inline double sample_it(const ConventionalParams& params, double u) {
  if (!(u > 0.0 && u < 1.0)) fail(ErrorKind::domain, "sample_it requires u in (0, 1)");
  const auto& v = params.values;
  switch (params.family) {
    case Family::gaussian: return v[0] + std::sqrt(v[1]) * special::normal_quantile(u);
    case Family::bernoulli: return u > 1.0 - v[0] ? 1.0 : 0.0;
    case Family::gamma: return detail::standard_gamma_quantile(v[0], u) / v[1];
    case Family::beta: return detail::beta_quantile(v[0], v[1], u);
    case Family::negative_binomial_lik: {
      double y = 0.0;
      double cdf = 0.0;
      for (int it = 0; it < 1000000; ++it, y += 1.0) {
        cdf += std::exp(kernel::negative_binomial(y, v[0], v[1]));
        if (cdf >= u) return y;
      }
      return y;
    }
  }
  return std::numeric_limits<double>::quiet_NaN();
}

/// T(z): Gaussian (z, z^2), Bernoulli (z), Beta (ln z, ln(1-z)), Gamma (z, ln z).
inline MeanParams sufficient_stats(Family f, double z) {
  if (f == Family::negative_binomial_lik) fail(ErrorKind::domain, "NegativeBinomialLik has no proposal statistics");
  if (!in_support(f, z)) {
    fail(ErrorKind::domain, "value " + std::to_string(z) + " outside the support of " + std::string(family_name(f)));
  }
  switch (f) {
    case Family::gaussian: return {f, {z, z * z}};
    case Family::bernoulli: return {f, {z, 0.0}};
    case Family::beta: return {f, {std::log(z), std::log1p(-z)}};
    case Family::gamma: return {f, {z, std::log(z)}};
    default: break;
  }
  return {};
}

/// Whether m lies in the interior of the family's mean-parameter domain.
inline bool is_feasible(const MeanParams& m) {
  const auto& v = m.m;
  switch (m.family) {
    case Family::gaussian: return std::isfinite(v[0]) && std::isfinite(v[1]) && v[1] - v[0] * v[0] > 0.0;
    case Family::bernoulli: return v[0] > 0.0 && v[0] < 1.0;
    case Family::beta: return v[0] < 0.0 && v[1] < 0.0 && std::exp(v[0]) + std::exp(v[1]) < 1.0;
    case Family::gamma: return v[0] > 0.0 && std::isfinite(v[0]) && std::isfinite(v[1]) && std::log(v[0]) > v[1];
    case Family::negative_binomial_lik: return false;
  }
  return false;
}

inline MeanParams conventional_to_mean(const ConventionalParams& p) {
  if (!params_valid(p.family, p.values)) {
    fail(ErrorKind::domain, detail::describe("invalid parameters", p.family, p.values, p.size()));
  }
  const auto& v = p.values;
  switch (p.family) {
    case Family::gaussian: return {p.family, {v[0], v[0] * v[0] + v[1]}};
    case Family::bernoulli: return {p.family, {v[0], 0.0}};
    case Family::beta: {
      const double total = special::digamma(v[0] + v[1]);
      return {p.family, {special::digamma(v[0]) - total, special::digamma(v[1]) - total}};
    }
    case Family::gamma: return {p.family, {v[0] / v[1], special::digamma(v[0]) - std::log(v[1])}};
    case Family::negative_binomial_lik: break;
  }
  fail(ErrorKind::domain, "NegativeBinomialLik has no mean parameters");
}

namespace detail {

// Solve ln k - digamma(k) = s (s > 0) by Newton in log k.
inline double gamma_shape_from_log_gap(double s) {
  double k = (3.0 - s + std::sqrt((s - 3.0) * (s - 3.0) + 24.0 * s)) / (12.0 * s);
  double y = std::log(k);
  for (int it = 0; it < 200; ++it) {
    k = std::exp(y);
    const double g = std::log(k) - special::digamma(k) - s;
    const double dg = 1.0 - k * special::trigamma(k);
    const double step = g / dg;
    y -= step;
    if (std::abs(step) <= 1e-15 * std::max(1.0, std::abs(y))) return std::exp(y);
  }
  k = std::exp(y);
  if (std::abs(std::log(k) - special::digamma(k) - s) <= 1e-12 * std::max(1.0, s)) return k;
  fail(ErrorKind::numerical, "gamma shape solve did not converge: target log gap " + std::to_string(s) +
                                 ", last shape " + std::to_string(k));
}

// Solve digamma(a) - digamma(a+b) = m1, digamma(b) - digamma(a+b) = m2 by damped Newton in (ln a, ln b).
inline ParamArray beta_from_log_moments(double m1, double m2) {
  const double e1 = std::exp(m1);
  const double e2 = std::exp(m2);
  const double scale = 0.5 / (1.0 - e1 - e2);
  double la = std::log(0.5 + e1 * scale);
  double lb = std::log(0.5 + e2 * scale);

  auto residual = [&](double la_, double lb_) {
    const double a = std::exp(la_), b = std::exp(lb_);
    const double total = special::digamma(a + b);
    return ParamArray{special::digamma(a) - total - m1, special::digamma(b) - total - m2};
  };
  auto norm = [](const ParamArray& r) { return std::hypot(r[0], r[1]); };

  ParamArray r = residual(la, lb);
  double rn = norm(r);
  for (int it = 0; it < 200; ++it) {
    if (rn <= 1e-14 * std::max(1.0, std::max(std::abs(m1), std::abs(m2)))) return {std::exp(la), std::exp(lb)};
    const double a = std::exp(la), b = std::exp(lb);
    const double t_ab = special::trigamma(a + b);
    // Jacobian with respect to (ln a, ln b).
    const double j11 = (special::trigamma(a) - t_ab) * a;
    const double j12 = -t_ab * b;
    const double j21 = -t_ab * a;
    const double j22 = (special::trigamma(b) - t_ab) * b;
    const double det = j11 * j22 - j12 * j21;
    const double d_la = (j22 * r[0] - j12 * r[1]) / det;
    const double d_lb = (-j21 * r[0] + j11 * r[1]) / det;
    double t = 1.0;
    bool improved = false;
    for (int h = 0; h <= 30; ++h, t *= 0.5) {
      const double na = la - t * d_la, nb = lb - t * d_lb;
      if (!std::isfinite(na) || !std::isfinite(nb) || na > 700.0 || nb > 700.0) continue;
      const ParamArray nr = residual(na, nb);
      const double nn = norm(nr);
      if (nn < rn) {
        la = na;
        lb = nb;
        r = nr;
        rn = nn;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }
  if (rn <= 1e-11 * std::max(1.0, std::max(std::abs(m1), std::abs(m2)))) return {std::exp(la), std::exp(lb)};
  std::ostringstream os;
  os.precision(17);
  os << "beta moment inversion did not converge for m = (" << m1 << ", " << m2 << "); residual " << rn
     << " at (alpha, beta) = (" << std::exp(la) << ", " << std::exp(lb) << ")";
  fail(ErrorKind::numerical, os.str());
}

}  // namespace detail

/// Moment matching: the conventional parameters whose expected sufficient statistics equal m.
inline ConventionalParams mean_to_conventional(const MeanParams& m) {
  if (!is_feasible(m)) fail(ErrorKind::infeasible_moments, detail::describe("infeasible mean parameters", m.family, m.m, m.size()));
  const auto& v = m.m;
  switch (m.family) {
    case Family::gaussian: return {m.family, {v[0], v[1] - v[0] * v[0]}};
    case Family::bernoulli: return {m.family, {v[0], 0.0}};
    case Family::beta: return {m.family, detail::beta_from_log_moments(v[0], v[1])};
    case Family::gamma: {
      const double k = detail::gamma_shape_from_log_gap(std::log(v[0]) - v[1]);
      return {m.family, {k, k / v[0]}};
    }
    case Family::negative_binomial_lik: break;
  }
  fail(ErrorKind::domain, "NegativeBinomialLik has no mean parameters");
}

inline NaturalParams conventional_to_natural(const ConventionalParams& p) {
  if (!params_valid(p.family, p.values)) {
    fail(ErrorKind::domain, detail::describe("invalid parameters", p.family, p.values, p.size()));
  }
  const auto& v = p.values;
  switch (p.family) {
    case Family::gaussian: return {p.family, {v[0] / v[1], -0.5 / v[1]}};
    case Family::bernoulli: return {p.family, {special::logit(v[0]), 0.0}};
    case Family::beta: return {p.family, {v[0] - 1.0, v[1] - 1.0}};
    case Family::gamma: return {p.family, {v[0] - 1.0, -v[1]}};
    case Family::negative_binomial_lik: break;
  }
  fail(ErrorKind::domain, "NegativeBinomialLik has no natural parameters");
}

inline ConventionalParams natural_to_conventional(const NaturalParams& n) {
  const auto& e = n.eta;
  switch (n.family) {
    case Family::gaussian:
      if (!(e[1] < 0.0) || !std::isfinite(e[0])) break;
      return {n.family, {-e[0] / (2.0 * e[1]), -0.5 / e[1]}};
    case Family::bernoulli:
      if (!std::isfinite(e[0])) break;
      return {n.family, {special::sigmoid(e[0]), 0.0}};
    case Family::beta:
      if (!(e[0] > -1.0 && e[1] > -1.0) || !std::isfinite(e[0]) || !std::isfinite(e[1])) break;
      return {n.family, {e[0] + 1.0, e[1] + 1.0}};
    case Family::gamma:
      if (!(e[0] > -1.0 && e[1] < 0.0) || !std::isfinite(e[0]) || !std::isfinite(e[1])) break;
      return {n.family, {e[0] + 1.0, -e[1]}};
    case Family::negative_binomial_lik: break;
  }
  fail(ErrorKind::domain, detail::describe("invalid natural parameters", n.family, n.eta, n.size()));
}

/// Mean parameters of alpha * z when z has mean parameters m.
inline MeanParams scale_mean_params(const MeanParams& m, double alpha) {
  if (alpha == 0.0 || !std::isfinite(alpha)) fail(ErrorKind::domain, "scale factor must be finite and nonzero");
  switch (m.family) {
    case Family::gaussian: return {m.family, {alpha * m.m[0], alpha * alpha * m.m[1]}};
    case Family::gamma:
      if (alpha < 0.0) fail(ErrorKind::not_closed_under_scaling, "Gamma is not closed under negative scaling");
      return {m.family, {alpha * m.m[0], m.m[1] + std::log(alpha)}};
    default: break;
  }
  fail(ErrorKind::not_closed_under_scaling,
       std::string(family_name(m.family)) + " is not closed under multiplication by a constant");
}

}  // namespace qem
