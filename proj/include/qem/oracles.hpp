#pragma once

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "qem/distributions.hpp"
#include "qem/engine.hpp"
#include "qem/error.hpp"
#include "qem/graph.hpp"
#include "qem/random.hpp"
#include "qem/special_functions.hpp"
#include "qem/tensor.hpp"

namespace qem::oracles {

// ---------------------------------------------------------------------------
// Direct density evaluation, independent of the factor machinery

namespace detail {

inline Tensor over_plates(const ModelIR& ir, const std::vector<std::string>& plates, const Tensor& t) {
  auto axes = ir.plate_axes(plates);
  auto shape = ir.plate_shape(plates);
  std::vector<std::size_t> order(axes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return axes[a] < axes[b]; });
  std::vector<Axis> sa;
  std::vector<std::size_t> ss;
  for (auto o : order) {
    sa.push_back(axes[o]);
    ss.push_back(shape[o]);
  }
  const Tensor zeros(sa, ss, 0.0);
  Tensor out = broadcast_map<2>({&zeros, &t}, [](double, double x) { return x; });
  if (out.axes() != sa) fail(ErrorKind::broadcast, "expression spans axes outside its owner's plates");
  return out;
}

using Values = std::map<std::string, Tensor>;

inline Lookup lookup_of(const ModelIR& ir, const Values& values) {
  return [&ir, &values](const std::string& n) -> const Tensor& {
    if (auto it = values.find(n); it != values.end()) return it->second;
    if (auto it = ir.data.find(n); it != ir.data.end()) return it->second;
    fail(ErrorKind::validation, "unbound name '" + n + "'");
  };
}

// log f(value | params) summed over cells, via the checked per-element densities.
inline double term_log_density(const ModelIR& ir, Family family, const std::vector<Expr>& params,
                               const std::vector<std::string>& plates, const Tensor& value, const Values& values) {
  const auto look = lookup_of(ir, values);
  const Tensor v = over_plates(ir, plates, value);
  double total = 0.0;
  if (family == Family::bernoulli && params[0].op == Expr::Op::sigmoid) {
    const Tensor l = over_plates(ir, plates, eval_expr(params[0].args[0], look));
    for (std::size_t c = 0; c < v.size(); ++c) {
      if (v[c] != 0.0 && v[c] != 1.0) fail(ErrorKind::domain, "Bernoulli value outside {0, 1}");
      total += v[c] == 1.0 ? special::log_sigmoid(l[c]) : special::log_sigmoid(-l[c]);
    }
    return total;
  }
  std::vector<Tensor> ps;
  for (const auto& e : params) ps.push_back(over_plates(ir, plates, eval_expr(e, look)));
  for (std::size_t c = 0; c < v.size(); ++c) {
    std::vector<double> pv;
    for (const auto& p : ps) pv.push_back(p[c]);
    total += log_prob(make_params(family, pv), v[c]);
  }
  return total;
}

}  // namespace detail

/// log P(x, z) with every latent bound to a plain plate tensor (no copy axes).
inline double log_joint(const ModelIR& ir, const detail::Values& latents) {
  double total = 0.0;
  for (const auto& l : ir.latents)
    total += detail::term_log_density(ir, l.prior_family, l.prior_params, l.plates, latents.at(l.name), latents);
  for (const auto& o : ir.observations) {
    auto it = ir.data.find(o.data);
    if (it == ir.data.end()) fail(ErrorKind::schema, "no data column '" + o.data + "'");
    total += detail::term_log_density(ir, o.family, o.params, o.plates, it->second, latents);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Brute-force enumeration over every copy combination

struct Enumeration {
  double log_pe = 0.0;
  std::vector<std::vector<MeanParams>> moments;
};

inline constexpr double enumeration_guard = 1e6;

inline Enumeration enumerate(const Model& m, const SampleBank& bank, const QState& q) {
  const std::size_t n = m.latent_count();
  const std::size_t K = bank.K;
  if (std::pow(static_cast<double>(K), static_cast<double>(n)) > enumeration_guard)
    fail(ErrorKind::guard_exceeded, "K^n exceeds the enumeration guard of 1e6");

  // Per latent and copy: plate values and the proposal log density.
  std::vector<std::vector<Tensor>> z(n);
  std::vector<std::vector<double>> log_q(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      Tensor v = slice(bank.values[i], Axis::copy(static_cast<int>(i)), k);
      double lq = 0.0;
      for (std::size_t c = 0; c < v.size(); ++c) lq += log_prob(q.latents[i].conv[c], v[c]);
      z[i].push_back(std::move(v));
      log_q[i].push_back(lq);
    }
  }

  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= K;
  std::vector<double> log_r(total);
  std::vector<std::vector<std::size_t>> combos(total, std::vector<std::size_t>(n));
  for (std::size_t flat = 0; flat < total; ++flat) {
    auto& k = combos[flat];
    for (std::size_t i = n, rest = flat; i-- > 0; rest /= K) k[i] = rest % K;
    detail::Values vals;
    double lq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      vals[m.ir.latents[i].name] = z[i][k[i]];
      lq += log_q[i][k[i]];
    }
    log_r[flat] = log_joint(m.ir, vals) - lq;
  }

  Enumeration out;
  const double lse = logsumexp(log_r);
  out.log_pe = lse - static_cast<double>(n) * std::log(static_cast<double>(K));
  out.moments.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Family f = q.latents[i].family;
    out.moments[i].assign(z[i][0].size(), MeanParams{f, {0.0, 0.0}});
  }
  for (std::size_t s = 0; s < combos.size(); ++s) {
    const double w = std::exp(log_r[s] - lse);
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor& v = z[i][combos[s][i]];
      for (std::size_t c = 0; c < v.size(); ++c) {
        const auto t = sufficient_stats(q.latents[i].family, v[c]);
        out.moments[i][c].m[0] += w * t.m[0];
        out.moments[i][c].m[1] += w * t.m[1];
      }
    }
  }
  return out;
}

inline double enumerate_pe(const Model& m, const SampleBank& bank, const QState& q) { return enumerate(m, bank, q).log_pe; }

inline std::vector<std::vector<MeanParams>> enumerate_moments(const Model& m, const SampleBank& bank, const QState& q) {
  return enumerate(m, bank, q).moments;
}

// ---------------------------------------------------------------------------
// Exact posteriors

struct ExactPosterior {
  std::vector<std::string> latents;
  std::vector<std::vector<MeanParams>> moments;  // per latent, canonical cell order
  double log_evidence = 0.0;

  std::vector<double> first_moments() const {
    std::vector<double> out;
    for (const auto& l : moments)
      for (const auto& m : l) out.push_back(m.m[0]);
    return out;
  }
};

namespace detail {

inline bool references_latent(const ModelIR& ir, const Expr& e) {
  std::vector<std::string> names;
  collect_names(e, names);
  return std::any_of(names.begin(), names.end(), [&](const auto& n) { return ir.latent_index(n).has_value(); });
}

inline Tensor canonical_tensor(const ModelIR& ir, const std::vector<std::string>& plates, std::vector<double> data) {
  const Tensor proto = over_plates(ir, plates, Tensor(0.0));
  return Tensor(proto.axes(), proto.shape(), std::move(data));
}

}  // namespace detail

/// Exact posterior of a jointly Gaussian model: Gaussian priors and likelihoods whose means are
/// affine in the latents and whose variances are constant.
inline ExactPosterior linear_gaussian_posterior(const ModelIR& ir) {
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  const auto report = validate(ir, {.require_data = true});
  if (!report.ok()) fail(ErrorKind::validation, report.text());

  std::vector<std::size_t> offset;
  std::size_t dim = 0;
  for (const auto& l : ir.latents) {
    if (l.prior_family != Family::gaussian) fail(ErrorKind::unsupported_model, "latent '" + l.name + "' is not Gaussian");
    if (detail::references_latent(ir, l.prior_params[1]))
      fail(ErrorKind::unsupported_model, "variance of '" + l.name + "' depends on a latent");
    offset.push_back(dim);
    dim += ir.cell_count(l.plates);
  }
  for (const auto& o : ir.observations) {
    if (o.family != Family::gaussian) fail(ErrorKind::unsupported_model, "observation '" + o.name + "' is not Gaussian");
    if (detail::references_latent(ir, o.params[1]))
      fail(ErrorKind::unsupported_model, "variance of '" + o.name + "' depends on a latent");
  }

  const auto bind = [&](const VectorXd& z) {
    detail::Values v;
    for (std::size_t i = 0; i < ir.latents.size(); ++i) {
      const std::size_t cells = ir.cell_count(ir.latents[i].plates);
      std::vector<double> d(z.data() + offset[i], z.data() + offset[i] + cells);
      v[ir.latents[i].name] = detail::canonical_tensor(ir, ir.latents[i].plates, std::move(d));
    }
    return v;
  };
  const auto mean_of = [&](const Expr& e, const std::vector<std::string>& plates, const VectorXd& z) {
    const auto vals = bind(z);
    const Tensor t = detail::over_plates(ir, plates, eval_expr(e, detail::lookup_of(ir, vals)));
    return VectorXd(Eigen::Map<const VectorXd>(t.data().data(), static_cast<Eigen::Index>(t.size())));
  };
  // Affine probing: value at zero plus one column per unit vector, then a check at a generic point.
  const auto affine = [&](const Expr& e, const std::vector<std::string>& plates, const std::string& owner) {
    const VectorXd b = mean_of(e, plates, VectorXd::Zero(static_cast<Eigen::Index>(dim)));
    MatrixXd A(b.size(), static_cast<Eigen::Index>(dim));
    for (std::size_t j = 0; j < dim; ++j) {
      VectorXd u = VectorXd::Zero(static_cast<Eigen::Index>(dim));
      u[static_cast<Eigen::Index>(j)] = 1.0;
      A.col(static_cast<Eigen::Index>(j)) = mean_of(e, plates, u) - b;
    }
    VectorXd probe(static_cast<Eigen::Index>(dim));
    for (std::size_t j = 0; j < dim; ++j) probe[static_cast<Eigen::Index>(j)] = 0.37 + 0.91 * std::sin(1.3 * static_cast<double>(j) + 0.2);
    for (double scale : {1.0, -2.5}) {
      const VectorXd p = scale * probe;
      const VectorXd direct = mean_of(e, plates, p);
      const VectorXd lin = A * p + b;
      if ((direct - lin).lpNorm<Eigen::Infinity>() > 1e-9 * (1.0 + direct.lpNorm<Eigen::Infinity>()))
        fail(ErrorKind::unsupported_model, "mean of '" + owner + "' is not affine in the latents");
    }
    return std::pair{A, b};
  };
  const auto variances = [&](const Expr& e, const std::vector<std::string>& plates) {
    const detail::Values none;
    return detail::over_plates(ir, plates, eval_expr(e, detail::lookup_of(ir, none)));
  };

  // Structural form z = B z + c + eps, eps ~ N(0, D).
  MatrixXd B = MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
  VectorXd c(static_cast<Eigen::Index>(dim)), D(static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < ir.latents.size(); ++i) {
    const auto& l = ir.latents[i];
    auto [A, b] = affine(l.prior_params[0], l.plates, l.name);
    const Tensor var = variances(l.prior_params[1], l.plates);
    const auto rows = static_cast<Eigen::Index>(ir.cell_count(l.plates));
    const auto off = static_cast<Eigen::Index>(offset[i]);
    B.middleRows(off, rows) = A;
    c.segment(off, rows) = b;
    for (Eigen::Index r = 0; r < rows; ++r) D[off + r] = var[static_cast<std::size_t>(r)];
  }
  if ((D.array() <= 0.0).any()) fail(ErrorKind::domain, "non-positive prior variance");

  // Observations x = A z + b + eta, eta ~ N(0, R).
  std::vector<MatrixXd> As;
  std::vector<VectorXd> bs, Rs, xs;
  for (const auto& o : ir.observations) {
    auto [A, b] = affine(o.params[0], o.plates, o.name);
    const Tensor var = variances(o.params[1], o.plates);
    const Tensor x = detail::over_plates(ir, o.plates, ir.data.at(o.data));
    VectorXd R(b.size()), xv(b.size());
    for (Eigen::Index r = 0; r < b.size(); ++r) {
      R[r] = var[static_cast<std::size_t>(r)];
      xv[r] = x[static_cast<std::size_t>(r)];
    }
    if ((R.array() <= 0.0).any()) fail(ErrorKind::domain, "non-positive likelihood variance");
    As.push_back(A);
    bs.push_back(b);
    Rs.push_back(R);
    xs.push_back(xv);
  }
  Eigen::Index nobs = 0;
  for (const auto& b : bs) nobs += b.size();
  MatrixXd A(nobs, static_cast<Eigen::Index>(dim));
  VectorXd b(nobs), R(nobs), x(nobs);
  for (std::size_t j = 0, row = 0; j < As.size(); ++j) {
    const auto r = bs[j].size();
    A.middleRows(static_cast<Eigen::Index>(row), r) = As[j];
    b.segment(static_cast<Eigen::Index>(row), r) = bs[j];
    R.segment(static_cast<Eigen::Index>(row), r) = Rs[j];
    x.segment(static_cast<Eigen::Index>(row), r) = xs[j];
    row += static_cast<std::size_t>(r);
  }

  const MatrixXd I = MatrixXd::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
  const MatrixXd L = I - B;
  const VectorXd Dinv = D.cwiseInverse();
  const VectorXd Rinv = R.cwiseInverse();
  const MatrixXd precision = L.transpose() * Dinv.asDiagonal() * L + A.transpose() * Rinv.asDiagonal() * A;
  const VectorXd h = L.transpose() * (Dinv.asDiagonal() * c) + A.transpose() * (Rinv.asDiagonal() * (x - b));
  const Eigen::LLT<MatrixXd> llt(precision);
  if (llt.info() != Eigen::Success) fail(ErrorKind::numerical, "posterior precision is not positive definite");
  const VectorXd mu = llt.solve(h);
  const MatrixXd cov = llt.solve(I);

  ExactPosterior out;
  for (std::size_t i = 0; i < ir.latents.size(); ++i) {
    out.latents.push_back(ir.latents[i].name);
    std::vector<MeanParams> ms;
    for (std::size_t c2 = 0; c2 < ir.cell_count(ir.latents[i].plates); ++c2) {
      const auto j = static_cast<Eigen::Index>(offset[i] + c2);
      ms.push_back(MeanParams{Family::gaussian, {mu[j], mu[j] * mu[j] + cov(j, j)}});
    }
    out.moments.push_back(std::move(ms));
  }

  if (nobs > 0) {
    const MatrixXd Linv = L.inverse();
    const VectorXd prior_mean = Linv * c;
    const MatrixXd prior_cov = Linv * D.asDiagonal() * Linv.transpose();
    const MatrixXd S = A * prior_cov * A.transpose() + MatrixXd(R.asDiagonal());
    const VectorXd r = x - (A * prior_mean + b);
    const Eigen::LLT<MatrixXd> sl(S);
    if (sl.info() != Eigen::Success) fail(ErrorKind::numerical, "marginal covariance is not positive definite");
    const VectorXd alpha = sl.matrixL().solve(r);
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < S.rows(); ++i) log_det += 2.0 * std::log(sl.matrixL()(i, i));
    out.log_evidence = -0.5 * alpha.squaredNorm() - 0.5 * log_det - static_cast<double>(nobs) * kernel::half_log_2pi;
  }
  return out;
}

inline constexpr std::size_t quadrature_nodes = 40;
inline constexpr double quadrature_half_width = 8.0;  // in standard deviations

namespace detail {

// One enumerated coordinate: a Bernoulli cell or a quadrature axis of a Gaussian cell.
struct GridAxis {
  std::size_t latent, cell;
  std::vector<double> nodes, log_weights;
};

inline GridAxis gauss_legendre_axis(std::size_t latent, std::size_t cell, double center, double sd) {
  const auto& gx = boost::math::quadrature::gauss<double, quadrature_nodes>::abscissa();
  const auto& gw = boost::math::quadrature::gauss<double, quadrature_nodes>::weights();
  const double half = quadrature_half_width * sd;
  GridAxis a{latent, cell, {}, {}};
  for (std::size_t j = 0; j < gx.size(); ++j) {
    for (double sign : {1.0, -1.0}) {
      if (sign < 0 && gx[j] == 0.0) continue;
      a.nodes.push_back(center + sign * half * gx[j]);
      a.log_weights.push_back(std::log(half * gw[j]));
    }
  }
  return a;
}

// Sums the joint density over the tensor grid of all axes.
inline ExactPosterior sum_over_grid(const ModelIR& ir, const std::vector<GridAxis>& dims) {
  std::vector<std::vector<double>> cur(ir.latents.size());
  for (std::size_t i = 0; i < ir.latents.size(); ++i) cur[i].assign(ir.cell_count(ir.latents[i].plates), 0.0);
  std::vector<std::size_t> idx(dims.size(), 0);
  std::vector<double> logp;
  std::vector<std::vector<double>> point;  // flattened latent values per state
  for (bool more = true; more;) {
    double lw = 0.0;
    for (std::size_t d = 0; d < dims.size(); ++d) {
      cur[dims[d].latent][dims[d].cell] = dims[d].nodes[idx[d]];
      lw += dims[d].log_weights[idx[d]];
    }
    Values vals;
    std::vector<double> flat;
    for (std::size_t i = 0; i < ir.latents.size(); ++i) {
      vals[ir.latents[i].name] = canonical_tensor(ir, ir.latents[i].plates, cur[i]);
      flat.insert(flat.end(), cur[i].begin(), cur[i].end());
    }
    logp.push_back(lw + log_joint(ir, vals));
    point.push_back(std::move(flat));
    more = false;
    for (std::size_t d = dims.size(); d-- > 0;) {
      if (++idx[d] < dims[d].nodes.size()) {
        more = true;
        break;
      }
      idx[d] = 0;
    }
  }

  ExactPosterior out;
  const double lse = logsumexp(logp);
  out.log_evidence = lse;
  for (std::size_t i = 0; i < ir.latents.size(); ++i) {
    out.latents.push_back(ir.latents[i].name);
    out.moments.emplace_back(cur[i].size(), MeanParams{ir.latents[i].prior_family, {0.0, 0.0}});
  }
  for (std::size_t s = 0; s < logp.size(); ++s) {
    const double w = std::exp(logp[s] - lse);
    std::size_t f = 0;
    for (std::size_t i = 0; i < ir.latents.size(); ++i)
      for (auto& mp : out.moments[i]) {
        const double v = point[s][f++];
        mp.m[0] += w * v;
        mp.m[1] += w * v * v;
      }
  }
  for (auto& l : out.moments)
    for (auto& mp : l)
      if (mp.family == Family::bernoulli) mp.m[1] = 0.0;
  return out;
}

}  // namespace detail

/// Exact posterior for models whose latents are Bernoulli (summed exhaustively) plus at most two
/// Gaussian cells with latent-free priors (integrated by Gauss-Legendre quadrature). A first pass
/// spans the prior; a second re-centres each Gaussian axis on its posterior mean and width.
inline ExactPosterior discrete_posterior(const ModelIR& ir) {
  const auto report = validate(ir, {.require_data = true});
  if (!report.ok()) fail(ErrorKind::validation, report.text());

  std::vector<detail::GridAxis> dims;
  double states = 1.0;
  std::size_t continuous = 0;
  for (std::size_t i = 0; i < ir.latents.size(); ++i) {
    const auto& l = ir.latents[i];
    const std::size_t cells = ir.cell_count(l.plates);
    if (l.prior_family == Family::bernoulli) {
      for (std::size_t c = 0; c < cells; ++c) dims.push_back({i, c, {0.0, 1.0}, {0.0, 0.0}});
      states *= std::pow(2.0, static_cast<double>(cells));
    } else if (l.prior_family == Family::gaussian) {
      for (const auto& e : l.prior_params)
        if (detail::references_latent(ir, e))
          fail(ErrorKind::unsupported_model, "Gaussian latent '" + l.name + "' has latent-dependent prior parameters");
      continuous += cells;
      const detail::Values none;
      const Tensor mean = detail::over_plates(ir, l.plates, eval_expr(l.prior_params[0], detail::lookup_of(ir, none)));
      const Tensor var = detail::over_plates(ir, l.plates, eval_expr(l.prior_params[1], detail::lookup_of(ir, none)));
      for (std::size_t c = 0; c < cells; ++c) {
        dims.push_back(detail::gauss_legendre_axis(i, c, mean[c], std::sqrt(var[c])));
        states *= static_cast<double>(dims.back().nodes.size());
      }
    } else {
      fail(ErrorKind::unsupported_model, "latent '" + l.name + "' is neither Bernoulli nor Gaussian");
    }
  }
  if (continuous > 2) fail(ErrorKind::unsupported_model, "more than two continuous latent cells");
  if (states > enumeration_guard) fail(ErrorKind::guard_exceeded, "state count exceeds the enumeration guard of 1e6");

  const ExactPosterior coarse = detail::sum_over_grid(ir, dims);
  if (continuous == 0) return coarse;
  for (auto& d : dims) {
    if (ir.latents[d.latent].prior_family != Family::gaussian) continue;
    const MeanParams& mp = coarse.moments[d.latent][d.cell];
    const double var = mp.m[1] - mp.m[0] * mp.m[0];
    if (!(var > 0.0)) fail(ErrorKind::numerical, "quadrature found a degenerate posterior");
    d = detail::gauss_legendre_axis(d.latent, d.cell, mp.m[0], std::sqrt(var));
  }
  return detail::sum_over_grid(ir, dims);
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthOptions {
  std::uint64_t seed = 0;
  std::map<std::string, Tensor> overrides;  // latent name -> plate tensor of fixed values
  bool noiseless = false;                   // Gaussian observations take their mean
};

struct SynthResult {
  Dataset data;                            // observation columns plus the model's covariates
  std::map<std::string, Tensor> latents;   // the values the data were drawn from
};

namespace detail {

inline double draw(Family f, const std::vector<double>& p, double u, bool noiseless) {
  if (f == Family::gaussian) {
    if (p[1] < 0.0) fail(ErrorKind::domain, "negative variance in simulation");
    return noiseless || p[1] == 0.0 ? p[0] : p[0] + std::sqrt(p[1]) * special::normal_quantile(u);
  }
  if (f == Family::negative_binomial_lik) fail(ErrorKind::unsupported_model, "simulation of negative binomial terms");
  return sample_it(make_params(f, p), u);
}

inline Tensor simulate_term(const ModelIR& ir, Family f, const std::vector<Expr>& params,
                            const std::vector<std::string>& plates, const Values& vals, const CounterRng& rng,
                            bool noiseless) {
  const auto look = lookup_of(ir, vals);
  std::vector<Tensor> ps;
  for (const auto& e : params) ps.push_back(over_plates(ir, plates, eval_expr(e, look)));
  const Tensor proto = over_plates(ir, plates, Tensor(0.0));
  std::vector<double> out(proto.size());
  for (std::size_t c = 0; c < out.size(); ++c) {
    std::vector<double> pv;
    for (const auto& p : ps) pv.push_back(p[c]);
    out[c] = draw(f, pv, rng.uniform(c), noiseless);
  }
  return Tensor(proto.axes(), proto.shape(), std::move(out));
}

}  // namespace detail

/// Ancestral simulation from the prior with the given latents held fixed. Covariates come from
/// the model's own data.
inline SynthResult synth_data(const ModelIR& ir, const SynthOptions& opt = {}) {
  auto report = validate(ir, {.require_data = false});
  if (!report.ok()) fail(ErrorKind::validation, report.text());
  for (const auto& [name, t] : opt.overrides)
    if (!ir.latent_index(name)) fail(ErrorKind::schema, "override names unknown latent '" + name + "'");

  SynthResult res;
  for (const auto& c : ir.covariates) {
    auto it = ir.data.find(c.name);
    if (it == ir.data.end()) fail(ErrorKind::schema, "covariate '" + c.name + "' has no data");
    res.data[c.name] = it->second;
  }
  for (const auto& name : report.order) {
    const auto& l = ir.latent(name);
    if (auto it = opt.overrides.find(name); it != opt.overrides.end()) {
      res.latents[name] = detail::over_plates(ir, l.plates, it->second);
      continue;
    }
    const CounterRng rng(opt.seed, {label_hash("synth"), label_hash(name)});
    res.latents[name] = detail::simulate_term(ir, l.prior_family, l.prior_params, l.plates, res.latents, rng, false);
  }
  for (const auto& o : ir.observations) {
    const CounterRng rng(opt.seed, {label_hash("synth-obs"), label_hash(o.name)});
    res.data[o.data] = detail::simulate_term(ir, o.family, o.params, o.plates, res.latents, rng, opt.noiseless);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Built-in models

struct BuiltinModel {
  std::string id;
  ModelIR ir;
  std::optional<std::string> scaled_latent;  // designated latent for the reparameterized variant
  std::map<std::string, Tensor> truth;
};

namespace detail {

inline std::vector<double> uniform_values(std::uint64_t seed, std::string_view label, std::size_t n, double lo, double hi) {
  const CounterRng rng(seed, {label_hash(label)});
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = lo + (hi - lo) * rng.uniform(i);
  return out;
}

inline std::vector<double> integer_values(std::uint64_t seed, std::string_view label, std::size_t n, std::size_t bound) {
  const CounterRng rng(seed, {label_hash(label)});
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<double>(rng.below(i, bound));
  return out;
}

inline LatentDecl gaussian_latent(std::string name, std::vector<std::string> plates, Expr mean, Expr var) {
  return LatentDecl{std::move(name), std::move(plates), Family::gaussian, {std::move(mean), std::move(var)},
                    Family::gaussian, MeanParams{Family::gaussian, {0.0, 1.0}}};
}

inline BuiltinModel finish(std::string id, ModelIR ir, std::optional<std::string> scaled, std::uint64_t seed,
                           const std::map<std::string, Tensor>& overrides = {}) {
  const auto res = synth_data(ir, {.seed = seed, .overrides = overrides, .noiseless = false});
  for (const auto& o : ir.observations) ir.data[o.data] = res.data.at(o.data);
  return BuiltinModel{std::move(id), std::move(ir), std::move(scaled), res.latents};
}

}  // namespace detail

/// z1 ~ N(0,1), z_i ~ N(z_{i-1}, 1), one observation x_i ~ N(z_i, 1) per latent.
inline BuiltinModel conjugate_chain(std::size_t d = 2, std::uint64_t seed = 1) {
  using namespace expr;
  if (d < 1) fail(ErrorKind::config, "conjugate chain needs at least one latent");
  ModelIR ir;
  for (std::size_t i = 1; i <= d; ++i) {
    const auto z = "z" + std::to_string(i);
    ir.latents.push_back(detail::gaussian_latent(z, {}, i == 1 ? num(0.0) : ref("z" + std::to_string(i - 1)), num(1.0)));
    ir.observations.push_back(ObservationDecl{"x" + std::to_string(i), {}, Family::gaussian, {ref(z), num(1.0)},
                                              "x" + std::to_string(i) + "_data"});
  }
  return detail::finish("conjugate_chain:" + std::to_string(d), std::move(ir), "z1", seed);
}

inline ModelIR radon_structure(std::size_t S, std::size_t R, bool linear, std::uint64_t seed) {
  using namespace expr;
  ModelIR ir;
  ir.plates = {{"S", S}, {"R", R}};
  ir.covariates = {{"Uranium", {"S"}, CovariateType::real}, {"Basement", {"S", "R"}, CovariateType::real}};
  ir.data["Uranium"] = plate_tensor(ir, {"S"}, detail::uniform_values(seed, "uranium", S, -1.0, 1.0));
  auto basement = detail::integer_values(seed, "basement", S * R, 2);
  ir.data["Basement"] = plate_tensor(ir, {"S", "R"}, basement);
  ir.latents.push_back(detail::gaussian_latent("GlobalMean", {}, num(0.0), num(1.0)));
  if (!linear) ir.latents.push_back(detail::gaussian_latent("GlobalVariance", {}, num(0.0), num(1.0)));
  ir.latents.push_back(detail::gaussian_latent("StateMean", {"S"}, ref("GlobalMean"),
                                               linear ? num(1.0) : exp(ref("GlobalVariance"))));
  if (!linear) ir.latents.push_back(detail::gaussian_latent("StateVariance", {"S"}, num(0.0), num(1.0)));
  ir.latents.push_back(detail::gaussian_latent("UraniumWeight", {"S"}, num(0.0), num(1.0)));
  ir.latents.push_back(detail::gaussian_latent("BasementWeight", {"S"}, num(0.0), num(1.0)));
  const Expr mean = ref("StateMean") + ref("UraniumWeight") * ref("Uranium") + ref("BasementWeight") * ref("Basement");
  ir.observations.push_back(ObservationDecl{"Radon", {"S", "R"}, Family::gaussian,
                                            {mean, linear ? num(1.0) : exp(ref("StateVariance"))}, "radon"});
  return ir;
}

/// Radon model with the log-variance latents replaced by unit variances, so the exact posterior exists.
inline BuiltinModel radon_linear(std::size_t S = 4, std::size_t R = 20, std::uint64_t seed = 3) {
  return detail::finish("radon_linear", radon_structure(S, R, true, seed), "StateMean", seed);
}

inline BuiltinModel radon_full(std::size_t S = 4, std::size_t R = 20, std::uint64_t seed = 3) {
  return detail::finish("radon_full", radon_structure(S, R, false, seed), "StateMean", seed);
}

inline BuiltinModel bus_mini(std::size_t Y = 2, std::size_t B = 2, std::size_t I = 30, std::size_t C = 3,
                             std::size_t J = 2, std::uint64_t seed = 5) {
  using namespace expr;
  ModelIR ir;
  ir.plates = {{"Y", Y}, {"B", B}, {"I", I}, {"C", C}, {"J", J}};
  ir.covariates = {{"company", {"Y", "B", "I"}, CovariateType::integer},
                   {"journey", {"Y", "B", "I"}, CovariateType::integer}};
  ir.data["company"] = plate_tensor(ir, {"Y", "B", "I"}, detail::integer_values(seed, "company", Y * B * I, C));
  ir.data["journey"] = plate_tensor(ir, {"Y", "B", "I"}, detail::integer_values(seed, "journey", Y * B * I, J));
  ir.latents.push_back(detail::gaussian_latent("GlobalVariance", {}, num(0.0), num(1.0)));
  ir.latents.push_back(detail::gaussian_latent("GlobalMean", {}, num(0.0), num(1.0)));
  ir.latents.push_back(detail::gaussian_latent("YearMean", {"Y"}, ref("GlobalMean"), exp(ref("GlobalVariance"))));
  ir.latents.push_back(detail::gaussian_latent("YearVariance", {"B"}, num(0.0), num(1.0)));
  ir.latents.push_back(detail::gaussian_latent("YearBoroughWeight", {"Y", "B"}, ref("YearMean"), exp(ref("YearVariance"))));
  ir.latents.push_back(detail::gaussian_latent("CompanyWeight", {"C"}, num(0.0), num(1.0)));
  ir.latents.push_back(detail::gaussian_latent("JourneyTypeWeight", {"J"}, num(0.0), num(1.0)));
  const Expr logits = ref("YearBoroughWeight") + gather("CompanyWeight", "company") + gather("JourneyTypeWeight", "journey");
  ir.observations.push_back(ObservationDecl{"delay", {"Y", "B", "I"}, Family::bernoulli, {sigmoid(logits)}, "delay_data"});
  return detail::finish("bus_mini", std::move(ir), "YearBoroughWeight", seed);
}

namespace detail {

inline void occupancy_covariates(ModelIR& ir, std::size_t J, std::size_t M, std::size_t I, std::size_t R, std::uint64_t seed) {
  ir.plates = {{"J", J}, {"M", M}, {"I", I}, {"R", R}};
  ir.covariates = {{"Weather", {"J", "M", "I"}, CovariateType::real}, {"Quality", {"J", "M", "I", "R"}, CovariateType::real}};
  ir.data["Weather"] = plate_tensor(ir, {"J", "M", "I"}, uniform_values(seed, "weather", J * M * I, -1.5, 1.5));
  ir.data["Quality"] = plate_tensor(ir, {"J", "M", "I", "R"}, integer_values(seed, "quality", J * M * I * R, 2));
}

inline std::vector<ObservationDecl> occupancy_observation(const std::string& quality_weight) {
  using namespace expr;
  const Expr logits = ref("z") * ref(quality_weight) * ref("Quality") + (num(1.0) - ref("z")) * num(-10.0);
  return {ObservationDecl{"y", {"J", "M", "I", "R"}, Family::bernoulli, {sigmoid(logits)}, "y_data"}};
}

inline LatentDecl occupancy_z(const std::string& weather_weight) {
  using namespace expr;
  return LatentDecl{"z", {"J", "M", "I"}, Family::bernoulli,
                    {sigmoid(ref("BirdYearMean") * ref(weather_weight) * ref("Weather"))}, Family::bernoulli,
                    MeanParams{Family::bernoulli, {0.5, 0.0}}};
}

}  // namespace detail

/// Multi-species occupancy model at reduced sizes, hyperpriors included.
inline BuiltinModel occupancy_mini(std::size_t J = 2, std::size_t M = 1, std::size_t I = 3, std::size_t R = 2,
                                   std::uint64_t seed = 7) {
  using namespace expr;
  ModelIR ir;
  detail::occupancy_covariates(ir, J, M, I, R, seed);
  for (const char* n : {"mu_BirdMean", "sigma_BirdMean", "mu_QualityWeight", "sigma_QualityWeight", "mu_WeatherWeight",
                        "sigma_WeatherWeight"})
    ir.latents.push_back(detail::gaussian_latent(n, {}, num(0.0), num(1.0)));
  ir.latents.push_back(detail::gaussian_latent("QualityWeight", {"J"}, ref("mu_QualityWeight"), exp(ref("sigma_QualityWeight"))));
  ir.latents.push_back(detail::gaussian_latent("WeatherWeight", {"J"}, ref("mu_WeatherWeight"), exp(ref("sigma_WeatherWeight"))));
  ir.latents.push_back(detail::gaussian_latent("BirdMean", {"J"}, ref("mu_BirdMean"), exp(ref("sigma_BirdMean"))));
  ir.latents.push_back(detail::gaussian_latent("BirdYearMean", {"J", "M"}, ref("BirdMean"), num(1.0)));
  ir.latents.push_back(detail::occupancy_z("WeatherWeight"));
  ir.observations = detail::occupancy_observation("QualityWeight");
  return detail::finish("occupancy_mini", std::move(ir), "BirdYearMean", seed);
}

/// Occupancy structure with the covariate weights and species means fixed, leaving BirdYearMean
/// (J*M cells) and z as latents so the exact posterior is computable.
inline BuiltinModel occupancy_exact(std::size_t J = 2, std::size_t M = 1, std::size_t I = 3, std::size_t R = 2,
                                    std::uint64_t seed = 7) {
  using namespace expr;
  if (J * M > 2) fail(ErrorKind::config, "the exact occupancy variant supports at most two BirdYearMean cells");
  ModelIR ir;
  detail::occupancy_covariates(ir, J, M, I, R, seed);
  ir.covariates.push_back({"BirdMeanFixed", {"J"}, CovariateType::real});
  ir.covariates.push_back({"QualityWeightFixed", {"J"}, CovariateType::real});
  ir.covariates.push_back({"WeatherWeightFixed", {"J"}, CovariateType::real});
  ir.data["BirdMeanFixed"] = plate_tensor(ir, {"J"}, detail::uniform_values(seed, "bird-mean", J, -1.0, 1.0));
  ir.data["QualityWeightFixed"] = plate_tensor(ir, {"J"}, detail::uniform_values(seed, "quality-weight", J, 1.0, 3.0));
  ir.data["WeatherWeightFixed"] = plate_tensor(ir, {"J"}, detail::uniform_values(seed, "weather-weight", J, -2.0, 2.0));
  ir.latents.push_back(detail::gaussian_latent("BirdYearMean", {"J", "M"}, ref("BirdMeanFixed"), num(1.0)));
  ir.latents.push_back(detail::occupancy_z("WeatherWeightFixed"));
  ir.observations = detail::occupancy_observation("QualityWeightFixed");
  return detail::finish("occupancy_exact", std::move(ir), "BirdYearMean", seed);
}

inline std::vector<std::string> builtin_ids() {
  return {"conjugate_chain", "radon_linear", "radon_full", "bus_mini", "occupancy_mini", "occupancy_exact"};
}

/// Looks up a built-in by id; "conjugate_chain:d" selects the chain length (default 2).
inline BuiltinModel builtin(const std::string& id) {
  if (id.rfind("conjugate_chain", 0) == 0) {
    std::size_t d = 2;
    if (id.size() > 15) {
      if (id[15] != ':') fail(ErrorKind::config, "unknown builtin '" + id + "'");
      try {
        d = std::stoul(id.substr(16));
      } catch (const std::exception&) {
        fail(ErrorKind::config, "bad chain length in '" + id + "'");
      }
    }
    return conjugate_chain(d);
  }
  if (id == "radon_linear") return radon_linear();
  if (id == "radon_full") return radon_full();
  if (id == "bus_mini") return bus_mini();
  if (id == "occupancy_mini") return occupancy_mini();
  if (id == "occupancy_exact") return occupancy_exact();
  fail(ErrorKind::config, "unknown builtin '" + id + "'");
}

/// Exact posterior when one is available for the model's family structure.
inline std::optional<ExactPosterior> exact_posterior(const ModelIR& ir) {
  try {
    return linear_gaussian_posterior(ir);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::unsupported_model) throw;
  }
  try {
    return discrete_posterior(ir);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::unsupported_model && e.kind() != ErrorKind::guard_exceeded) throw;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Reparameterization

namespace detail {

inline Expr scale_refs(const Expr& e, const std::string& latent, double alpha) {
  using namespace expr;
  if (e.op == Expr::Op::ref && e.name == latent) return num(alpha) * e;
  if (e.op == Expr::Op::gather && e.name == latent) return num(alpha) * e;
  Expr out = e;
  for (auto& a : out.args) a = scale_refs(a, latent, alpha);
  return out;
}

}  // namespace detail

/// Rewrites `latent` as z = alpha * z~: the prior of z~ is that of z / alpha, every use site
/// multiplies by alpha, and the initial proposal is rescaled to match.
inline ModelIR scaled(const ModelIR& ir, const std::string& latent, double alpha) {
  using namespace expr;
  if (!(alpha != 0.0) || !std::isfinite(alpha)) fail(ErrorKind::config, "scale must be finite and non-zero");
  if (!ir.latent_index(latent)) fail(ErrorKind::schema, "unknown latent '" + latent + "'");
  ModelIR out = ir;
  for (auto& l : out.latents) {
    for (auto& e : l.prior_params) e = detail::scale_refs(e, latent, alpha);
    if (l.name != latent) continue;
    if (l.prior_family == Family::gaussian) {
      l.prior_params[0] = l.prior_params[0] / num(alpha);
      l.prior_params[1] = l.prior_params[1] / num(alpha * alpha);
    } else if (l.prior_family == Family::gamma && alpha > 0.0) {
      l.prior_params[1] = l.prior_params[1] * num(alpha);
    } else {
      fail(ErrorKind::not_closed_under_scaling, "prior of '" + latent + "' is not closed under scaling");
    }
    l.proposal_init = scale_mean_params(l.proposal_init, 1.0 / alpha);
  }
  for (auto& o : out.observations)
    for (auto& e : o.params) e = detail::scale_refs(e, latent, alpha);
  return out;
}

// ---------------------------------------------------------------------------
// Random small models for equivalence checks

struct RandomModelOptions {
  std::size_t max_latents = 4;
  std::size_t max_plate = 3;
};

/// A random valid model with up to four latents of mixed families, optional plating,
/// random parent structure and synthetic data.
inline ModelIR random_model(std::uint64_t seed, const RandomModelOptions& opt = {}) {
  using namespace expr;
  const CounterRng rng(seed, {label_hash("random-model")});
  std::uint64_t ctr = 0;
  const auto u = [&] { return rng.uniform(ctr++); };
  const auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng.below(ctr++, n)); };

  ModelIR ir;
  const std::size_t P = 1 + pick(opt.max_plate);
  ir.plates = {{"P", P}};
  ir.covariates = {{"c", {"P"}, CovariateType::real}};
  ir.data["c"] = plate_tensor(ir, {"P"}, detail::uniform_values(seed, "covariate", P, -1.0, 1.0));

  const std::size_t n = 1 + pick(opt.max_latents);
  const Family families[] = {Family::gaussian, Family::gaussian, Family::bernoulli, Family::gamma, Family::beta};
  std::vector<bool> plated(n);
  std::vector<Family> fam(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto name = "v" + std::to_string(i);
    plated[i] = u() < 0.4;
    fam[i] = families[pick(5)];
    // Parents: earlier latents whose plates fit inside this one's.
    Expr signal = num(0.0);
    for (std::size_t j = 0; j < i; ++j) {
      if (plated[j] && !plated[i]) continue;
      if (u() < 0.6) signal = signal + num(std::round((u() - 0.5) * 20.0) / 10.0) * ref("v" + std::to_string(j));
    }
    LatentDecl l;
    l.name = name;
    if (plated[i]) l.plates = {"P"};
    l.prior_family = fam[i];
    l.proposal_family = fam[i];
    switch (fam[i]) {
      case Family::gaussian:
        l.prior_params = {signal + num(std::round((u() - 0.5) * 10.0) / 10.0), num(0.5 + std::round(u() * 15.0) / 10.0)};
        l.proposal_init = conventional_to_mean(gaussian((u() - 0.5) * 2.0, 0.5 + 1.5 * u()));
        break;
      case Family::bernoulli:
        l.prior_params = {sigmoid(signal + num(std::round((u() - 0.5) * 20.0) / 10.0))};
        l.proposal_init = MeanParams{Family::bernoulli, {0.2 + 0.6 * u(), 0.0}};
        break;
      case Family::gamma:
        l.prior_params = {num(1.0 + std::round(u() * 20.0) / 10.0), exp(num(0.1) * signal)};
        l.proposal_init = conventional_to_mean(gamma(1.0 + 2.0 * u(), 0.5 + 1.5 * u()));
        break;
      default:
        l.prior_params = {exp(num(0.1) * signal) + num(0.5), num(1.0 + std::round(u() * 20.0) / 10.0)};
        l.proposal_init = conventional_to_mean(beta(0.8 + 2.0 * u(), 0.8 + 2.0 * u()));
        break;
    }
    ir.latents.push_back(std::move(l));
  }
  // Observations over P for a random nonempty subset of latents.
  std::size_t made = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (u() < 0.35 && !(i + 1 == n && made == 0)) continue;
    const auto name = "v" + std::to_string(i);
    Expr mean = ref(name) + num(std::round((u() - 0.5) * 10.0) / 10.0) * ref("c");
    if (u() < 0.5) {
      ir.observations.push_back(ObservationDecl{"x" + std::to_string(i), {"P"}, Family::gaussian,
                                                {mean, num(0.3 + std::round(u() * 10.0) / 10.0)}, "x" + std::to_string(i)});
    } else {
      ir.observations.push_back(ObservationDecl{"y" + std::to_string(i), {"P"}, Family::bernoulli, {sigmoid(mean)},
                                                "y" + std::to_string(i)});
    }
    ++made;
  }
  const auto res = synth_data(ir, {.seed = seed, .overrides = {}, .noiseless = false});
  for (const auto& o : ir.observations) ir.data[o.data] = res.data.at(o.data);
  return ir;
}

}  // namespace qem::oracles
