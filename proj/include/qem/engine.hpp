#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qem/distributions.hpp"
#include "qem/error.hpp"
#include "qem/graph.hpp"
#include "qem/random.hpp"
#include "qem/tensor.hpp"

namespace qem {

/// Per-latent proposal state. Cells follow the canonical (sorted plate id) order of the latent's tensor.
struct QState {
  struct Entry {
    Family family = Family::gaussian;
    std::vector<MeanParams> mean;
    std::vector<ConventionalParams> conv;
    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> latents;
  std::size_t clamps = 0;  // clamps applied by the most recent M-step

  bool operator==(const QState&) const = default;

  /// Proposal parameters as plate tensors, one per conventional parameter.
  std::array<Tensor, 2> param_tensors(const Model& m, std::size_t i) const {
    const auto axes = m.latent_plate_axes(i);
    const auto shape = m.latent_plate_shape(i);
    std::vector<Axis> sa = axes;
    std::vector<std::size_t> ss = shape;
    {
      // Canonical order of the plate axes.
      std::vector<std::size_t> order(axes.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::sort(order.begin(), order.end(), [&](auto a, auto b) { return axes[a] < axes[b]; });
      for (std::size_t d = 0; d < order.size(); ++d) {
        sa[d] = axes[order[d]];
        ss[d] = shape[order[d]];
      }
    }
    const auto& e = latents[i];
    std::vector<double> p0(e.conv.size()), p1(e.conv.size());
    for (std::size_t c = 0; c < e.conv.size(); ++c) {
      p0[c] = e.conv[c].values[0];
      p1[c] = e.conv[c].values[1];
    }
    return {Tensor(sa, ss, std::move(p0)), Tensor(sa, ss, std::move(p1))};
  }
};

/// Initial state from each latent's declared proposal mean parameters.
inline QState initial_state(const Model& m) {
  QState q;
  for (std::size_t i = 0; i < m.latent_count(); ++i) {
    const auto& l = m.ir.latents[i];
    QState::Entry e;
    e.family = l.proposal_family;
    const auto conv = mean_to_conventional(l.proposal_init);
    e.mean.assign(m.latent_cells(i), l.proposal_init);
    e.conv.assign(m.latent_cells(i), conv);
    q.latents.push_back(std::move(e));
  }
  return q;
}

/// Canonical cell labels ("name", "name.0.3", ...) for every latent, in state order.
inline std::vector<std::vector<std::string>> cell_labels(const Model& m) {
  std::vector<std::vector<std::string>> out;
  for (std::size_t i = 0; i < m.latent_count(); ++i) {
    auto axes = m.latent_plate_axes(i);
    std::sort(axes.begin(), axes.end());
    std::vector<std::size_t> shape;
    for (Axis a : axes) shape.push_back(m.ir.plates[static_cast<std::size_t>(a.id)].size);
    std::vector<std::string> labels;
    std::vector<std::size_t> idx(shape.size(), 0);
    const std::size_t n = Tensor::element_count(shape);
    for (std::size_t c = 0; c < n; ++c) {
      std::string s = m.ir.latents[i].name;
      for (std::size_t v : idx) s += "." + std::to_string(v);
      labels.push_back(s);
      for (std::size_t d = idx.size(); d-- > 0;) {
        if (++idx[d] < shape[d]) break;
        idx[d] = 0;
      }
    }
    out.push_back(std::move(labels));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

enum class DenominatorConvention { permutation, mixture };

struct SampleBank {
  std::size_t K = 1;
  std::vector<Tensor> values;  // per latent: copy axis + plate axes
  std::vector<Tensor> xi;      // uniforms behind each value
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> permutations;  // (child, parent)

  bool operator==(const SampleBank&) const = default;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return splitmix64(seed ^ label_hash(label));
}

/// Draws K copies of every latent by inverse-transform sampling from counter-based streams
/// keyed by (seed, iteration, latent id).
inline SampleBank draw_sample_bank(const Model& m, const QState& q, std::uint64_t seed, std::size_t K,
                                   std::uint64_t iteration = 0) {
  if (K < 1) fail(ErrorKind::config, "K must be at least 1");
  if (q.latents.size() != m.latent_count()) fail(ErrorKind::validation, "proposal state does not cover every latent");
  SampleBank bank;
  bank.K = K;
  for (std::size_t i = 0; i < m.latent_count(); ++i) {
    const auto& e = q.latents[i];
    const std::size_t cells = m.latent_cells(i);
    if (e.conv.size() != cells) fail(ErrorKind::validation, "proposal state has the wrong number of cells");
    auto plate_axes = m.latent_plate_axes(i);
    std::sort(plate_axes.begin(), plate_axes.end());
    std::vector<Axis> axes{Axis::copy(static_cast<int>(i))};
    std::vector<std::size_t> shape{K};
    for (Axis a : plate_axes) {
      axes.push_back(a);
      shape.push_back(m.ir.plates[static_cast<std::size_t>(a.id)].size);
    }
    const CounterRng rng(seed, {iteration, i, label_hash("xi")});
    std::vector<double> xi(K * cells), val(K * cells);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t c = 0; c < cells; ++c) {
        const std::size_t f = k * cells + c;
        xi[f] = rng.uniform(f);
        val[f] = sample_it(e.conv[c], xi[f]);
      }
    bank.xi.emplace_back(axes, shape, std::move(xi));
    bank.values.emplace_back(axes, shape, std::move(val));
    for (std::size_t j : m.latent_parents[i]) {
      const CounterRng prng(seed, {iteration, i, j, label_hash("perm")});
      bank.permutations[{i, j}] = prng.permutation(K);
    }
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Log factors

struct FactorOptions {
  std::size_t rank_cap = 4;
  std::size_t chunk_budget = std::size_t{1} << 22;  // elements per evaluated expression
  DenominatorConvention denominator = DenominatorConvention::permutation;
};

struct LogFactor {
  std::string source;  // declaration the factor came from
  Tensor table;        // copy axes only, log scale
};

namespace detail {

using AxisExtents = std::map<Axis, std::size_t>;

class Bindings {
 public:
  Bindings(const Model& m, const SampleBank& bank, const Dataset& data) : m_(m), bank_(bank), data_(data) {}

  const Tensor& operator()(const std::string& name) const {
    if (auto it = sliced_.find(name); it != sliced_.end()) return it->second;
    return base(name);
  }

  const Tensor& base(const std::string& name) const {
    if (auto i = m_.ir.latent_index(name)) return bank_.values[*i];
    if (auto it = data_.find(name); it != data_.end()) return it->second;
    fail(ErrorKind::validation, "no binding for '" + name + "'");
  }

  /// A copy of these bindings with plate axis p fixed at index for every named tensor.
  Bindings fixed(Axis p, std::size_t index, const std::vector<std::string>& names) const {
    Bindings out = *this;
    for (const auto& n : names) {
      const Tensor& t = (*this)(n);
      if (t.has(p)) out.sliced_[n] = slice(t, p, index);
    }
    return out;
  }

 private:
  const Model& m_;
  const SampleBank& bank_;
  const Dataset& data_;
  std::map<std::string, Tensor> sliced_;
};

inline void note_extents(const Tensor& t, AxisExtents& ext) {
  for (std::size_t d = 0; d < t.rank(); ++d) ext[t.axes()[d]] = t.shape()[d];
}

// Sum over plates of log f(value | params) for one likelihood or prior term.
// Proposal parameters for a latent term, subtracted cell by cell.
struct ProposalTerm {
  Family family;
  Tensor p0, p1;
};

inline Tensor term_log_lik(Family family, const std::vector<Expr>& params, const Tensor& value, const Bindings& b,
                           const FactorOptions& opt, const std::string& owner, const ProposalTerm* prop = nullptr) {
  std::vector<std::string> names;
  for (const auto& e : params) collect_names(e, names);

  // Extents of the axes the evaluated term spans. Gathered tables contribute only their copy axes.
  AxisExtents all;
  note_extents(value, all);
  for (const auto& n : names) note_extents(b(n), all);
  const auto axes_of = [&](const Expr& e) { return expr_axes(e, [&](const std::string& n) { return b(n).axes(); }); };
  std::vector<std::vector<Axis>> param_axes;
  for (const auto& e : params) param_axes.push_back(axes_of(e));

  // Axes the term spans. Gathered tables contribute only their copy axes.
  AxisExtents ext;
  note_extents(value, ext);
  for (const auto& as : param_axes)
    for (Axis a : as) ext[a] = all.at(a);
  std::size_t copies = 0;
  for (const auto& [a, e] : ext)
    if (a.is_copy()) ++copies;

  // Largest intermediate the evaluation forms. The Gaussian path reduces the residual before
  // meeting the variance, so it never materializes the full union.
  const auto span_size = [&](std::initializer_list<const std::vector<Axis>*> sets, bool with_value) {
    AxisExtents u;
    if (with_value) note_extents(value, u);
    for (const auto* s : sets)
      for (Axis a : *s) u[a] = all.at(a);
    std::size_t n = 1;
    for (const auto& [a, e] : u) n *= e;
    return std::pair{n, u};
  };
  std::size_t total = 0;
  if (family == Family::gaussian && !prop) {
    auto [n1, u1] = span_size({&param_axes[0]}, true);
    std::vector<Axis> kept;
    for (const auto& [a, e] : u1)
      if (a.is_copy() || std::find(param_axes[1].begin(), param_axes[1].end(), a) != param_axes[1].end()) kept.push_back(a);
    total = std::max(n1, span_size({&kept, &param_axes[1]}, false).first);
  } else {
    total = 1;
    for (const auto& [a, e] : ext) total *= e;
  }
  if (copies > opt.rank_cap) {
    fail(ErrorKind::rank_cap, "factor for '" + owner + "' would span " + std::to_string(copies) +
                                  " copy axes, above the cap of " + std::to_string(opt.rank_cap));
  }

  if (total > opt.chunk_budget) {
    for (const auto& [a, e] : ext) {
      if (!a.is_plate() || e < 2) continue;
      Tensor acc(0.0);
      for (std::size_t idx = 0; idx < e; ++idx) {
        const Bindings sub = b.fixed(a, idx, names);
        const Tensor v = value.has(a) ? slice(value, a, idx) : value;
        std::optional<ProposalTerm> sp;
        if (prop) {
          sp = *prop;
          if (sp->p0.has(a)) sp->p0 = slice(sp->p0, a, idx);
          if (sp->p1.has(a)) sp->p1 = slice(sp->p1, a, idx);
        }
        acc = add(acc, term_log_lik(family, params, v, sub, opt, owner, sp ? &*sp : nullptr));
      }
      return acc;
    }
  }

  const auto keep_copy = [](Axis a) { return a.is_copy(); };
  Tensor out;
  if (prop) {
    // Latent term: log prior minus log proposal per cell, so equal densities cancel exactly.
    const bool logit = family == Family::bernoulli && params[0].op == Expr::Op::sigmoid;
    const Tensor a0 = eval_expr(logit ? params[0].args[0] : params[0], b);
    const Tensor a1 = params.size() > 1 ? eval_expr(params[1], b) : Tensor(0.0);
    const Family qf = prop->family;
    out = broadcast_reduce<5>({&value, &a0, &a1, &prop->p0, &prop->p1}, keep_copy,
                              [family, qf, logit](double x, double u, double v, double q0, double q1) {
                                const double lp = logit ? kernel::bernoulli_logit(x, u) : kernel::log_prob(family, x, u, v);
                                return lp - kernel::log_prob(qf, x, q0, q1);
                              });
  } else switch (family) {
    case Family::gaussian: {
      const Tensor mean = eval_expr(params[0], b);
      const Tensor var = eval_expr(params[1], b);
      // Reduce the squared residual over plates the variance does not vary along.
      const Tensor sq = broadcast_reduce<2>({&value, &mean}, [&](Axis a) { return a.is_copy() || var.has(a); },
                                            [](double x, double mu) { return (x - mu) * (x - mu); });
      double mult = 1.0;
      for (std::size_t d = 0; d < value.rank(); ++d)
        if (value.axes()[d].is_plate() && !var.has(value.axes()[d])) mult *= static_cast<double>(value.shape()[d]);
      for (std::size_t d = 0; d < mean.rank(); ++d)
        if (mean.axes()[d].is_plate() && !var.has(mean.axes()[d]) && !value.has(mean.axes()[d]))
          mult *= static_cast<double>(mean.shape()[d]);
      const Tensor log_var = map(var, [](double v) { return v > 0.0 ? std::log(v) : std::numeric_limits<double>::quiet_NaN(); });
      const Tensor inv_var = map(var, [](double v) { return 1.0 / v; });
      const double c = -0.5 * mult;
      out = broadcast_reduce<3>({&sq, &log_var, &inv_var}, keep_copy, [c](double s, double lv, double iv) {
        return c * (2.0 * kernel::half_log_2pi + lv) - 0.5 * s * iv;
      });
      break;
    }
    case Family::bernoulli: {
      if (params[0].op == Expr::Op::sigmoid) {
        const Tensor logit = eval_expr(params[0].args[0], b);
        out = broadcast_reduce<2>({&value, &logit}, keep_copy, [](double x, double l) { return kernel::bernoulli_logit(x, l); });
      } else {
        const Tensor p = eval_expr(params[0], b);
        out = broadcast_reduce<2>({&value, &p}, keep_copy, [](double x, double pp) { return kernel::bernoulli(x, pp); });
      }
      break;
    }
    case Family::beta:
    case Family::gamma:
    case Family::negative_binomial_lik: {
      const Tensor p0 = eval_expr(params[0], b);
      const Tensor p1 = eval_expr(params[1], b);
      if (family == Family::beta) {
        out = broadcast_reduce<3>({&value, &p0, &p1}, keep_copy, [](double x, double a, double bb) { return kernel::beta(x, a, bb); });
      } else if (family == Family::gamma) {
        out = broadcast_reduce<3>({&value, &p0, &p1}, keep_copy, [](double x, double k, double r) { return kernel::gamma(x, k, r); });
      } else {
        out = broadcast_reduce<3>({&value, &p0, &p1}, keep_copy,
                                  [](double x, double r, double p) { return kernel::negative_binomial(x, r, p); });
      }
      break;
    }
  }
  for (double v : out.data())
    if (std::isnan(v)) fail(ErrorKind::domain, "invalid distribution parameters while evaluating '" + owner + "'");
  return out;
}

}  // namespace detail

/// One factor per latent (prior over own and parent copy axes, minus the proposal) and one per observation.
/// With parent-free proposals both denominator conventions give the same tables.
inline std::vector<LogFactor> build_log_factors(const Model& m, const SampleBank& bank, const QState& q,
                                                const FactorOptions& opt = {}, const Dataset* data = nullptr,
                                                bool latents = true) {
  const Dataset& d = data ? *data : m.ir.data;
  const detail::Bindings b(m, bank, d);
  std::vector<LogFactor> out;
  if (latents) {
    for (std::size_t i = 0; i < m.latent_count(); ++i) {
      const auto& l = m.ir.latents[i];
      auto [p0, p1] = q.param_tensors(m, i);
      const detail::ProposalTerm prop{q.latents[i].family, std::move(p0), std::move(p1)};
      out.push_back({l.name, detail::term_log_lik(l.prior_family, l.prior_params, bank.values[i], b, opt, l.name, &prop)});
    }
  }
  for (const auto& o : m.ir.observations) {
    auto it = d.find(o.data);
    if (it == d.end()) fail(ErrorKind::schema, "observation '" + o.name + "' has no data column '" + o.data + "'");
    out.push_back({o.name, detail::term_log_lik(o.family, o.params, it->second, b, opt, o.name)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elimination

struct EliminationStep {
  Axis axis;
  std::size_t rank = 0;  // rank of the combined factor before summing out `axis`
};

struct EliminationPlan {
  std::vector<EliminationStep> steps;
  std::size_t peak_rank = 0;
};

/// Greedy minimum-rank order with ties broken by axis order.
inline EliminationPlan plan_elimination(std::vector<std::vector<Axis>> sets, std::vector<Axis> eliminate) {
  EliminationPlan plan;
  std::sort(eliminate.begin(), eliminate.end());
  eliminate.erase(std::unique(eliminate.begin(), eliminate.end()), eliminate.end());
  for (auto& s : sets) std::sort(s.begin(), s.end());
  while (!eliminate.empty()) {
    std::size_t best = 0, best_rank = std::numeric_limits<std::size_t>::max();
    std::vector<Axis> best_union;
    for (std::size_t c = 0; c < eliminate.size(); ++c) {
      std::vector<Axis> u;
      for (const auto& s : sets)
        if (std::binary_search(s.begin(), s.end(), eliminate[c])) {
          std::vector<Axis> merged;
          std::set_union(u.begin(), u.end(), s.begin(), s.end(), std::back_inserter(merged));
          u = std::move(merged);
        }
      if (u.empty()) u.push_back(eliminate[c]);
      if (u.size() < best_rank) {
        best_rank = u.size();
        best = c;
        best_union = u;
      }
    }
    const Axis a = eliminate[best];
    plan.steps.push_back({a, best_rank});
    plan.peak_rank = std::max(plan.peak_rank, best_rank);
    std::vector<std::vector<Axis>> next;
    for (auto& s : sets)
      if (!std::binary_search(s.begin(), s.end(), a)) next.push_back(std::move(s));
    best_union.erase(std::remove(best_union.begin(), best_union.end(), a), best_union.end());
    next.push_back(best_union);
    sets = std::move(next);
    eliminate.erase(eliminate.begin() + static_cast<std::ptrdiff_t>(best));
  }
  return plan;
}

inline EliminationPlan plan_elimination(const std::vector<LogFactor>& factors, std::vector<Axis> eliminate) {
  std::vector<std::vector<Axis>> sets;
  for (const auto& f : factors) sets.push_back(f.table.axes());
  return plan_elimination(std::move(sets), std::move(eliminate));
}

inline std::vector<Axis> all_copy_axes(const std::vector<LogFactor>& factors) {
  std::vector<Axis> out;
  for (const auto& f : factors)
    for (Axis a : f.table.axes())
      if (a.is_copy() && std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
  std::sort(out.begin(), out.end());
  return out;
}

struct Contraction {
  std::vector<Tensor> remaining;                      // factors left after the plan
  std::vector<std::pair<Axis, Tensor>> products;      // per step, when kept
  std::size_t peak_rank = 0;                          // largest combined factor actually formed
};

/// Sequential log-space variable elimination.
inline Contraction contract(const std::vector<LogFactor>& factors, const EliminationPlan& plan, bool keep_products = false) {
  Contraction c;
  std::vector<Tensor> pool;
  for (const auto& f : factors) pool.push_back(f.table);
  for (const auto& step : plan.steps) {
    std::vector<const Tensor*> touching;
    std::vector<Tensor> rest;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (pool[i].has(step.axis)) idx.push_back(i);
    for (std::size_t i : idx) touching.push_back(&pool[i]);
    Tensor product = add_all(touching);
    c.peak_rank = std::max(c.peak_rank, product.rank());
    Tensor message = product.has(step.axis) ? logsumexp_axis(product, step.axis) : product;
    if (keep_products) c.products.emplace_back(step.axis, std::move(product));
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (std::find(idx.begin(), idx.end(), i) == idx.end()) rest.push_back(std::move(pool[i]));
    rest.push_back(std::move(message));
    pool = std::move(rest);
  }
  c.remaining = std::move(pool);
  return c;
}

/// log[(1/K^n) sum_k exp(sum of factors)].
inline double log_evidence(const std::vector<LogFactor>& factors, const EliminationPlan& plan, std::size_t K,
                           std::size_t* peak_rank = nullptr) {
  const Contraction c = contract(factors, plan);
  double total = 0.0;
  for (const auto& t : c.remaining) {
    if (t.rank() != 0) fail(ErrorKind::validation, "elimination plan does not cover every copy axis");
    total += t.scalar();
  }
  if (peak_rank) *peak_rank = std::max(*peak_rank, c.peak_rank);
  total -= static_cast<double>(plan.steps.size()) * std::log(static_cast<double>(K));
  if (!(total > -std::numeric_limits<double>::infinity()) || std::isnan(total)) {
    fail(ErrorKind::degenerate_evidence, "every importance weight is zero or undefined");
  }
  return total;
}

inline double log_evidence(const std::vector<LogFactor>& factors, std::size_t K) {
  return log_evidence(factors, plan_elimination(factors, all_copy_axes(factors)), K);
}

struct MomentEstimate {
  std::vector<std::vector<MeanParams>> moments;  // per latent, per cell
  double log_evidence = 0.0;
  std::vector<std::vector<double>> weights;      // per latent marginal weights over its copies
  std::size_t peak_rank = 0;
};

enum class Normalizer { self, external };

namespace detail {

// Moments of latent i from its marginal log weights log M(k) = log sum over other copies of r_k.
inline void finish_latent(const SampleBank& bank, const QState& q, std::size_t i, const Tensor& log_marginal,
                          double log_norm, MomentEstimate& est) {
  const std::size_t K = bank.K;
  std::vector<double> w(K);
  for (std::size_t k = 0; k < K; ++k) w[k] = std::exp(log_marginal[k] - log_norm);
  const Tensor& z = bank.values[i];
  const std::size_t cells = z.size() / K;
  const Family f = q.latents[i].family;
  std::vector<MeanParams> m(cells, MeanParams{f, {0.0, 0.0}});
  for (std::size_t k = 0; k < K; ++k) {
    if (w[k] == 0.0) continue;
    for (std::size_t c = 0; c < cells; ++c) {
      const auto t = sufficient_stats(f, z[k * cells + c]);
      m[c].m[0] += w[k] * t.m[0];
      m[c].m[1] += w[k] * t.m[1];
    }
  }
  est.moments[i] = std::move(m);
  est.weights[i] = std::move(w);
}

inline Tensor sum_to_axis(std::vector<Tensor> ts, Axis a, std::size_t K) {
  std::vector<const Tensor*> ptrs;
  for (const auto& t : ts) ptrs.push_back(&t);
  Tensor out = add_all(ptrs);
  if (!out.has(a)) {
    // No factor depended on this latent: uniform weights.
    const Tensor zeros({a}, {K}, 0.0);
    out = add(out, zeros);
  }
  if (out.rank() != 1) fail(ErrorKind::validation, "marginal contraction left extra axes");
  return out;
}

}  // namespace detail

/// Per-latent moments by eliminating every other copy axis. With Normalizer::external the
/// marginal weights are divided by K^n * exp(log_norm) instead of their own sum.
inline MomentEstimate posterior_moments(const Model& m, const SampleBank& bank, const QState& q,
                                        const std::vector<LogFactor>& factors, Normalizer normalizer = Normalizer::self,
                                        double external_log_norm = 0.0) {
  MomentEstimate est;
  const std::size_t n = m.latent_count();
  est.moments.resize(n);
  est.weights.resize(n);
  const auto axes = all_copy_axes(factors);
  const auto full = plan_elimination(factors, axes);
  est.log_evidence = log_evidence(factors, full, bank.K, &est.peak_rank);
  const double log_kn = static_cast<double>(axes.size()) * std::log(static_cast<double>(bank.K));
  for (std::size_t i = 0; i < n; ++i) {
    const Axis a = Axis::copy(static_cast<int>(i));
    std::vector<Axis> others;
    for (Axis x : axes)
      if (x != a) others.push_back(x);
    const auto plan = plan_elimination(factors, others);
    const Contraction c = contract(factors, plan);
    est.peak_rank = std::max(est.peak_rank, c.peak_rank);
    const Tensor lm = detail::sum_to_axis(c.remaining, a, bank.K);
    const double norm = normalizer == Normalizer::self ? logsumexp(lm.data()) : log_kn + external_log_norm;
    if (!std::isfinite(norm)) fail(ErrorKind::degenerate_evidence, "marginal weights of '" + m.ir.latents[i].name + "' are degenerate");
    detail::finish_latent(bank, q, i, lm, norm, est);
  }
  return est;
}

/// Evidence of an independent second bank, drawn from a seed derived from `seed`.
inline double fresh_denominator_evidence(const Model& m, const QState& q, std::uint64_t seed, std::size_t K,
                                         std::uint64_t iteration = 0, const FactorOptions& opt = {}) {
  const auto bank = draw_sample_bank(m, q, derive_seed(seed, "fresh"), K, iteration);
  const auto factors = build_log_factors(m, bank, q, opt);
  return log_evidence(factors, K);
}

/// Draws S index vectors k (one copy index per latent) with probability proportional to r_k,
/// by ancestral sampling through the stored elimination products in reverse.
inline std::vector<std::vector<std::size_t>> backward_resample(const std::vector<LogFactor>& factors, std::size_t n,
                                                               std::size_t K, std::uint64_t seed, std::size_t S) {
  const auto plan = plan_elimination(factors, all_copy_axes(factors));
  const Contraction c = contract(factors, plan, true);
  const CounterRng rng(seed, {label_hash("resample")});
  std::vector<std::vector<std::size_t>> out(S, std::vector<std::size_t>(n, 0));
  std::vector<double> logits(K), cdf(K);
  const std::size_t steps = c.products.size();
  for (std::size_t s = 0; s < S; ++s) {
    auto& idx = out[s];
    for (std::size_t j = steps; j-- > 0;) {
      const auto& [axis, prod] = c.products[j];
      const auto strides = prod.strides();
      std::size_t base = 0, stride = 0, extent = 1;
      for (std::size_t d = 0; d < prod.rank(); ++d) {
        const Axis a = prod.axes()[d];
        if (a == axis) {
          stride = strides[d];
          extent = prod.shape()[d];
        } else {
          base += idx[static_cast<std::size_t>(a.id)] * strides[d];
        }
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < extent; ++k) mx = std::max(mx, prod[base + k * stride]);
      if (mx == -std::numeric_limits<double>::infinity()) fail(ErrorKind::degenerate_evidence, "no admissible copy to resample");
      double acc = 0.0;
      for (std::size_t k = 0; k < extent; ++k) {
        acc += std::exp(prod[base + k * stride] - mx);
        cdf[k] = acc;
      }
      const double u = rng.uniform(s * steps + j) * acc;
      std::size_t pick = 0;
      while (pick + 1 < extent && cdf[pick] <= u) ++pick;
      idx[static_cast<std::size_t>(axis.id)] = pick;
    }
  }
  return out;
}

/// log (1/S) sum_s exp(log-likelihood of `test` at the resampled copies).
inline double predictive_log_likelihood(const Model& m, const SampleBank& bank, const QState& q,
                                        const std::vector<std::vector<std::size_t>>& samples, const Dataset& test,
                                        const FactorOptions& opt = {}) {
  if (samples.empty()) fail(ErrorKind::config, "predictive log-likelihood needs at least one sample");
  Dataset merged = m.ir.data;
  for (const auto& [k, v] : test) merged[k] = v;
  for (const auto& o : m.ir.observations) {
    auto it = test.find(o.data);
    if (it == test.end()) fail(ErrorKind::schema, "test data lacks column '" + o.data + "'");
    if (it->second.shape() != m.ir.data.at(o.data).shape()) fail(ErrorKind::schema, "test column '" + o.data + "' has the wrong shape");
  }
  const auto obs = build_log_factors(m, bank, q, opt, &merged, false);
  std::vector<double> ll(samples.size(), 0.0);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    for (const auto& f : obs) {
      const auto strides = f.table.strides();
      std::size_t off = 0;
      for (std::size_t d = 0; d < f.table.rank(); ++d) off += samples[s][static_cast<std::size_t>(f.table.axes()[d].id)] * strides[d];
      ll[s] += f.table[off];
    }
  }
  return logsumexp(ll) - std::log(static_cast<double>(samples.size()));
}

/// Global importance weighting: K joint samples, no index mixing.
inline MomentEstimate global_iw(const Model& m, const QState& q, std::uint64_t seed, std::size_t K,
                                std::uint64_t iteration = 0, const FactorOptions& opt = {}) {
  SampleBank bank = draw_sample_bank(m, q, seed, K, iteration);
  for (auto& v : bank.values) v = relabel(v, [](Axis a) { return a.is_copy() ? Axis::copy(0) : a; });
  const auto factors = build_log_factors(m, bank, q, opt);
  std::vector<const Tensor*> ptrs;
  for (const auto& f : factors) ptrs.push_back(&f.table);
  const Axis a0 = Axis::copy(0);
  Tensor log_r = add_all(ptrs);
  if (!log_r.has(a0)) log_r = add(log_r, Tensor({a0}, {K}, 0.0));
  MomentEstimate est;
  est.peak_rank = 1;
  est.log_evidence = logsumexp(log_r.data()) - std::log(static_cast<double>(K));
  if (!std::isfinite(est.log_evidence)) fail(ErrorKind::degenerate_evidence, "every importance weight is zero or undefined");
  const double norm = logsumexp(log_r.data());
  est.moments.resize(m.latent_count());
  est.weights.resize(m.latent_count());
  for (std::size_t i = 0; i < m.latent_count(); ++i) detail::finish_latent(bank, q, i, log_r, norm, est);
  return est;
}

}  // namespace qem
