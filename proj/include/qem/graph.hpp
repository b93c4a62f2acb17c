#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qem/distributions.hpp"
#include "qem/error.hpp"
#include "qem/special_functions.hpp"
#include "qem/tensor.hpp"

namespace qem {

struct PlateDecl {
  std::string name;
  std::size_t size = 1;
  bool operator==(const PlateDecl&) const = default;
};

enum class CovariateType { real, integer };

struct CovariateDecl {
  std::string name;
  std::vector<std::string> plates;
  CovariateType type = CovariateType::real;
  bool operator==(const CovariateDecl&) const = default;
};

/// Parameter expression. `name` holds the referenced symbol (or the gathered table);
/// `index` holds the integer covariate used by gather.
struct Expr {
  enum class Op { constant, ref, add, sub, mul, div, neg, exp, sigmoid, gather };

  Op op = Op::constant;
  double value = 0.0;
  std::string name;
  std::string index;
  std::vector<Expr> args;

  bool operator==(const Expr&) const = default;
};

namespace expr {

inline Expr num(double v) { return Expr{Expr::Op::constant, v, {}, {}, {}}; }
inline Expr ref(std::string name) { return Expr{Expr::Op::ref, 0.0, std::move(name), {}, {}}; }
inline Expr unary(Expr::Op op, Expr a) { return Expr{op, 0.0, {}, {}, {std::move(a)}}; }
inline Expr binary(Expr::Op op, Expr a, Expr b) { return Expr{op, 0.0, {}, {}, {std::move(a), std::move(b)}}; }
inline Expr exp(Expr a) { return unary(Expr::Op::exp, std::move(a)); }
inline Expr sigmoid(Expr a) { return unary(Expr::Op::sigmoid, std::move(a)); }
inline Expr gather(std::string table, std::string index) {
  return Expr{Expr::Op::gather, 0.0, std::move(table), std::move(index), {}};
}

inline Expr operator+(Expr a, Expr b) { return binary(Expr::Op::add, std::move(a), std::move(b)); }
inline Expr operator-(Expr a, Expr b) { return binary(Expr::Op::sub, std::move(a), std::move(b)); }
inline Expr operator*(Expr a, Expr b) { return binary(Expr::Op::mul, std::move(a), std::move(b)); }
inline Expr operator/(Expr a, Expr b) { return binary(Expr::Op::div, std::move(a), std::move(b)); }
inline Expr operator-(Expr a) { return unary(Expr::Op::neg, std::move(a)); }

}  // namespace expr

/// Every symbol an expression mentions, in first-occurrence order.
inline void collect_names(const Expr& e, std::vector<std::string>& out) {
  auto add = [&](const std::string& n) {
    if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
  };
  if (e.op == Expr::Op::ref) add(e.name);
  if (e.op == Expr::Op::gather) {
    add(e.name);
    add(e.index);
  }
  for (const auto& a : e.args) collect_names(a, out);
}

struct LatentDecl {
  std::string name;
  std::vector<std::string> plates;
  Family prior_family = Family::gaussian;
  std::vector<Expr> prior_params;
  Family proposal_family = Family::gaussian;
  MeanParams proposal_init;
  bool operator==(const LatentDecl&) const = default;
};

struct ObservationDecl {
  std::string name;
  std::vector<std::string> plates;
  Family family = Family::gaussian;
  std::vector<Expr> params;
  std::string data;  // dataset column
  bool operator==(const ObservationDecl&) const = default;
};

/// Column name -> tensor over the binding's plate axes.
using Dataset = std::map<std::string, Tensor>;

struct ModelIR {
  std::vector<PlateDecl> plates;
  std::vector<CovariateDecl> covariates;
  std::vector<LatentDecl> latents;
  std::vector<ObservationDecl> observations;
  Dataset data;

  bool operator==(const ModelIR&) const = default;

  template <class T>
  static std::optional<std::size_t> find(const std::vector<T>& v, const std::string& name) {
    for (std::size_t i = 0; i < v.size(); ++i)
      if (v[i].name == name) return i;
    return std::nullopt;
  }
  std::optional<std::size_t> plate_index(const std::string& n) const { return find(plates, n); }
  std::optional<std::size_t> covariate_index(const std::string& n) const { return find(covariates, n); }
  std::optional<std::size_t> latent_index(const std::string& n) const { return find(latents, n); }
  std::optional<std::size_t> observation_index(const std::string& n) const { return find(observations, n); }

  const LatentDecl& latent(const std::string& n) const {
    auto i = latent_index(n);
    if (!i) fail(ErrorKind::validation, "unknown latent '" + n + "'");
    return latents[*i];
  }

  std::vector<Axis> plate_axes(const std::vector<std::string>& names) const {
    std::vector<Axis> axes;
    for (const auto& n : names) {
      auto i = plate_index(n);
      if (!i) fail(ErrorKind::validation, "unknown plate '" + n + "'");
      axes.push_back(Axis::plate(static_cast<int>(*i)));
    }
    return axes;
  }
  std::vector<std::size_t> plate_shape(const std::vector<std::string>& names) const {
    std::vector<std::size_t> shape;
    for (const auto& n : names) {
      auto i = plate_index(n);
      if (!i) fail(ErrorKind::validation, "unknown plate '" + n + "'");
      shape.push_back(plates[*i].size);
    }
    return shape;
  }
  std::size_t cell_count(const std::vector<std::string>& names) const {
    return Tensor::element_count(plate_shape(names));
  }
  /// Plates of any declared symbol.
  std::optional<std::vector<std::string>> plates_of(const std::string& n) const {
    if (auto i = latent_index(n)) return latents[*i].plates;
    if (auto i = covariate_index(n)) return covariates[*i].plates;
    if (auto i = observation_index(n)) return observations[*i].plates;
    return std::nullopt;
  }
};

/// Wraps row-major values over the given plates into a tensor with canonical axis order.
inline Tensor plate_tensor(const ModelIR& m, const std::vector<std::string>& plates, std::vector<double> values) {
  return Tensor::from_unsorted(m.plate_axes(plates), m.plate_shape(plates), values);
}

/// Row-major values of a plate tensor in the declared plate order.
inline std::vector<double> plate_values(const ModelIR& m, const std::vector<std::string>& plates, const Tensor& t) {
  const auto axes = m.plate_axes(plates);
  const auto shape = m.plate_shape(plates);
  std::vector<double> out(Tensor::element_count(shape));
  const auto strides = t.strides();
  std::vector<std::size_t> idx(axes.size(), 0);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < axes.size(); ++d) off += idx[d] * strides[*t.position(axes[d])];
    out[flat] = t[off];
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validation

enum class IssueKind {
  cycle,
  unresolved_name,
  duplicate_name,
  plate_mismatch,
  unsupported_family,
  arity,
  invalid_proposal,
  missing_data,
  out_of_support,
  unreachable,
};

inline std::string_view to_string(IssueKind k) {
  switch (k) {
    case IssueKind::cycle: return "cycle";
    case IssueKind::unresolved_name: return "unresolved-name";
    case IssueKind::duplicate_name: return "duplicate-name";
    case IssueKind::plate_mismatch: return "plate-mismatch";
    case IssueKind::unsupported_family: return "unsupported-family";
    case IssueKind::arity: return "arity";
    case IssueKind::invalid_proposal: return "invalid-proposal";
    case IssueKind::missing_data: return "missing-data";
    case IssueKind::out_of_support: return "out-of-support";
    case IssueKind::unreachable: return "unreachable";
  }
  return "?";
}

struct Issue {
  IssueKind kind;
  std::string subject;              // declaration the issue is attached to
  std::vector<std::string> names;   // every declaration involved
  std::string message;
};

struct ValidationReport {
  std::vector<Issue> errors;
  std::vector<Issue> warnings;
  std::vector<std::string> order;                                 // latents, topological
  std::map<std::string, std::vector<std::string>> latent_parents;  // latent -> latent parents
  std::map<std::string, std::vector<std::string>> observation_parents;

  bool ok() const { return errors.empty(); }

  std::string text() const {
    std::ostringstream os;
    if (ok()) {
      os << "OK\norder:";
      for (const auto& n : order) os << " " << n;
      os << "\n";
    }
    for (const auto& e : errors) os << "error [" << to_string(e.kind) << "] " << e.message << "\n";
    for (const auto& w : warnings) os << "warning [" << to_string(w.kind) << "] " << w.message << "\n";
    return os.str();
  }
};

struct ValidateOptions {
  bool require_data = false;  // report missing bindings as errors
};

namespace detail {

inline bool subset(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return std::all_of(a.begin(), a.end(), [&](const auto& x) { return std::find(b.begin(), b.end(), x) != b.end(); });
}

inline std::string join(const std::vector<std::string>& v, std::string_view sep = ", ") {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(sep) : "") + v[i];
  return out;
}

inline std::string shape_text(const std::vector<std::size_t>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

// Latent names referenced by an expression, in first-occurrence order.
inline std::vector<std::string> latent_refs(const ModelIR& m, const std::vector<Expr>& exprs) {
  std::vector<std::string> names, out;
  for (const auto& e : exprs) collect_names(e, names);
  for (const auto& n : names)
    if (m.latent_index(n)) out.push_back(n);
  return out;
}

inline void check_expr(const ModelIR& m, const Expr& e, const std::string& owner,
                       const std::vector<std::string>& owner_plates, std::vector<Issue>& errors) {
  switch (e.op) {
    case Expr::Op::ref: {
      if (m.observation_index(e.name)) {
        errors.push_back({IssueKind::unresolved_name, owner, {owner, e.name},
                          "'" + owner + "' references observation '" + e.name + "', which is not a value"});
        return;
      }
      auto p = m.plates_of(e.name);
      if (!p) {
        errors.push_back({IssueKind::unresolved_name, owner, {owner}, "'" + owner + "' references unknown name '" + e.name + "'"});
        return;
      }
      if (!subset(*p, owner_plates)) {
        errors.push_back({IssueKind::plate_mismatch, owner, {owner, e.name},
                          "'" + owner + "' over [" + join(owner_plates) + "] uses '" + e.name + "' over [" + join(*p) +
                              "]"});
      }
      return;
    }
    case Expr::Op::gather: {
      auto table = m.plates_of(e.name);
      auto index = m.plates_of(e.index);
      if (!table || m.observation_index(e.name)) {
        errors.push_back({IssueKind::unresolved_name, owner, {owner}, "'" + owner + "' gathers from unknown name '" + e.name + "'"});
      }
      auto ci = m.covariate_index(e.index);
      if (!ci) {
        errors.push_back({IssueKind::unresolved_name, owner, {owner},
                          "'" + owner + "' gathers with '" + e.index + "', which is not a declared covariate"});
      } else if (m.covariates[*ci].type != CovariateType::integer) {
        errors.push_back({IssueKind::plate_mismatch, owner, {owner, e.index},
                          "gather index '" + e.index + "' must be an int covariate"});
      }
      if (table && table->size() != 1) {
        errors.push_back({IssueKind::plate_mismatch, owner, {owner, e.name},
                          "gather table '" + e.name + "' must have exactly one plate, has " + std::to_string(table->size())});
      }
      if (index && !subset(*index, owner_plates)) {
        errors.push_back({IssueKind::plate_mismatch, owner, {owner, e.index},
                          "'" + owner + "' over [" + join(owner_plates) + "] uses index '" + e.index + "' over [" +
                              join(*index) + "]"});
      }
      if (table && index && table->size() == 1 &&
          std::find(index->begin(), index->end(), table->front()) != index->end()) {
        errors.push_back({IssueKind::plate_mismatch, owner, {owner, e.name},
                          "gather index '" + e.index + "' may not range over the gathered plate " + table->front()});
      }
      return;
    }
    default:
      for (const auto& a : e.args) check_expr(m, a, owner, owner_plates, errors);
  }
}

inline bool same_support(Family a, Family b) {
  auto cls = [](Family f) {
    switch (f) {
      case Family::gaussian: return 0;
      case Family::bernoulli: return 1;
      case Family::beta: return 2;
      case Family::gamma: return 3;
      case Family::negative_binomial_lik: return 4;
    }
    return -1;
  };
  return cls(a) == cls(b);
}

inline void check_binding(const ModelIR& m, const std::string& owner, const std::string& column,
                          const std::vector<std::string>& plates, std::optional<Family> family, bool integer,
                          const ValidateOptions& opt, std::vector<Issue>& errors) {
  auto it = m.data.find(column);
  if (it == m.data.end()) {
    if (opt.require_data) {
      errors.push_back({IssueKind::missing_data, owner, {owner}, "'" + owner + "' is bound to missing column '" + column + "'"});
    }
    return;
  }
  const Tensor& t = it->second;
  std::vector<Axis> want_axes;
  std::vector<std::size_t> want_shape;
  try {
    want_axes = m.plate_axes(plates);
    want_shape = m.plate_shape(plates);
  } catch (const Error&) {
    return;  // unknown plate already reported
  }
  std::vector<std::size_t> actual = t.shape();
  bool match = t.rank() == want_axes.size() && Tensor::element_count(actual) == Tensor::element_count(want_shape);
  if (match) {
    for (std::size_t d = 0; d < want_axes.size(); ++d)
      if (!t.has(want_axes[d]) || t.extent(want_axes[d]) != want_shape[d]) match = false;
  }
  if (!match) {
    errors.push_back({IssueKind::plate_mismatch, owner, {owner},
                      "'" + owner + "' expects column '" + column + "' of shape " + shape_text(want_shape) + " over [" +
                          join(plates) + "], got " + std::to_string(t.size()) + " values with shape " + shape_text(actual)});
    return;
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = t[i];
    const bool bad = family ? !in_support(*family, v) : (!std::isfinite(v) || (integer && v != std::floor(v)));
    if (bad) {
      std::ostringstream os;
      os.precision(17);
      os << "column '" << column << "' value " << v << " at position " << i << " is outside the support of "
         << (family ? std::string(family_name(*family)) : std::string(integer ? "int" : "real"));
      errors.push_back({IssueKind::out_of_support, owner, {owner}, os.str()});
      return;
    }
  }
}

}  // namespace detail

inline ValidationReport validate(const ModelIR& m, const ValidateOptions& opt = {}) {
  ValidationReport r;
  auto& errors = r.errors;

  // Names are unique across plates, covariates, latents and observations.
  std::map<std::string, int> seen;
  auto declare = [&](const std::string& n) {
    if (++seen[n] == 2) errors.push_back({IssueKind::duplicate_name, n, {n}, "name '" + n + "' is declared more than once"});
  };
  for (const auto& p : m.plates) {
    declare(p.name);
    if (p.size < 1) errors.push_back({IssueKind::plate_mismatch, p.name, {p.name}, "plate '" + p.name + "' has size 0"});
  }
  for (const auto& c : m.covariates) declare(c.name);
  for (const auto& l : m.latents) declare(l.name);
  for (const auto& o : m.observations) declare(o.name);

  auto check_plates = [&](const std::string& owner, const std::vector<std::string>& plates) {
    std::set<std::string> uniq;
    for (const auto& p : plates) {
      if (!m.plate_index(p)) errors.push_back({IssueKind::unresolved_name, owner, {owner}, "'" + owner + "' uses unknown plate '" + p + "'"});
      if (!uniq.insert(p).second)
        errors.push_back({IssueKind::plate_mismatch, owner, {owner}, "'" + owner + "' lists plate '" + p + "' twice"});
    }
  };

  for (const auto& c : m.covariates) {
    check_plates(c.name, c.plates);
    detail::check_binding(m, c.name, c.name, c.plates, std::nullopt, c.type == CovariateType::integer, opt, errors);
  }

  for (const auto& l : m.latents) {
    check_plates(l.name, l.plates);
    if (!is_proposal_family(l.prior_family)) {
      errors.push_back({IssueKind::unsupported_family, l.name, {l.name},
                        "latent '" + l.name + "' cannot have a " + std::string(family_name(l.prior_family)) + " prior"});
    }
    if (!is_proposal_family(l.proposal_family)) {
      errors.push_back({IssueKind::unsupported_family, l.name, {l.name},
                        "latent '" + l.name + "' cannot use " + std::string(family_name(l.proposal_family)) + " as a proposal"});
    } else if (!detail::same_support(l.prior_family, l.proposal_family)) {
      errors.push_back({IssueKind::unsupported_family, l.name, {l.name},
                        "latent '" + l.name + "' proposal " + std::string(family_name(l.proposal_family)) +
                            " does not share the support of its " + std::string(family_name(l.prior_family)) + " prior"});
    } else if (l.proposal_init.family != l.proposal_family || !is_feasible(l.proposal_init)) {
      errors.push_back({IssueKind::invalid_proposal, l.name, {l.name},
                        "latent '" + l.name + "' has infeasible initial proposal mean parameters"});
    }
    if (l.prior_params.size() != param_count(l.prior_family)) {
      errors.push_back({IssueKind::arity, l.name, {l.name},
                        "latent '" + l.name + "': " + std::string(family_name(l.prior_family)) + " takes " +
                            std::to_string(param_count(l.prior_family)) + " parameters, got " +
                            std::to_string(l.prior_params.size())});
    }
    for (const auto& e : l.prior_params) detail::check_expr(m, e, l.name, l.plates, errors);
  }

  for (const auto& o : m.observations) {
    check_plates(o.name, o.plates);
    if (o.params.size() != param_count(o.family)) {
      errors.push_back({IssueKind::arity, o.name, {o.name},
                        "observation '" + o.name + "': " + std::string(family_name(o.family)) + " takes " +
                            std::to_string(param_count(o.family)) + " parameters, got " + std::to_string(o.params.size())});
    }
    for (const auto& e : o.params) detail::check_expr(m, e, o.name, o.plates, errors);
    detail::check_binding(m, o.name, o.data, o.plates, o.family, false, opt, errors);
  }

  // Dependency graph among latents.
  const std::size_t n = m.latents.size();
  std::vector<std::vector<std::size_t>> parents(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> names;
    for (const auto& e : m.latents[i].prior_params) collect_names(e, names);
    std::vector<std::size_t> idx;
    for (const auto& nm : names)
      if (auto j = m.latent_index(nm)) idx.push_back(*j);
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    parents[i] = idx;
    for (std::size_t j : idx) r.latent_parents[m.latents[i].name].push_back(m.latents[j].name);
    r.latent_parents[m.latents[i].name];
  }
  for (const auto& o : m.observations) {
    std::vector<std::size_t> idx;
    for (const auto& nm : detail::latent_refs(m, o.params)) idx.push_back(*m.latent_index(nm));
    std::sort(idx.begin(), idx.end());
    auto& out = r.observation_parents[o.name];
    for (std::size_t j : idx) out.push_back(m.latents[j].name);
  }

  // Kahn's algorithm, ties broken by declaration order.
  std::vector<int> indeg(n, 0);
  std::vector<std::vector<std::size_t>> children(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j : parents[i]) {
      if (j == i) continue;
      ++indeg[i];
      children[j].push_back(i);
    }
  std::vector<bool> done(n, false);
  for (std::size_t step = 0; step < n; ++step) {
    std::optional<std::size_t> pick;
    for (std::size_t i = 0; i < n && !pick; ++i)
      if (!done[i] && indeg[i] == 0) pick = i;
    if (!pick) break;
    done[*pick] = true;
    r.order.push_back(m.latents[*pick].name);
    for (std::size_t c : children[*pick]) --indeg[c];
  }
  for (std::size_t i = 0; i < n; ++i) {
    bool self = std::find(parents[i].begin(), parents[i].end(), i) != parents[i].end();
    if (self) done[i] = false;
  }
  std::vector<std::string> cyc;
  for (std::size_t i = 0; i < n; ++i)
    if (!done[i]) cyc.push_back(m.latents[i].name);
  if (!cyc.empty()) {
    errors.push_back({IssueKind::cycle, cyc.front(), cyc, "dependency cycle among latents: " + detail::join(cyc)});
  }

  // Reachability: every latent should be an ancestor of some observation.
  std::vector<bool> reach(n, false);
  std::vector<std::size_t> stack;
  for (const auto& [obs, ps] : r.observation_parents)
    for (const auto& p : ps) stack.push_back(*m.latent_index(p));
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    if (reach[i]) continue;
    reach[i] = true;
    for (std::size_t j : parents[i]) stack.push_back(j);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!reach[i]) {
      r.warnings.push_back({IssueKind::unreachable, m.latents[i].name, {m.latents[i].name},
                            "latent '" + m.latents[i].name + "' does not influence any observation"});
    }
  }
  if (!r.ok()) r.order.clear();
  return r;
}

/// Parent sets by expression traversal, each listed in declaration order.
struct ParentSets {
  std::map<std::string, std::vector<std::string>> latents;
  std::map<std::string, std::vector<std::string>> observations;
};

inline ParentSets parent_sets(const ModelIR& m) {
  const auto r = validate(m);
  return {r.latent_parents, r.observation_parents};
}

// ---------------------------------------------------------------------------
// Compiled form used by the engine: latents in topological order, integer parent sets.

struct Model {
  ModelIR ir;
  std::vector<std::vector<std::size_t>> latent_parents;  // indices into ir.latents
  std::vector<std::vector<std::size_t>> obs_parents;     // indices into ir.latents
  std::vector<std::string> warnings;

  std::size_t latent_count() const { return ir.latents.size(); }
  std::vector<Axis> latent_plate_axes(std::size_t i) const { return ir.plate_axes(ir.latents[i].plates); }
  std::vector<std::size_t> latent_plate_shape(std::size_t i) const { return ir.plate_shape(ir.latents[i].plates); }
  std::size_t latent_cells(std::size_t i) const { return ir.cell_count(ir.latents[i].plates); }

  /// The largest initial factor rank: 1 + |parents| over latents, |deps| over observations.
  std::size_t max_factor_rank() const {
    std::size_t r = 0;
    for (const auto& p : latent_parents) r = std::max(r, 1 + p.size());
    for (const auto& p : obs_parents) r = std::max(r, p.size());
    return r;
  }
};

/// Validates (data required) and reorders latents topologically. Throws a validation error.
inline Model compile(const ModelIR& ir) {
  const auto report = validate(ir, {.require_data = true});
  if (!report.ok()) fail(ErrorKind::validation, report.text());
  Model m;
  m.ir = ir;
  m.ir.latents.clear();
  for (const auto& name : report.order) m.ir.latents.push_back(ir.latent(name));
  for (const auto& l : m.ir.latents) {
    std::vector<std::size_t> ps;
    for (const auto& p : report.latent_parents.at(l.name)) ps.push_back(*m.ir.latent_index(p));
    std::sort(ps.begin(), ps.end());
    m.latent_parents.push_back(ps);
  }
  for (const auto& o : m.ir.observations) {
    std::vector<std::size_t> ps;
    for (const auto& p : report.observation_parents.at(o.name)) ps.push_back(*m.ir.latent_index(p));
    std::sort(ps.begin(), ps.end());
    m.obs_parents.push_back(ps);
  }
  for (const auto& w : report.warnings) m.warnings.push_back(w.message);
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation

using Lookup = std::function<const Tensor&(const std::string&)>;

/// Evaluates an expression elementwise over the union of its operands' axes.
inline Tensor eval_expr(const Expr& e, const Lookup& lookup) {
  using Op = Expr::Op;
  switch (e.op) {
    case Op::constant: return Tensor(e.value);
    case Op::ref: return lookup(e.name);
    case Op::gather: {
      const Tensor& table = lookup(e.name);
      const Tensor& index = lookup(e.index);
      std::optional<Axis> plate;
      for (Axis a : table.axes())
        if (a.is_plate()) {
          if (plate) fail(ErrorKind::broadcast, "gather table '" + e.name + "' has more than one plate axis");
          plate = a;
        }
      if (!plate) fail(ErrorKind::broadcast, "gather table '" + e.name + "' has no plate axis");
      return gather(table, *plate, index);
    }
    case Op::neg: return map(eval_expr(e.args[0], lookup), [](double x) { return -x; });
    case Op::exp: return map(eval_expr(e.args[0], lookup), [](double x) { return std::exp(x); });
    case Op::sigmoid: return map(eval_expr(e.args[0], lookup), [](double x) { return special::sigmoid(x); });
    default: break;
  }
  const Tensor a = eval_expr(e.args[0], lookup);
  const Tensor b = eval_expr(e.args[1], lookup);
  switch (e.op) {
    case Op::add: return broadcast_map<2>({&a, &b}, [](double x, double y) { return x + y; });
    case Op::sub: return broadcast_map<2>({&a, &b}, [](double x, double y) { return x - y; });
    case Op::mul: return broadcast_map<2>({&a, &b}, [](double x, double y) { return x * y; });
    case Op::div: return broadcast_map<2>({&a, &b}, [](double x, double y) { return x / y; });
    default: break;
  }
  fail(ErrorKind::broadcast, "malformed expression");
}

inline Tensor eval_expr(const Expr& e, const std::map<std::string, Tensor>& bindings) {
  return eval_expr(e, [&](const std::string& n) -> const Tensor& {
    auto it = bindings.find(n);
    if (it == bindings.end()) fail(ErrorKind::validation, "unbound name '" + n + "'");
    return it->second;
  });
}

/// Axes the result of an expression will carry, given each binding's axes.
inline std::vector<Axis> expr_axes(const Expr& e, const std::function<std::vector<Axis>(const std::string&)>& axes_of) {
  std::vector<Axis> out;
  auto merge = [&](const std::vector<Axis>& as) {
    for (Axis a : as)
      if (std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
  };
  if (e.op == Expr::Op::ref) merge(axes_of(e.name));
  if (e.op == Expr::Op::gather) {
    for (Axis a : axes_of(e.name))
      if (a.is_copy()) merge({a});
    merge(axes_of(e.index));
  }
  for (const auto& a : e.args) merge(expr_axes(a, axes_of));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace qem
