#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qem {

enum class ErrorKind {
  domain,             // value outside a family's support or invalid parameters
  infeasible_moments, // mean parameters outside the family's mean domain
  numerical,          // iterative solver failed to converge
  not_closed_under_scaling,
  broadcast,
  rank_cap,
  degenerate_evidence,
  m_step,
  guard_exceeded,
  unsupported_model,
  schema,
  validation,
  io,
  config,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::domain: return "domain";
    case ErrorKind::infeasible_moments: return "infeasible-moments";
    case ErrorKind::numerical: return "numerical";
    case ErrorKind::not_closed_under_scaling: return "not-closed-under-scaling";
    case ErrorKind::broadcast: return "broadcast";
    case ErrorKind::rank_cap: return "rank-cap";
    case ErrorKind::degenerate_evidence: return "degenerate-evidence";
    case ErrorKind::m_step: return "m-step";
    case ErrorKind::guard_exceeded: return "guard-exceeded";
    case ErrorKind::unsupported_model: return "unsupported-model";
    case ErrorKind::schema: return "schema";
    case ErrorKind::validation: return "validation";
    case ErrorKind::io: return "io";
    case ErrorKind::config: return "config";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind), detail_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace qem
