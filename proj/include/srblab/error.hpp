#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace srblab {

/// Failure categories raised by the library. The CLI maps them onto exit codes.
enum class ErrorKind {
  invalid_input,
  normalization,
  degenerate_basis,
  contract,
  subspace,
  parameter,
  unknown_system,
  splitting_failure,
  not_partially_hyperbolic,
  domain,
  delta_too_large,
  itinerary,
  convergence,
  coverage,
  chart_refinement,
  distortion_failure,
  coherence,
  partial_fiber,
  missing_stage,
  config,
  io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_input: return "invalid-input";
    case ErrorKind::normalization: return "normalization";
    case ErrorKind::degenerate_basis: return "degenerate-basis";
    case ErrorKind::contract: return "contract";
    case ErrorKind::subspace: return "subspace";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::unknown_system: return "unknown-system";
    case ErrorKind::splitting_failure: return "splitting-failure";
    case ErrorKind::not_partially_hyperbolic: return "not-partially-hyperbolic";
    case ErrorKind::domain: return "domain";
    case ErrorKind::delta_too_large: return "delta-too-large";
    case ErrorKind::itinerary: return "itinerary";
    case ErrorKind::convergence: return "convergence";
    case ErrorKind::coverage: return "coverage";
    case ErrorKind::chart_refinement: return "chart-refinement";
    case ErrorKind::distortion_failure: return "distortion-failure";
    case ErrorKind::coherence: return "coherence";
    case ErrorKind::partial_fiber: return "partial-fiber";
    case ErrorKind::missing_stage: return "missing-stage";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) fail(kind, what);
}

}  // namespace srblab
