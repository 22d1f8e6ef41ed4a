#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace davi {

// Scalar type used by every tensor. Double by default; the whole library can
// be flipped to single precision for faster training builds. Verification and
// the test suites assume the double build.
#ifdef DAVI_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

// ---------------------------------------------------------------------------
// Error hierarchy. The CLI maps these onto stable exit codes.
// ---------------------------------------------------------------------------

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct shape_error : error {
  using error::error;
};
struct config_error : error {
  using error::error;
};
struct contract_error : error {
  using error::error;
};
struct bounds_error : error {
  using error::error;
};
struct io_error : error {
  using error::error;
};
struct parse_error : error {
  using error::error;
};
struct generation_error : error {
  using error::error;
};
struct checkpoint_mismatch_error : error {
  using error::error;
};
struct train_abort_error : error {
  using error::error;
};

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// Global toggle for per-op finiteness validation. Off by default so training
// loops pay nothing; the test suites switch it on.
inline std::atomic<bool>& finite_checks_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

inline void set_finite_checks(bool on) { finite_checks_flag().store(on); }
inline bool finite_checks_enabled() { return finite_checks_flag().load(); }

inline bool all_finite(const std::vector<real>& v) {
  for (real x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace davi
