#ifndef LGCP_COMMON_HPP
#define LGCP_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace lgcp {

// Error categories map to process exit codes in the CLI:
// config = 2, numeric = 3, io = 4.
enum class error_kind { config, numeric, io };

class error : public std::runtime_error {
public:
  error(error_kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  error_kind kind() const { return kind_; }
  int exit_code() const {
    switch (kind_) {
      case error_kind::config: return 2;
      case error_kind::numeric: return 3;
      case error_kind::io: return 4;
    }
    return 1;
  }

private:
  error_kind kind_;
};

struct invalid_geometry_error : error {
  explicit invalid_geometry_error(const std::string& m) : error(error_kind::config, m) {}
};
struct resource_limit_error : error {
  explicit resource_limit_error(const std::string& m) : error(error_kind::config, m) {}
};
struct unknown_covariate_error : error {
  explicit unknown_covariate_error(const std::string& m) : error(error_kind::config, m) {}
};
struct no_coverage_error : error {
  explicit no_coverage_error(const std::string& m) : error(error_kind::config, m) {}
};
struct duplicate_site_error : error {
  explicit duplicate_site_error(const std::string& m) : error(error_kind::config, m) {}
};
struct degenerate_extent_error : error {
  explicit degenerate_extent_error(const std::string& m) : error(error_kind::config, m) {}
};
struct dimension_error : error {
  explicit dimension_error(const std::string& m) : error(error_kind::numeric, m) {}
};
struct factorisation_error : error {
  explicit factorisation_error(const std::string& m) : error(error_kind::numeric, m) {}
};
struct sampler_failure_error : error {
  explicit sampler_failure_error(const std::string& m) : error(error_kind::numeric, m) {}
};
struct chain_failure_error : error {
  explicit chain_failure_error(const std::string& m) : error(error_kind::numeric, m) {}
};
struct step_failure_error : error {
  explicit step_failure_error(const std::string& m) : error(error_kind::numeric, m) {}
};
struct initialisation_error : error {
  explicit initialisation_error(const std::string& m) : error(error_kind::numeric, m) {}
};
struct numeric_error : error {
  explicit numeric_error(const std::string& m) : error(error_kind::numeric, m) {}
};
struct unsupported_error : error {
  explicit unsupported_error(const std::string& m) : error(error_kind::config, m) {}
};
struct config_error : error {
  explicit config_error(const std::string& m) : error(error_kind::config, m) {}
};
struct io_error : error {
  explicit io_error(const std::string& m) : error(error_kind::io, m) {}
};

inline double sq(double x) { return x * x; }

// Inverse standard normal CDF (Acklam's rational approximation, |rel err| < 1.2e-9).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw numeric_error("normal_quantile: p outside (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double q, r;
  if (p < plow) {
    q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > 1.0 - plow) {
    q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  q = p - 0.5;
  r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

// FNV-1a over a byte string; used for artifact integrity hashes.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace lgcp

#endif
