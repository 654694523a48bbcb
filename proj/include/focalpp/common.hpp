#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace focalpp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Vec2 = Eigen::Vector2d;

// Invalid setup: bad dimensions, bad hyperparameters, missing inputs.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or failed numeric procedures.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File I/O failures carry a distinct code so callers can react per failure mode.
struct IoError : std::runtime_error {
  enum class Code {
    open_failed,
    bad_magic,
    version_mismatch,
    checksum_mismatch,
    truncated,
    layout_mismatch,
    already_exists,
    locked,
  };
  IoError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
  Code code;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

inline void require_finite(const Matrix& m, const std::string& where) {
  if (!m.allFinite()) throw NumericError("non-finite values in " + where);
}

inline void require_finite(double x, const std::string& where) {
  if (!std::isfinite(x)) throw NumericError("non-finite value in " + where);
}

}  // namespace focalpp
