#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace ktie {

// Base class for every error raised by the library. The CLI maps the
// subclasses onto exit codes.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class InvalidDomain : public Error {
  public:
    using Error::Error;
};

class OutOfDomain : public Error {
  public:
    using Error::Error;
};

class EscapedDomain : public Error {
  public:
    using Error::Error;
};

// Geodesic trace ran past 4 * D_metric without reaching the boundary.
class TrappedGeodesic : public Error {
  public:
    using Error::Error;
};

class InvalidQuadrature : public Error {
  public:
    using Error::Error;
};

class GridMismatch : public Error {
  public:
    using Error::Error;
};

class InvalidArgument : public Error {
  public:
    using Error::Error;
};

// A coefficient or solver hypothesis does not hold; message names the failing one.
class PreconditionViolation : public Error {
  public:
    using Error::Error;
};

class SmallnessGate : public Error {
  public:
    using Error::Error;
};

class NonConvergence : public Error {
  public:
    NonConvergence(const std::string& what, std::vector<double> history)
        : Error(what), history_(std::move(history)) {}

    const std::vector<double>& history() const { return history_; }

  private:
    std::vector<double> history_;
};

class Divergence : public NonConvergence {
  public:
    using NonConvergence::NonConvergence;
};

// Aggregated configuration problems: every violation found, not just the first.
class ConfigError : public Error {
  public:
    explicit ConfigError(std::vector<std::string> problems)
        : Error(join(problems)), problems_(std::move(problems)) {}

    const std::vector<std::string>& problems() const { return problems_; }

  private:
    static std::string join(const std::vector<std::string>& items) {
        std::string out;
        for (const auto& item : items) {
            if (!out.empty())
                out += "; ";
            out += item;
        }
        return out;
    }

    std::vector<std::string> problems_;
};

} // namespace ktie
