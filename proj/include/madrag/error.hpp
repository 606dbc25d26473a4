#pragma once

#include <stdexcept>
#include <string>

namespace madrag {

// All library failures derive from Error so callers can catch one type and
// report `kind()` in machine-readable output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};

struct DegenerateRowError : Error {
  explicit DegenerateRowError(const std::string& w) : Error("degenerate_row", w) {}
};

struct ContractViolation : Error {
  explicit ContractViolation(const std::string& w) : Error("contract_violation", w) {}
};

struct LayoutError : Error {
  explicit LayoutError(const std::string& w) : Error("layout", w) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error("numeric", w) {}
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io", w) {}
};

}  // namespace madrag
