#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedavot {

// Process exit codes shared by the CLI and error types.
enum class ExitCode : int {
  kSuccess = 0,
  kValidation = 1,
  kInfeasible = 2,
  kIo = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Malformed input: non-simplex marginals, empty events, bad arguments.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error(ExitCode::kValidation, what) {}
};

// A client (or event) that can never receive (or emit) mass. Certifies a
// violated Hall inequality on a singleton.
class StructuralInfeasibility : public Error {
 public:
  enum class Side { kClient, kEvent };

  StructuralInfeasibility(Side side, std::size_t index, const std::string& what)
      : Error(ExitCode::kInfeasible, what), side_(side), index_(index) {}

  Side side() const noexcept { return side_; }
  std::size_t index() const noexcept { return index_; }

 private:
  Side side_;
  std::size_t index_;
};

// Transport problem admits no plan; raised by the simulator and the CLI.
class InfeasibleProblem : public Error {
 public:
  explicit InfeasibleProblem(const std::string& what)
      : Error(ExitCode::kInfeasible, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ExitCode::kIo, what) {}
};

}  // namespace fedavot
