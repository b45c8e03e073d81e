#pragma once

#include <stdexcept>
#include <string>

namespace dtpdt {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
};

// Base error. Every error knows which exit code and machine-readable
// prefix the CLI reports for it.
class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ExitCode code() const { return code_; }

  const char* prefix() const {
    switch (code_) {
      case ExitCode::kConfig: return "E_CONFIG";
      case ExitCode::kData: return "E_DATA";
      case ExitCode::kNumeric: return "E_NUMERIC";
      default: return "E_OK";
    }
  }

 private:
  ExitCode code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ExitCode::kConfig, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ExitCode::kData, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ExitCode::kNumeric, what) {}
};

}  // namespace dtpdt
