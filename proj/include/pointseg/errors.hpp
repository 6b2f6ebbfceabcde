#pragma once
#include <stdexcept>
#include <string>

namespace pointseg {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorCategory {
  config = 2,    // bad key, bad value, violated configuration invariant
  io = 3,        // missing file, unreadable/unwritable path
  format = 4,    // on-disk layout disagrees with its manifest
  stage = 5,     // checkpoint stage incompatible with the command
  numeric = 6,   // NaN/Inf where finite values are required
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, const std::string& msg)
      : std::runtime_error(msg), category_(cat) {}
  ErrorCategory category() const { return category_; }
  const char* category_name() const {
    switch (category_) {
      case ErrorCategory::config: return "config";
      case ErrorCategory::io: return "io";
      case ErrorCategory::format: return "format";
      case ErrorCategory::stage: return "stage";
      case ErrorCategory::numeric: return "numeric";
    }
    return "unknown";
  }

 private:
  ErrorCategory category_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(ErrorCategory::config, m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error(ErrorCategory::io, m) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error(ErrorCategory::format, m) {}
};
struct StageError : Error {
  explicit StageError(const std::string& m) : Error(ErrorCategory::stage, m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error(ErrorCategory::numeric, m) {}
};

}  // namespace pointseg
