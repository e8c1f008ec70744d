#pragma once

#include <stdexcept>
#include <string>

namespace geolvm {

enum class ErrorKind { Dimension, Domain, Validation, Config, Io, Numerical };

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::Dimension:  return "dimension";
    case ErrorKind::Domain:     return "domain";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Config:     return "config";
    case ErrorKind::Io:         return "io";
    case ErrorKind::Numerical:  return "numerical";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind k, const std::string& msg)
      : std::runtime_error(std::string(error_kind_name(k)) + ": " + msg), kind(k) {}
  ErrorKind kind;
};

[[noreturn]] inline void fail(ErrorKind k, const std::string& msg) { throw Error(k, msg); }

inline void require(bool cond, ErrorKind k, const std::string& msg) {
  if (!cond) fail(k, msg);
}

// CLI exit-code policy: bad inputs/config -> 2, numerical breakdown -> 3.
inline int exit_code_for(ErrorKind k) {
  return k == ErrorKind::Numerical ? 3 : 2;
}

}  // namespace geolvm
