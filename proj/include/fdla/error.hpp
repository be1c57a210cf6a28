#pragma once

#include <stdexcept>
#include <string>

namespace fdla {

enum class ErrorKind { config, input, numeric, parse, io };

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "config error";
    case ErrorKind::input: return "input error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::parse: return "parse error";
    case ErrorKind::io: return "I/O error";
  }
  return "error";
}

/// Base of every error raised by the library. The kind decides the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct InputError : Error {
  explicit InputError(const std::string& what) : Error(ErrorKind::input, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error(ErrorKind::parse, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

}  // namespace fdla
