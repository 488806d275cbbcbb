#pragma once

#include <stdexcept>
#include <string>

namespace mlsan {

// Error families. Each maps to a distinct CLI exit code (see exit_code()).
enum class ErrorKind {
  dimension,
  index,
  contract,
  state,
  config,
  parse,
  io,
  load,
  determinism,
  numerical,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define MLSAN_DEFINE_ERROR(Name, kind_value)                                   \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& what) : Error(ErrorKind::kind_value, what) {} \
  };

MLSAN_DEFINE_ERROR(DimensionError, dimension)
MLSAN_DEFINE_ERROR(IndexError, index)
MLSAN_DEFINE_ERROR(ContractError, contract)
MLSAN_DEFINE_ERROR(StateError, state)
MLSAN_DEFINE_ERROR(ConfigError, config)
MLSAN_DEFINE_ERROR(ParseError, parse)
MLSAN_DEFINE_ERROR(IoError, io)
MLSAN_DEFINE_ERROR(LoadError, load)
MLSAN_DEFINE_ERROR(DeterminismError, determinism)
MLSAN_DEFINE_ERROR(NumericalError, numerical)

#undef MLSAN_DEFINE_ERROR

namespace exit_codes {
inline constexpr int ok = 0;
inline constexpr int internal = 1;
inline constexpr int config = 2;
inline constexpr int data = 3;
inline constexpr int numerical = 4;
inline constexpr int check_failed = 5;
}  // namespace exit_codes

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
      return exit_codes::config;
    case ErrorKind::parse:
    case ErrorKind::io:
    case ErrorKind::load:
    case ErrorKind::dimension:
    case ErrorKind::index:
    case ErrorKind::contract:
      return exit_codes::data;
    case ErrorKind::numerical:
      return exit_codes::numerical;
    case ErrorKind::state:
    case ErrorKind::determinism:
      return exit_codes::internal;
  }
  return exit_codes::internal;
}

}  // namespace mlsan
