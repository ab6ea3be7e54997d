#ifndef BITFOLD_ERROR_HPP_
#define BITFOLD_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace bitfold {

enum class ErrorCode {
  ShapeMismatch,
  NonFiniteValue,
  NotScalar,
  DetachedLoss,
  LengthMismatch,
  DegenerateInput,
  ParseError,
  MissingAtom,
  SpecInvalid,
  IndexOutOfRange,
  NonFiniteLoss,
  BadT,
  HeadMismatch,
  ModeInputMissing,
  TimeOrder,
  LayoutMismatch,
  InvalidConfig,
  CacheMiss,
  Io,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}
  ErrorCode code() const { return code_; }

private:
  ErrorCode code_;
};

// Line numbers are 1-based.
class ParseError : public Error {
public:
  ParseError(int line, const std::string& what)
      : Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

private:
  int line_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

} // namespace bitfold

#endif
