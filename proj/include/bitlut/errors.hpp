#pragma once

#include <stdexcept>
#include <string>

namespace bitlut {

// Every error carries a short stable code; the CLI prints it as the line prefix.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define BITLUT_DEFINE_ERROR(Name, Code)                                   \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(Code, what) {}         \
  };

BITLUT_DEFINE_ERROR(ParameterError, "E_PARAM")
BITLUT_DEFINE_ERROR(InputError, "E_INPUT")
BITLUT_DEFINE_ERROR(ShapeError, "E_SHAPE")
BITLUT_DEFINE_ERROR(LayoutError, "E_LAYOUT")
BITLUT_DEFINE_ERROR(ConfigError, "E_CONFIG")
BITLUT_DEFINE_ERROR(TuningError, "E_TUNING")
BITLUT_DEFINE_ERROR(IoError, "E_IO")

// Stream decoding failures, one class per failure so callers can tell them apart.
BITLUT_DEFINE_ERROR(BadMagicError, "E_FORMAT_MAGIC")
BITLUT_DEFINE_ERROR(VersionMismatchError, "E_FORMAT_VERSION")
BITLUT_DEFINE_ERROR(TruncatedError, "E_FORMAT_TRUNCATED")
BITLUT_DEFINE_ERROR(LengthMismatchError, "E_FORMAT_LENGTH")

#undef BITLUT_DEFINE_ERROR

}  // namespace bitlut
