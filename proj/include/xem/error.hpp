#pragma once

#include <stdexcept>
#include <string>

namespace xem {

// Failure categories; the CLI maps these onto exit codes.
enum class ErrorKind {
  Format,           // malformed or unreadable header/file
  LengthMismatch,   // declared shape disagrees with payload size
  DegenerateRange,  // intensity range with lo >= hi
  CropTooLarge,     // requested crop exceeds the volume
  Bounds,           // index outside a valid extent
  Shape,            // tensor/volume shape mismatch
  Label,            // non-binary values where a mask is required
  EmptyInput,       // empty dataset or slice set
  DegeneratePhantom,  // rendered membrane fraction implausible; re-seed advised
  Config,           // inconsistent configuration
  NanAbort,         // non-finite loss during training
  Io,               // filesystem failure
};

const char* to_string(ErrorKind k);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(std::string(to_string(kind)) + ": " + msg), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

}  // namespace xem
