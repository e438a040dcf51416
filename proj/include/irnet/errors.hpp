#pragma once

#include <stdexcept>
#include <string>

namespace irnet {

// All recoverable failures surface as one exception type tagged with a
// machine-checkable kind. Messages always name the offending entity
// (dimension, path, parameter, config key).
class Error : public std::runtime_error {
public:
  enum class Kind {
    Shape,    // dimension mismatch, spatial underflow, bad extents
    Io,       // file open/read/write failures
    Format,   // malformed file contents (manifest, image, checkpoint)
    Config,   // invalid or unknown configuration
    Numeric,  // NaN/Inf where finite values are required
    Invalid,  // precondition violation not covered above
  };

  Error(Kind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  Kind kind() const { return kind_; }

private:
  Kind kind_;
};

inline Error shape_error(const std::string& msg) { return Error(Error::Kind::Shape, msg); }
inline Error io_error(const std::string& msg) { return Error(Error::Kind::Io, msg); }
inline Error format_error(const std::string& msg) { return Error(Error::Kind::Format, msg); }
inline Error config_error(const std::string& msg) { return Error(Error::Kind::Config, msg); }
inline Error numeric_error(const std::string& msg) { return Error(Error::Kind::Numeric, msg); }
inline Error invalid_error(const std::string& msg) { return Error(Error::Kind::Invalid, msg); }

}  // namespace irnet
