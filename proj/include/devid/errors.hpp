#pragma once

#include <stdexcept>
#include <string>

namespace devid {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed container or field while parsing a file.
struct FormatError : Error {
  using Error::Error;
};

// File parses but uses an encoding we do not handle (e.g. compressed WAV).
struct UnsupportedCodecError : Error {
  using Error::Error;
};

struct EmptyAudioError : Error {
  using Error::Error;
};

// Signal too short for the requested framing.
struct TooShortError : Error {
  using Error::Error;
};

// Tensor shapes incompatible with the requested op.
struct ShapeError : Error {
  using Error::Error;
};

// Math domain violation (e.g. log of a nonpositive value).
struct DomainError : Error {
  using Error::Error;
};

// Invalid configuration value or combination.
struct ConfigError : Error {
  using Error::Error;
};

// Persisted data inconsistent with its manifest.
struct CorruptionError : Error {
  using Error::Error;
};

// Random generation could not satisfy a required invariant.
struct GenerationError : Error {
  using Error::Error;
};

} // namespace devid
