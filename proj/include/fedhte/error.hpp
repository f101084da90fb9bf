#pragma once

#include <stdexcept>
#include <string>

namespace fedhte {

// Base of every exception thrown by the library. The CLI maps each subclass
// onto an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user input: malformed config, bad CSV cell, unknown column.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Data violates a model assumption (positivity, rank, outcome range).
class DataError : public Error {
 public:
  using Error::Error;
};

// Solver could not produce an answer (singular Jacobian, no convergence in
// strict mode).
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Wire-level failure: schema mismatch, framing, version, config hash.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Transport-level failure attributable to one site (I/O, timeout).
class TransportError : public ProtocolError {
 public:
  TransportError(std::string site_id, const std::string& what)
      : ProtocolError("site '" + site_id + "': " + what), site_id_(std::move(site_id)) {}

  const std::string& site_id() const noexcept { return site_id_; }

 private:
  std::string site_id_;
};

}  // namespace fedhte
