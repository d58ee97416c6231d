#pragma once

#include <stdexcept>
#include <string>

namespace phydra {

// Base class for all library errors.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes incompatible with the requested operation.
struct shape_error : error {
  using error::error;
};

// Invalid configuration value (kernel/stride geometry, lambda <= 0, ...).
struct config_error : error {
  using error::error;
};

// Violation of an operation's calling contract (wrong context set,
// non-scalar loss, out-of-order slice decode, ...).
struct contract_error : error {
  using error::error;
};

// File or stream I/O failure.
struct io_error : error {
  using error::error;
};

// Malformed or truncated bitstream / weight file.
struct corruption_error : error {
  using error::error;
};

}  // namespace phydra
