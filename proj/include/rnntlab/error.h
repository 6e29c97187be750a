#pragma once

#include <stdexcept>

namespace rnntlab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A forward pass or loss produced NaN or infinity.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

}  // namespace rnntlab
