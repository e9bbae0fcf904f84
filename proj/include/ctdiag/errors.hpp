#pragma once

#include <stdexcept>

namespace ctdiag {

// Weight, registry or model-structure failure (CLI exit code 2).
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dataset scanning or slice decoding failure (CLI exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ctdiag
