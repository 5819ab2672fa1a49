#pragma once

#include <stdexcept>
#include <string>

namespace hvgg {

// Exit-code categories used by the command-line driver: usage errors map to 1,
// data errors to 2 and numeric failures to 3.

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hvgg
