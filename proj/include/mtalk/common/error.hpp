#pragma once

#include <stdexcept>
#include <string>

namespace mtalk {

// Precondition or argument violation at an API boundary.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Shapes that do not agree at a primitive or model boundary.
class ShapeError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

// Malformed file or wire content.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Conflict : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContextOverflow : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

template <typename E = InvalidArgument>
inline void require(bool cond, const std::string& message) {
  if (!cond) throw E(message);
}

}  // namespace mtalk
