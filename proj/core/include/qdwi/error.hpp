#pragma once

#include <stdexcept>
#include <string>

namespace qdwi {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input (files, tables, shapes, configs).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A forward or backward pass produced NaN/Inf. Carries the node name.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string node, const std::string& what)
      : Error(what), node_(std::move(node)) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

}  // namespace qdwi
