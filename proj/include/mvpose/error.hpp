#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mvpose {

enum class ErrorCode {
  kInvalidInput,
  kIo,
  kDegenerate,
  kRegistrationFailure,
  kUnobservable,
  kDisconnectedGraph,
  kConvergence,
};

/// Base class of every error thrown by the library. The code maps onto the
/// CLI exit status (input/io errors -> 2, numerical failures -> 3).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorCode::kInvalidInput, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::kIo, what) {}
};

class DegenerateConfiguration : public Error {
 public:
  explicit DegenerateConfiguration(const std::string& what) : Error(ErrorCode::kDegenerate, what) {}
};

class RegistrationFailure : public Error {
 public:
  explicit RegistrationFailure(const std::string& what)
      : Error(ErrorCode::kRegistrationFailure, what) {}
};

/// Scale (or another quantity) not observable from the given data.
class UnobservableError : public Error {
 public:
  UnobservableError(const std::string& what, double condition_number)
      : Error(ErrorCode::kUnobservable, what), condition_number_(condition_number) {}
  double condition_number() const noexcept { return condition_number_; }

 private:
  double condition_number_;
};

class DisconnectedGraph : public Error {
 public:
  DisconnectedGraph(const std::string& what, std::vector<std::string> orphans)
      : Error(ErrorCode::kDisconnectedGraph, what), orphans_(std::move(orphans)) {}
  const std::vector<std::string>& orphans() const noexcept { return orphans_; }

 private:
  std::vector<std::string> orphans_;
};

/// A solve produced no usable result (e.g. no object could be fused).
class ConvergenceError : public Error {
 public:
  explicit ConvergenceError(const std::string& what) : Error(ErrorCode::kConvergence, what) {}
};

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidInput:
    case ErrorCode::kIo:
      return 2;
    default:
      return 3;
  }
}

}  // namespace mvpose
