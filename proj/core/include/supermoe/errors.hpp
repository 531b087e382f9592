#pragma once

#include <stdexcept>
#include <string>

namespace supermoe {

// Base class for everything thrown by the library. The CLI maps ConfigError
// (and its subclasses) to exit code 2, every other Error to exit code 1.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shapes do not conform to an operation's contract.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

// A token id falls outside its channel's vocabulary.
class VocabError : public Error {
 public:
  VocabError(const std::string& channel, long long id, long long vocab)
      : Error("vocabulary error: channel '" + channel + "': id " + std::to_string(id) +
              " outside [0, " + std::to_string(vocab) + ")") {}
};

// Invalid run configuration or unknown preset/key.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

// An API precondition was violated by the caller.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract error: " + what) {}
};

// NaN/Inf where finite values are required, or training divergence.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

// Malformed input file.
class ParseError : public Error {
 public:
  ParseError(const std::string& path, long long line, const std::string& what)
      : Error("parse error: " + path + ":" + std::to_string(line) + ": " + what) {}
};

// Unreadable, corrupt or incompatible checkpoint.
class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error("checkpoint error: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io error: " + what) {}
};

}  // namespace supermoe
