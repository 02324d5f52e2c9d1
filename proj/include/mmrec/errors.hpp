#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mmrec {

// Base class for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  explicit VocabularyError(long long id, std::size_t vocab_size)
      : Error("token id " + std::to_string(id) + " outside vocabulary of size " +
              std::to_string(vocab_size)),
        id_(id) {}
  long long id() const { return id_; }

 private:
  long long id_;
};

class EmptyAttentionError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class AutodiffError : public Error {
 public:
  using Error::Error;
};

// Binary/text file decoding problems. `offset` is the byte offset (binary
// files) or the 1-based line number (text files) where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}
  // Text formats: the offset is a 1-based line number.
  static FormatError at_line(const std::string& what, std::size_t line) { return FormatError(what, line, 0); }
  std::size_t offset() const { return offset_; }

 private:
  FormatError(const std::string& what, std::size_t line, int)
      : Error(what + " (line " + std::to_string(line) + ")"), offset_(line) {}
  std::size_t offset_;
};

// Invalid configuration, inconsistent input data or violated preconditions.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmrec
