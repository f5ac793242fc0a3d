#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dba {

/// Base class for all errors thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text (BAL files, report JSON). Carries a 1-based line number
/// when the offending location is known, 0 otherwise.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, std::int64_t line)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg),
        line_(line) {}
  std::int64_t line() const { return line_; }

 private:
  std::int64_t line_;
};

class InvalidArgumentError : public Error {
 public:
  using Error::Error;
};

/// A point projected with zero depth (P_z == 0). Carries the global edge id
/// when evaluation happened in a batch context, -1 for standalone calls.
class DegenerateDepthError : public Error {
 public:
  explicit DegenerateDepthError(std::int64_t edge_id = -1)
      : Error(edge_id >= 0
                  ? "degenerate depth (P_z = 0) at edge " + std::to_string(edge_id)
                  : "degenerate depth (P_z = 0)"),
        edge_id_(edge_id) {}
  std::int64_t edge_id() const { return edge_id_; }

 private:
  std::int64_t edge_id_;
};

/// Operand shapes do not match (jet batch lengths, vector dimensions).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A diagonal block failed its symmetric factorization; signals insufficient
/// LM damping. The solver reacts by raising lambda.
class SingularBlockError : public Error {
 public:
  SingularBlockError(std::int64_t block_index, int block_size)
      : Error("block " + std::to_string(block_index) + " (" +
              std::to_string(block_size) + "x" + std::to_string(block_size) +
              ") is not positive definite"),
        block_index_(block_index),
        block_size_(block_size) {}
  std::int64_t block_index() const { return block_index_; }
  int block_size() const { return block_size_; }

 private:
  std::int64_t block_index_;
  int block_size_;
};

/// Collective-call misuse or failure: mismatched buffer lengths or call
/// sequences across ranks, timeouts, or a group abort after another rank
/// failed.
class CollectiveError : public Error {
 public:
  using Error::Error;
};

/// PCG detected loss of positive definiteness (p'q <= 0 or non-finite rho).
class PcgBreakdownError : public Error {
 public:
  using Error::Error;
};

}  // namespace dba
