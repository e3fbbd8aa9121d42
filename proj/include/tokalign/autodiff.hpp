#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// Every value on the tape is a 2-D matrix; vectors are 1xN rows and scalars
// are 1x1. A node participates in differentiation only if it is a parameter
// leaf or one of its inputs participates, so constants (frozen weights, data)
// never accumulate gradients.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <vector>

namespace tokalign::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of a scalar loss with respect to every parameter leaf.
using Gradients = std::map<std::size_t, Matrix>;

class Tape {
 public:
  /// Receives the gradient flowing into the node and pushes it to its inputs.
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var parameter(Matrix value);

  /// Appends an op node. The backward closure is kept only when at least one
  /// input requires a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn backward);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool is_leaf(std::size_t id) const { return nodes_[id].leaf; }

  /// Gradient buffer of a node during backward, zero-initialised on first use.
  Matrix& grad(std::size_t id);

  /// Runs reverse accumulation from a 1x1 loss. Returns one entry for every
  /// parameter leaf on the tape (zeros for leaves the loss does not reach).
  Gradients backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool leaf = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

// ---- linear algebra ------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);

// ---- elementwise ---------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double c);
/// Adds a 1xN row to every row of `a`.
Var add_row(Var a, Var row);
/// Adds `b` repeated vertically; a.rows() must be a multiple of b.rows().
Var add_tiled(Var a, Var b);
Var abs(Var a);
Var square(Var a);
Var pow(Var a, int exponent);
Var log(Var a);
/// x log x with 0 log 0 := 0.
Var xlogx(Var a);
/// max(a, floor), gradient passes only where a > floor.
Var clamp_min(Var a, double floor);
/// Tanh-approximation GELU.
Var gelu(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }

// ---- reductions ----------------------------------------------------------

Var sum(Var a);
Var mean(Var a);
/// Mean of each column over rows; 1xN result.
Var column_mean(Var a);
/// Order-1 returns the column mean; order k >= 2 the biased k-th central
/// moment per column. Uses the kernels from moments.hpp.
Var column_moment(Var a, int order);

// ---- row-structured ops --------------------------------------------------

Var softmax_rows(Var a);
Var l2_normalize_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps);
/// Mean cross entropy of row-wise logits against integer labels.
Var cross_entropy(Var logits, std::span<const int> labels);

Var slice_rows(Var a, Index start, Index count);
Var gather_rows(Var a, std::span<const Index> rows);
Var concat_rows(std::span<const Var> parts);

/// Builds `n_seq` stacked sequences [cls, prompt slots, patches...] where the
/// prompt slots are filled with `prompts` and patch rows come in blocks of
/// patches.rows() / n_seq.
Var assemble_sequences(Var cls, Var prompts, Var patches, Index n_seq);
/// Overwrites rows [offset, offset + prompts.rows()) of every sequence.
Var replace_rows(Var x, Var prompts, Index seq_len, Index offset);

/// Multi-head scaled dot-product self-attention over stacked sequences.
/// `qkv` holds [Q | K | V] column blocks, shape (n_seq * seq_len) x 3d.
Var attention(Var qkv, Index seq_len, Index n_heads, bool causal);

}  // namespace tokalign::ad
