#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mgnt {

/// Dense row-major matrix templated on scalar. Every latent array in the
/// network is rank 2; vectors are stored as a single row or column.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Tensor = MatrixX<double>;
using Index = Eigen::Index;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Tensor& t);

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

/// Primitive-op cost ledger keyed by the active scope label. Each primitive
/// adds its scalar multiply/add/transcendental count.
class OpCounter {
 public:
  void add(const std::string& label, std::uint64_t ops) { counts_[label] += ops; }
  std::uint64_t count(const std::string& label) const {
    auto it = counts_.find(label);
    return it == counts_.end() ? 0 : it->second;
  }
  const std::map<std::string, std::uint64_t>& all() const { return counts_; }
  void clear() { counts_.clear(); }

 private:
  std::map<std::string, std::uint64_t> counts_;
};

/// Reverse-mode computation tape. Nodes are appended in evaluation order, so
/// every node's inputs precede it; backward() walks the list once in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  /// Records an op with an explicit backward rule. The rule reads
  /// grad_of(self) and calls accumulate() on its inputs.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward,
             std::uint64_t op_count = 0);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_of(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  void accumulate(std::size_t id, const Tensor& g);
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    accumulate(id, Tensor(g));
  }

  /// Seeds d(output)/d(output) = 1 for a 1x1 output and propagates.
  void backward(Var output);

  std::size_t size() const { return nodes_.size(); }

  OpCounter& counter() { return counter_; }
  const OpCounter& counter() const { return counter_; }
  void push_scope(std::string label) { scopes_.push_back(std::move(label)); }
  void pop_scope() { scopes_.pop_back(); }
  const std::string& scope() const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  OpCounter counter_;
  std::vector<std::string> scopes_;
};

/// RAII label for op counting.
class OpScope {
 public:
  OpScope(Tape& tape, std::string label) : tape_(tape) { tape_.push_scope(std::move(label)); }
  ~OpScope() { tape_.pop_scope(); }
  OpScope(const OpScope&) = delete;
  OpScope& operator=(const OpScope&) = delete;

 private:
  Tape& tape_;
};

enum class Axis { Rows = 0, Cols = 1 };

// Primitive operations. Shapes are checked eagerly and reported with both
// operands' shapes.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_bias(Var x, Var bias);  // bias is 1 x cols, broadcast over rows
Var add_constant(Var x, const Tensor& c);
Var square(Var a);
Var leaky_relu(Var x, double slope);
Var clamp_min(Var x, double lo);
Var layer_norm(Var x, Var gain, Var bias, double eps);
/// Axis::Cols normalizes each row (reduction over columns); Axis::Rows
/// normalizes each column.
Var softmax(Var x, Axis axis);
Var segment_sum(Var values, std::span<const Index> segment_ids, Index n_segments);
Var gather_rows(Var x, std::span<const Index> rows);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var x, Index begin, Index count);
Var row_sum(Var x);  // n x 1
Var col_sum(Var x);  // 1 x d
Var sum_all(Var x);  // 1 x 1
Var div_rows(Var x, Var s);  // x_ij / s_i, s is n x 1
Var mul_rows(Var x, Var s);  // x_ij * s_i, s is n x 1

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

/// Dense affine map x W + b with W stored [in x out].
inline Var linear(Var x, Var weight, Var bias) { return add_bias(matmul(x, weight), bias); }

}  // namespace mgnt
