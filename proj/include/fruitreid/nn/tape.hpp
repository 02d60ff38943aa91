#pragma once

#include "fruitreid/common.hpp"

#include <Eigen/Dense>

#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace fruitreid::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Trainable tensor with its gradient accumulator and Adam moments.
struct Parameter {
  Matrix value;
  Matrix grad;
  Matrix adam_m;
  Matrix adam_v;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Named parameters and non-trainable buffers (BN running statistics).
/// Entries are kept in name order so iteration, initialization and
/// serialization are deterministic. References stay valid for the lifetime
/// of the store.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  /// Returns the existing parameter or creates one initialized uniformly in
  /// +-bound with a generator derived from (seed, name).
  Parameter& uniform(const std::string& name, Eigen::Index rows, Eigen::Index cols, double bound);
  Parameter& constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value);
  Matrix& buffer(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value);

  bool contains(const std::string& name) const;
  Parameter& param(const std::string& name);
  const Parameter& param(const std::string& name) const;
  Matrix& buffer(const std::string& name);
  const Matrix& buffer(const std::string& name) const;

  std::map<std::string, Parameter>& params() { return params_; }
  const std::map<std::string, Parameter>& params() const { return params_; }
  std::map<std::string, Matrix>& buffers() { return buffers_; }
  const std::map<std::string, Matrix>& buffers() const { return buffers_; }

  void zero_grad();
  std::size_t parameter_count() const;
  /// Copies every entry whose name starts with `prefix`.
  void merge_from(const ParamStore& other, const std::string& prefix = "");

 private:
  std::uint64_t seed_;
  std::map<std::string, Parameter> params_;
  std::map<std::string, Matrix> buffers_;
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

/// Reverse-mode recording of forward operations. Nodes are appended in
/// execution order, which is a topological order; backward() walks them in
/// reverse and calls each node's backward function exactly once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value without gradient tracking.
  Var constant(Matrix value);
  /// Leaf whose gradient is kept on the tape (see grad()).
  Var input(Matrix value);
  /// Leaf bound to a parameter; backward() accumulates into param.grad.
  Var param(Parameter& p);

  /// Records an op result. `inputs` decide whether the result needs a
  /// gradient; the backward function reads grad(self) and calls
  /// accumulate() on its inputs.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Matrix value, const std::vector<Var>& inputs, BackwardFn backward);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& value(Var v) const { return value(v.id); }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  /// Gradient of the last backward() target w.r.t. v (zeros if untouched).
  Matrix grad(Var v) const;
  const Matrix& grad_ref(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  /// Adds `g` into v's gradient if v needs one.
  void accumulate(Var v, const Matrix& g);
  template <typename Fn>
  void accumulate_with(Var v, Fn&& fill) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    ensure_grad(n);
    fill(n.grad);
  }

  /// Backpropagates from a 1x1 node.
  void backward(Var loss);

  /// Smallest |x| seen at a non-differentiable point (ReLU inputs, abs
  /// arguments). Finite-difference checks resample when it is below eps.
  void note_kink(double distance) {
    if (distance < min_kink_) min_kink_ = distance;
  }
  double min_kink_distance() const { return min_kink_; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };
  static void ensure_grad(Node& n) {
    if (!n.has_grad) {
      n.grad.setZero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
  }

  std::vector<Node> nodes_;
  double min_kink_ = std::numeric_limits<double>::infinity();
};

inline const Matrix& Var::value() const { return tape->value(id); }

}  // namespace fruitreid::nn
