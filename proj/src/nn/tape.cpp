#include "fruitreid/nn/tape.hpp"

namespace fruitreid::nn {

Parameter& ParamStore::uniform(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                               double bound) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    if (it->second.value.rows() != rows || it->second.value.cols() != cols) {
      throw ShapeError("parameter '" + name + "' exists with a different shape");
    }
    return it->second;
  }
  Parameter p;
  p.value.resize(rows, cols);
  Rng rng = make_rng(seed_, "init/" + name);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) p.value(r, c) = dist(rng);
  p.zero_grad();
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParamStore::constant(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                                double value) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    if (it->second.value.rows() != rows || it->second.value.cols() != cols) {
      throw ShapeError("parameter '" + name + "' exists with a different shape");
    }
    return it->second;
  }
  Parameter p;
  p.value = Matrix::Constant(rows, cols, value);
  p.zero_grad();
  return params_.emplace(name, std::move(p)).first->second;
}

Matrix& ParamStore::buffer(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                           double value) {
  auto it = buffers_.find(name);
  if (it != buffers_.end()) {
    if (it->second.rows() != rows || it->second.cols() != cols) {
      throw ShapeError("buffer '" + name + "' exists with a different shape");
    }
    return it->second;
  }
  return buffers_.emplace(name, Matrix::Constant(rows, cols, value)).first->second;
}

bool ParamStore::contains(const std::string& name) const {
  return params_.count(name) > 0 || buffers_.count(name) > 0;
}

Parameter& ParamStore::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ShapeError("missing parameter '" + name + "'");
  return it->second;
}

const Parameter& ParamStore::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ShapeError("missing parameter '" + name + "'");
  return it->second;
}

Matrix& ParamStore::buffer(const std::string& name) {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw ShapeError("missing buffer '" + name + "'");
  return it->second;
}

const Matrix& ParamStore::buffer(const std::string& name) const {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw ShapeError("missing buffer '" + name + "'");
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParamStore::merge_from(const ParamStore& other, const std::string& prefix) {
  for (const auto& [name, p] : other.params_) {
    if (name.rfind(prefix, 0) == 0) params_[name] = p;
  }
  for (const auto& [name, b] : other.buffers_) {
    if (name.rfind(prefix, 0) == 0) buffers_[name] = b;
  }
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) n.requires_grad = n.requires_grad || requires_grad(v);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, const std::vector<Var>& inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) n.requires_grad = n.requires_grad || requires_grad(v);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Matrix Tape::grad(Var v) const {
  const auto& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
  auto& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  auto& root = nodes_[static_cast<std::size_t>(loss.id)];
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw ShapeError("backward() needs a scalar (1x1) node");
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
  }
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(1, 1);
  root.has_grad = true;
  for (int id = loss.id; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param) n.param->grad += n.grad;
  }
}

}  // namespace fruitreid::nn
