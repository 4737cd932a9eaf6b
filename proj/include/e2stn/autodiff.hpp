#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records every operation as a node holding its value and a closure
// that pushes the node's gradient back into its inputs. Parameters are bound
// to the tape once (cached by address); after backward() their gradients are
// added into Param::grad. A tape built with record=false keeps only values,
// which is what finite-difference probes and inference use.

#include "e2stn/core.hpp"

#include <algorithm>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace e2stn {

template <typename T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  bool frozen = false;

  Param() = default;
  Param(std::string n, Mat<T> v) : name(std::move(n)), value(std::move(v)) {
    grad.setZero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Mat<T>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Mat<T> v) { return push(std::move(v), false, nullptr); }

  Var<T> param(Param<T>& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return {this, it->second};
    Var<T> v = push(p.value, record_ && !p.frozen, nullptr);
    param_ids_.emplace(&p, v.id);
    bound_.emplace_back(&p, v.id);
    return v;
  }

  Var<T> push(Mat<T> value, bool requires_grad, std::function<void()> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = record_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  // Gradient of node `id`; zero-sized until something flows into it.
  const Mat<T>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Seeds d(root)/d(root) = 1 and propagates. root must be 1x1.
  void backward(Var<T> root) {
    if (!record_) throw std::logic_error("backward() on a non-recording tape");
    require_shape(value(root.id), 1, 1, "backward root");
    accumulate(root.id, Mat<T>::Ones(1, 1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward();
    }
    for (auto& [p, id] : bound_) {
      const Mat<T>& g = grad(id);
      if (g.size() == 0 || p->frozen) continue;
      if (p->grad.size() == 0) p->grad.setZero(p->value.rows(), p->value.cols());
      p->grad += g;
    }
  }

  std::size_t size() const { return nodes_.size(); }
  int next_id() const { return static_cast<int>(nodes_.size()); }

  // Observer for every attention-weight matrix produced on this tape.
  std::function<void(const Mat<T>&)> attention_probe;
  // Incremented whenever a probability had to be clamped before log().
  int clamp_count = 0;

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };
  bool record_;
  std::deque<Node> nodes_;
  std::vector<std::pair<Param<T>*, int>> bound_;
  std::unordered_map<const Param<T>*, int> param_ids_;
};


}  // namespace e2stn
