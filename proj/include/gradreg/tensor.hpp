#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradreg {

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

// Dense extents, outermost first. Volumetric layout is [C, D, H, W], W fastest.
using Shape = std::vector<int>;

inline long numel(const Shape& s) {
  long n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
class Tape;

// Immutable dense array of order <= 5 with an optional handle onto a tape.
// Copies share the underlying buffer.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<ArrayX<Scalar>>(ArrayX<Scalar>::Zero(numel(shape_)))) {
    check_shape();
  }

  Tensor(Shape shape, ArrayX<Scalar> values)
      : shape_(std::move(shape)), data_(std::make_shared<ArrayX<Scalar>>(std::move(values))) {
    check_shape();
    if (data_->size() != numel(shape_))
      throw std::invalid_argument("tensor: " + std::to_string(data_->size()) +
                                  " values for shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    t.array() = v;
    return t;
  }

  static Tensor scalar(Scalar v) { return full({1}, v); }

  const Shape& shape() const { return shape_; }
  int order() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(i); }
  long size() const { return data_ ? data_->size() : 0; }

  const ArrayX<Scalar>& array() const { return *data_; }
  // Mutation is reserved for builders and the optimizer; tracked intermediate
  // values are never written through this.
  ArrayX<Scalar>& array() { return *data_; }
  const Scalar* data() const { return data_->data(); }
  Scalar* data() { return data_->data(); }

  Scalar operator[](long i) const { return (*data_)(i); }

  Scalar value() const {
    if (size() != 1) throw std::invalid_argument("tensor: value() on shape " + shape_str(shape_));
    return (*data_)(0);
  }

  bool requires_grad() const { return tape_ != nullptr && node_ >= 0; }
  Tape<Scalar>* tape() const { return tape_; }
  int node() const { return node_; }

  // Drops the tape handle; the values are kept.
  Tensor detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  bool all_finite() const { return data_ && data_->isFinite().all(); }

 private:
  friend class Tape<Scalar>;

  void check_shape() const {
    if (shape_.size() > 5)
      throw std::invalid_argument("tensor: order " + std::to_string(shape_.size()) + " > 5");
    for (int e : shape_)
      if (e <= 0) throw std::invalid_argument("tensor: bad extent in " + shape_str(shape_));
  }

  Shape shape_;
  std::shared_ptr<ArrayX<Scalar>> data_;
  Tape<Scalar>* tape_ = nullptr;
  int node_ = -1;
};

// Reverse-mode tape. Ops append nodes in execution order; backward() replays
// the recorded closures in exact reverse order. One tape per logical stream.
template <typename Scalar>
class Tape {
 public:
  using Grad = ArrayX<Scalar>;
  // A closure receives the tape (to accumulate into parent buffers) and the
  // gradient flowing into its output node.
  using BackwardFn = std::function<void(Tape&, const Grad&)>;

  // Registers t as a differentiable leaf.
  void watch(Tensor<Scalar>& t) {
    t.tape_ = this;
    t.node_ = add_node("leaf", {}, nullptr, t.size());
  }

  // Called by ops: wraps freshly computed values in a tracked tensor.
  Tensor<Scalar> emit(Shape shape, ArrayX<Scalar> values, const char* op,
                      std::vector<int> inputs, BackwardFn backward) {
    Tensor<Scalar> t(std::move(shape), std::move(values));
    t.tape_ = this;
    t.node_ = add_node(op, std::move(inputs), std::move(backward), t.size());
    return t;
  }

  // Gradient buffer for a node, zero-initialised on first touch.
  Grad& grad_buffer(int node) {
    Grad& g = grads_[node];
    if (g.size() == 0) g = Grad::Zero(nodes_[node].size);
    return g;
  }

  template <typename Derived>
  void accumulate(int node, const Eigen::ArrayBase<Derived>& g) {
    grad_buffer(node) += g;
  }

  // Reverse sweep from a scalar root. Re-running on the same tape yields
  // identical gradients: buffers are cleared before each sweep.
  void backward(const Tensor<Scalar>& root) {
    if (root.tape_ != this || root.node_ < 0)
      throw std::invalid_argument("backward: root is not on this tape");
    if (root.size() != 1) throw std::invalid_argument("backward: root must be scalar");
    for (Grad& g : grads_) g.resize(0);
    grad_buffer(root.node_)(0) = Scalar(1);
    for (int i = root.node_; i >= 0; --i) {
      if (!nodes_[i].backward) continue;   // leaf
      if (grads_[i].size() == 0) continue; // not reached from the root
      nodes_[i].backward(*this, grads_[i]);
    }
  }

  bool has_grad(const Tensor<Scalar>& t) const {
    return t.tape_ == this && t.node_ >= 0 && grads_[t.node_].size() != 0;
  }

  // Gradient of the last backward() w.r.t. t; zeros if t was not reached.
  Grad grad(const Tensor<Scalar>& t) const {
    if (t.tape_ != this || t.node_ < 0)
      throw std::invalid_argument("grad: tensor is not on this tape");
    if (grads_[t.node_].size() == 0) return Grad::Zero(t.size());
    return grads_[t.node_];
  }

  size_t num_nodes() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    grads_.clear();
  }

 private:
  struct Node {
    const char* op;
    std::vector<int> inputs;
    BackwardFn backward;
    long size;
  };

  int add_node(const char* op, std::vector<int> inputs, BackwardFn fn, long size) {
    nodes_.push_back(Node{op, std::move(inputs), std::move(fn), size});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<Grad> grads_;
};

// Resolves the tape shared by a set of operands (nullptr when untracked).
template <typename Scalar>
Tape<Scalar>* joint_tape(std::initializer_list<const Tensor<Scalar>*> ts) {
  Tape<Scalar>* tape = nullptr;
  for (const Tensor<Scalar>* t : ts) {
    if (!t->requires_grad()) continue;
    if (tape && tape != t->tape())
      throw std::invalid_argument("op: operands recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

template <typename Scalar>
void backward(const Tensor<Scalar>& root) {
  if (!root.requires_grad()) throw std::invalid_argument("backward: root is untracked");
  root.tape()->backward(root);
}

}  // namespace gradreg
