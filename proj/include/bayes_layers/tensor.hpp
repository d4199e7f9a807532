#pragma once

// Dense row-major tensor of doubles plus the reverse-mode differentiation tape.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bayes_layers/error.hpp"

namespace bayes_layers {

using Shape = std::vector<std::size_t>;

inline std::size_t num_elements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tape;

class Tensor {
 public:
  /// Scalar zero.
  Tensor() : data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(data))) {
    if (num_elements(shape_) != data_->size()) {
      fail(ErrorKind::kShape, "shape " + shape_string(shape_) + " holds " +
                                  std::to_string(num_elements(shape_)) + " elements but " +
                                  std::to_string(data_->size()) + " values were given");
    }
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor full(Shape shape, double v) {
    const auto n = num_elements(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }
  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_->size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      fail(ErrorKind::kShape, "axis " + std::to_string(axis) + " out of range for shape " +
                                  shape_string(shape_));
    }
    return shape_[axis];
  }

  std::span<const double> data() const noexcept { return {data_->data(), data_->size()}; }
  const std::vector<double>& values() const noexcept { return *data_; }

  /// Writable view; copies the buffer first if it is shared. Only valid on
  /// untracked tensors, since taped values are referenced by adjoint rules.
  std::span<double> mutable_data() {
    if (tape_ != nullptr) {
      fail(ErrorKind::kInvalidArgument, "cannot mutate a tensor recorded on a tape");
    }
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
    return {data_->data(), data_->size()};
  }

  double item() const {
    if (data_->size() != 1) {
      fail(ErrorKind::kShape, "item() requires a single element, shape is " + shape_string(shape_));
    }
    return (*data_)[0];
  }
  double operator[](std::size_t flat) const { return (*data_)[flat]; }
  double at(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) fail(ErrorKind::kShape, "index rank mismatch");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
      if (i >= shape_[axis]) fail(ErrorKind::kShape, "index out of range");
      flat = flat * shape_[axis++] + i;
    }
    return (*data_)[flat];
  }

  bool tracked() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  int node() const noexcept { return node_; }

  Tensor detach() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

/// Trainable (or frozen) named value owned by a layer. Copies share state.
class Parameter {
 public:
  struct State {
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  Parameter() = default;
  Parameter(std::string name, Tensor value, bool trainable = true)
      : state_(std::make_shared<State>(State{std::move(name), value.detach(), trainable})) {}

  const std::string& name() const { return state_->name; }
  const Tensor& value() const { return state_->value; }
  const Shape& shape() const { return state_->value.shape(); }
  bool trainable() const { return state_->trainable; }
  void set_trainable(bool on) { state_->trainable = on; }
  bool valid() const noexcept { return state_ != nullptr; }
  const State* id() const noexcept { return state_.get(); }

  void assign(const Tensor& value) {
    if (value.shape() != state_->value.shape()) {
      fail(ErrorKind::kShape, "assigning " + shape_string(value.shape()) + " to parameter '" +
                                  state_->name + "' of shape " +
                                  shape_string(state_->value.shape()));
    }
    state_->value = value.detach();
  }

  /// The value as seen by the current computation: a tape leaf when a tape is
  /// active and the parameter is trainable, otherwise a constant.
  Tensor read() const;

 private:
  std::shared_ptr<State> state_;
};

class Gradients;

/// Append-only record of tensor operations for one forward pass.
class Tape {
 public:
  /// Accumulates the contribution of `grad_out` into each parent adjoint;
  /// parent_adjoints[i] is null when parent i is untracked.
  using BackwardFn =
      std::function<void(std::span<const double> grad_out, std::span<double* const> parent_adjoints)>;

  struct Node {
    std::string_view kind;
    std::vector<int> parents;
    Shape shape;
    BackwardFn backward;
  };

  class Activation {
   public:
    explicit Activation(Tape* tape) : previous_(slot()) { slot() = tape; }
    ~Activation() { slot() = previous_; }
    Activation(const Activation&) = delete;
    Activation& operator=(const Activation&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes this tape the target of Parameter::read() on the calling thread
  /// until the returned guard is destroyed.
  [[nodiscard]] Activation activate() { return Activation(this); }
  static Tape* active() noexcept { return slot(); }

  /// Registers `value` as a differentiable leaf.
  Tensor watch(const Tensor& value) {
    Tensor t = value.detach();
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{"leaf", {}, t.shape(), nullptr});
    return t;
  }

  Tensor leaf_for(const Parameter& p) {
    auto it = parameter_nodes_.find(p.id());
    if (it != parameter_nodes_.end()) return leaves_[it->second];
    Tensor leaf = watch(p.value());
    parameter_nodes_.emplace(p.id(), leaves_.size());
    leaves_.push_back(leaf);
    return leaf;
  }

  /// Records `result` as the output of `kind` applied to `inputs`.
  static Tensor record(std::string_view kind, Tensor result, std::initializer_list<const Tensor*> inputs,
                       BackwardFn backward) {
    return record(kind, std::move(result), std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  static Tensor record(std::string_view kind, Tensor result, std::span<const Tensor* const> inputs,
                       BackwardFn backward) {
    Tape* tape = nullptr;
    for (const Tensor* in : inputs) {
      if (in->tape_ == nullptr) continue;
      if (tape != nullptr && tape != in->tape_) {
        fail(ErrorKind::kDetached, std::string(kind) + ": inputs live on different tapes");
      }
      tape = in->tape_;
    }
    if (tape == nullptr) return result;
    std::vector<int> parents;
    parents.reserve(inputs.size());
    for (const Tensor* in : inputs) parents.push_back(in->tape_ ? in->node_ : -1);
    result.tape_ = tape;
    result.node_ = static_cast<int>(tape->nodes_.size());
    tape->nodes_.push_back(Node{kind, std::move(parents), result.shape(), std::move(backward)});
    return result;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  Gradients backward(const Tensor& root) const;

 private:
  static Tape*& slot() {
    thread_local Tape* active = nullptr;
    return active;
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter::State*, std::size_t> parameter_nodes_;
  std::vector<Tensor> leaves_;
};

/// Adjoints of every node reached from a scalar root.
class Gradients {
 public:
  Gradients() = default;

  /// Gradient with respect to a tensor recorded on the same tape; zeros if the
  /// root does not depend on it.
  Tensor wrt(const Tensor& t) const {
    if (!t.tracked() || t.tape() != tape_) {
      fail(ErrorKind::kDetached, "gradient requested for a tensor that is not on this tape");
    }
    return from_node(t.node(), t.shape());
  }

  Tensor wrt(const Parameter& p) const {
    auto it = parameter_nodes_.find(p.id());
    if (it == parameter_nodes_.end()) return Tensor::zeros(p.shape());
    return from_node(it->second, p.shape());
  }

  bool has(const Parameter& p) const { return parameter_nodes_.count(p.id()) > 0; }

 private:
  friend class Tape;

  Tensor from_node(int node, const Shape& shape) const {
    const auto& adj = adjoints_.at(static_cast<std::size_t>(node));
    if (adj.empty()) return Tensor::zeros(shape);
    return Tensor(shape, adj);
  }

  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> adjoints_;
  std::unordered_map<const Parameter::State*, int> parameter_nodes_;
};

inline Gradients Tape::backward(const Tensor& root) const {
  if (root.tape() == nullptr) fail(ErrorKind::kDetached, "backward() root is not on a tape");
  if (root.tape() != this) fail(ErrorKind::kDetached, "backward() root belongs to another tape");
  if (root.size() != 1 || root.rank() != 0) {
    fail(ErrorKind::kShape, "backward() needs a scalar root, got shape " + shape_string(root.shape()));
  }
  Gradients g;
  g.tape_ = this;
  g.adjoints_.resize(nodes_.size());
  const auto root_id = static_cast<std::size_t>(root.node());
  g.adjoints_[root_id].assign(1, 1.0);
  std::vector<double*> parent_ptrs;
  for (std::size_t i = root_id + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (g.adjoints_[i].empty() || !n.backward) continue;
    parent_ptrs.assign(n.parents.size(), nullptr);
    for (std::size_t p = 0; p < n.parents.size(); ++p) {
      const int pid = n.parents[p];
      if (pid < 0) continue;
      auto& adj = g.adjoints_[static_cast<std::size_t>(pid)];
      if (adj.empty()) adj.assign(num_elements(nodes_[static_cast<std::size_t>(pid)].shape), 0.0);
      parent_ptrs[p] = adj.data();
    }
    n.backward(g.adjoints_[i], parent_ptrs);
  }
  for (const auto& [state, idx] : parameter_nodes_) {
    g.parameter_nodes_.emplace(state, leaves_[idx].node());
  }
  return g;
}

inline Tensor Parameter::read() const {
  Tape* tape = Tape::active();
  if (tape == nullptr || !state_->trainable) return state_->value;
  return tape->leaf_for(*this);
}

}  // namespace bayes_layers
