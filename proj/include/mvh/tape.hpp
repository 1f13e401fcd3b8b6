#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mvh/array.hpp"

namespace mvh {

class Tape;
class ParamStore;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
};

/// Stop-gradient values recorded on the first forward pass and replayed on later
/// passes, so that repeated evaluations (finite differences, determinism checks)
/// see the same detached inputs as the pass whose gradient is being checked.
class DetachCache {
 public:
  void rewind() { cursor_ = 0; index_cursor_ = 0; }
  void clear() { arrays_.clear(); indices_.clear(); rewind(); }
  Array take(const Array& computed);
  std::vector<std::size_t> take_indices(const std::function<std::vector<std::size_t>()>& compute);
  std::size_t recorded() const { return arrays_.size() + indices_.size(); }

 private:
  std::vector<Array> arrays_;
  std::vector<std::vector<std::size_t>> indices_;
  std::size_t cursor_ = 0;
  std::size_t index_cursor_ = 0;
};

/// Reverse-mode tape. Nodes are appended in forward order; backward replays them
/// in exact reverse order, accumulating gradients additively.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives gradient.
  Var constant(Array value);
  /// Leaf bound to a named parameter; its gradient is added to the store on backward.
  /// Repeated requests for the same name on one tape return the same node.
  Var param(ParamStore& store, const std::string& name);
  /// Copy of `v` cut from the gradient path (replayed from the attached DetachCache, if any).
  Var detach(Var v);
  /// Discrete choices (e.g. neighbour indices) routed through the DetachCache.
  std::vector<std::size_t> cached_indices(const std::function<std::vector<std::size_t>()>& compute);

  /// Append an op result. `inputs` decide whether the node requires grad.
  Var record(Array value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Array value, const std::vector<Var>& inputs, Backward backward);

  void backward(Var seed);
  void reset();

  const Array& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, allocated (zero) on first access.
  Array& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  std::size_t size() const { return nodes_.size(); }

  void set_detach_cache(DetachCache* cache) { cache_ = cache; }
  /// Node ids visited by the most recent backward pass, in visit order.
  const std::vector<std::size_t>& backward_order() const { return visit_order_; }

 private:
  struct Node {
    Array value;
    Array grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_nodes_;
  std::vector<std::size_t> visit_order_;
  DetachCache* cache_ = nullptr;
  bool backward_done_ = false;
};

}  // namespace mvh
