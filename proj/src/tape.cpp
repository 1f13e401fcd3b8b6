#include "mvh/tape.hpp"

#include <stdexcept>

#include "mvh/param_store.hpp"

namespace mvh {

const Array& Var::value() const { return tape->value(id); }

Array DetachCache::take(const Array& computed) {
  if (cursor_ < arrays_.size()) return arrays_[cursor_++];
  arrays_.push_back(computed);
  ++cursor_;
  return computed;
}

std::vector<std::size_t> DetachCache::take_indices(const std::function<std::vector<std::size_t>()>& compute) {
  if (index_cursor_ < indices_.size()) return indices_[index_cursor_++];
  indices_.push_back(compute());
  ++index_cursor_;
  return indices_.back();
}

Var Tape::constant(Array value) {
  nodes_.push_back(Node{std::move(value), Array{}, false, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(ParamStore& store, const std::string& name) {
  if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return Var{this, it->second};
  auto& entry = store.entry(name);
  Array* target = &entry.grad;
  nodes_.push_back(Node{entry.value, Array{}, true, [target](Tape& t, std::size_t self) {
                          const Array& g = t.grad(self);
                          for (std::size_t i = 0; i < g.size(); ++i) (*target)[i] += g[i];
                        }});
  param_nodes_[name] = nodes_.size() - 1;
  return Var{this, nodes_.size() - 1};
}

Var Tape::detach(Var v) {
  if (cache_) return constant(cache_->take(v.value()));
  return constant(v.value());
}

std::vector<std::size_t> Tape::cached_indices(const std::function<std::vector<std::size_t>()>& compute) {
  if (cache_) return cache_->take_indices(compute);
  return compute();
}

Var Tape::record(Array value, std::initializer_list<Var> inputs, Backward backward) {
  bool rg = false;
  for (const auto& in : inputs) rg = rg || nodes_[in.id].requires_grad;
  nodes_.push_back(Node{std::move(value), Array{}, rg, rg ? std::move(backward) : nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Array value, const std::vector<Var>& inputs, Backward backward) {
  bool rg = false;
  for (const auto& in : inputs) rg = rg || nodes_[in.id].requires_grad;
  nodes_.push_back(Node{std::move(value), Array{}, rg, rg ? std::move(backward) : nullptr});
  return Var{this, nodes_.size() - 1};
}

Array& Tape::grad(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad = Array(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var seed) {
  if (seed.tape != this) throw ContractError("backward seed belongs to a different tape");
  if (backward_done_) throw std::logic_error("backward called twice without reset()");
  if (nodes_[seed.id].value.size() != 1)
    throw ContractError("backward seed must be a scalar, got " + shape_str(nodes_[seed.id].value.shape()));
  backward_done_ = true;
  visit_order_.clear();
  if (!nodes_[seed.id].requires_grad) return;
  grad(seed.id)[0] = 1.0;
  for (std::size_t i = seed.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    visit_order_.push_back(i);
    n.backward(*this, i);
  }
}

void Tape::reset() {
  nodes_.clear();
  param_nodes_.clear();
  visit_order_.clear();
  backward_done_ = false;
}

}  // namespace mvh
