#include "mvh/param_store.hpp"

#include <cmath>

namespace mvh {

Array& ParamStore::add(const std::string& name, Array init) {
  if (entries_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
  Entry e;
  e.grad = Array(init.shape(), 0.0);
  e.m = Array(init.shape(), 0.0);
  e.v = Array(init.shape(), 0.0);
  e.value = std::move(init);
  return entries_.emplace(name, std::move(e)).first->second.value;
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, e] : entries_) e.grad.fill(0.0);
}

void ParamStore::adam_step(double learning_rate, const AdamConfig& cfg) {
  for (const auto& [name, e] : entries_)
    if (!e.grad.all_finite()) throw NonFiniteGradient(name);

  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [_, e] : entries_) {
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g;
      e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mh = e.m[i] / c1;
      const double vh = e.v[i] / c2;
      e.value[i] -= learning_rate * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
  zero_grad();
}

}  // namespace mvh
