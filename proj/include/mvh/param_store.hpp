#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mvh/array.hpp"

namespace mvh {

/// Raised when an optimizer step sees a non-finite gradient.
class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(std::string name)
      : std::runtime_error("non-finite gradient in parameter '" + name + "'"), param(std::move(name)) {}
  std::string param;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named parameters with gradient buffers and Adam moments.
class ParamStore {
 public:
  struct Entry {
    Array value;
    Array grad;
    Array m;
    Array v;
  };

  /// Registers a new parameter; names must be unique.
  Array& add(const std::string& name, Array init);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;
  Array& value(const std::string& name) { return entry(name).value; }
  const Array& value(const std::string& name) const { return entry(name).value; }
  Array& grad(const std::string& name) { return entry(name).grad; }

  std::vector<std::string> names() const;
  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::size_t parameter_count() const;

  void zero_grad();
  /// One Adam update with bias correction; gradients are zeroed afterwards.
  /// Throws NonFiniteGradient before touching any parameter if a gradient is NaN/inf.
  void adam_step(double learning_rate, const AdamConfig& cfg = {});

  std::uint64_t step_count() const { return step_; }
  void set_step_count(std::uint64_t s) { step_ = s; }

 private:
  std::map<std::string, Entry> entries_;
  std::uint64_t step_ = 0;
};

}  // namespace mvh
