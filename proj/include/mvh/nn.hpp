#pragma once

#include <random>
#include <string>

#include "mvh/ops.hpp"
#include "mvh/param_store.hpp"

namespace mvh {

using Rng = std::mt19937_64;

/// Tape plus parameter store for one forward pass.
struct Ctx {
  Tape* tape = nullptr;
  ParamStore* store = nullptr;

  Var p(const std::string& name) const { return tape->param(*store, name); }
  Var c(Array a) const { return tape->constant(std::move(a)); }
};

enum class Init { Xavier, Zero };

/// Dense layer y = x W + b with W stored as [in, out].
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, std::string name, std::size_t in, std::size_t out, Rng& rng, Init init = Init::Xavier);

  Var operator()(const Ctx& ctx, Var x) const;
  const std::string& name() const { return name_; }
  std::string weight() const { return name_ + ".w"; }
  std::string bias() const { return name_ + ".b"; }
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }

 private:
  std::string name_;
  std::size_t in_ = 0, out_ = 0;
};

enum class Act { Relu, Tanh };

/// Two dense layers with a hidden nonlinearity.
class Mlp2 {
 public:
  Mlp2() = default;
  Mlp2(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
       Act act = Act::Relu, Init last = Init::Xavier);

  Var operator()(const Ctx& ctx, Var x) const;
  const Linear& first() const { return l1_; }
  const Linear& last() const { return l2_; }

 private:
  Linear l1_, l2_;
  Act act_ = Act::Relu;
};

Array xavier_uniform(std::size_t in, std::size_t out, Rng& rng);

}  // namespace mvh
