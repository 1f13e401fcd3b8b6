#pragma once

#include <vector>

#include "mvh/nn.hpp"

namespace mvh {

struct FlowConfig {
  std::size_t dim = 42;
  std::size_t cond_dim = 64;
  std::size_t layers = 6;
  std::size_t hidden = 64;
  double s_max = 3.0;
};

struct FlowResult {
  Var out;      ///< [N, dim]
  Var log_det;  ///< [N]
};

/// Conditional RealNVP. Coupling layer l keeps the dims with (joint + coord + l)
/// even fixed and applies x * exp(s) + t to the rest, where s (bounded by s_max
/// through tanh) and t come from 2-layer tanh MLPs of the fixed dims and the
/// condition. Output layers start at zero, so a fresh flow is the identity.
class ConditionalFlow {
 public:
  ConditionalFlow() = default;
  ConditionalFlow(ParamStore& store, const std::string& name, const FlowConfig& cfg, Rng& rng);

  /// z -> x with log|det dx/dz|.
  FlowResult forward(const Ctx& ctx, Var z, Var cond) const;
  /// x -> z with log|det dz/dx|.
  FlowResult inverse(const Ctx& ctx, Var x, Var cond) const;
  /// Per-sample -log p(x | cond) = 0.5 |z|^2 + dim/2 log(2 pi) - log_det_inv, shape [N].
  Var nll(const Ctx& ctx, Var x, Var cond) const;

  /// Active (transformed) dims of layer l.
  std::vector<bool> active_mask(std::size_t layer) const;
  const FlowConfig& config() const { return cfg_; }
  std::string scale_net(std::size_t layer) const { return name_ + ".c" + std::to_string(layer) + ".scale"; }
  std::string shift_net(std::size_t layer) const { return name_ + ".c" + std::to_string(layer) + ".shift"; }

 private:
  struct Coupling {
    Var log_scale;  // [N, dim], zero on fixed dims
    Var shift;
  };
  Coupling coupling(const Ctx& ctx, std::size_t layer, Var x, Var cond) const;

  std::string name_;
  FlowConfig cfg_;
  std::vector<Mlp2> scale_, shift_;
  std::vector<Array> active_, fixed_;  // 0/1 masks [dim]
};

/// Draws of the flow at `m` standard-normal latents per condition row, plus the
/// key hypothesis at z = 0. `rng` is consumed in row-major (row, draw, dim) order.
struct Hypotheses {
  Var key;     ///< [N, dim]
  Var random;  ///< [N, m, dim]
};
Hypotheses sample_hypotheses(const Ctx& ctx, const ConditionalFlow& flow, Var cond, std::size_t m, Rng& rng);

}  // namespace mvh
