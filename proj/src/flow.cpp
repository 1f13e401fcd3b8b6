#include "mvh/flow.hpp"

#include <cmath>
#include <numbers>

namespace mvh {

ConditionalFlow::ConditionalFlow(ParamStore& store, const std::string& name, const FlowConfig& cfg, Rng& rng)
    : name_(name), cfg_(cfg) {
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    scale_.emplace_back(store, scale_net(l), cfg.dim + cfg.cond_dim, cfg.hidden, cfg.dim, rng, Act::Tanh, Init::Zero);
    shift_.emplace_back(store, shift_net(l), cfg.dim + cfg.cond_dim, cfg.hidden, cfg.dim, rng, Act::Tanh, Init::Zero);
    Array a(Shape{cfg.dim}), f(Shape{cfg.dim});
    const auto mask = active_mask(l);
    for (std::size_t d = 0; d < cfg.dim; ++d) {
      a[d] = mask[d] ? 1.0 : 0.0;
      f[d] = 1.0 - a[d];
    }
    active_.push_back(std::move(a));
    fixed_.push_back(std::move(f));
  }
}

std::vector<bool> ConditionalFlow::active_mask(std::size_t layer) const {
  std::vector<bool> m(cfg_.dim);
  for (std::size_t d = 0; d < cfg_.dim; ++d) m[d] = (d / 2 + d % 2 + layer) % 2 == 1;
  return m;
}

ConditionalFlow::Coupling ConditionalFlow::coupling(const Ctx& ctx, std::size_t layer, Var x, Var cond) const {
  Var in = concat({mul(x, ctx.c(fixed_[layer])), cond}, -1);
  Var raw = scale_[layer](ctx, in);
  Var s = scale(tanh(scale(raw, 1.0 / cfg_.s_max)), cfg_.s_max);
  Var active = ctx.c(active_[layer]);
  return {mul(s, active), mul(shift_[layer](ctx, in), active)};
}

FlowResult ConditionalFlow::forward(const Ctx& ctx, Var z, Var cond) const {
  if (z.shape().size() != 2 || z.shape()[1] != cfg_.dim)
    throw ContractError("flow expects [N, " + std::to_string(cfg_.dim) + "], got " + shape_str(z.shape()));
  Var x = z;
  Var log_det = ctx.c(Array(Shape{z.shape()[0]}, 0.0));
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    Coupling c = coupling(ctx, l, x, cond);
    x = add(mul(x, exp(c.log_scale)), c.shift);
    log_det = add(log_det, sum_axis(c.log_scale, 1));
  }
  return {x, log_det};
}

FlowResult ConditionalFlow::inverse(const Ctx& ctx, Var x, Var cond) const {
  if (x.shape().size() != 2 || x.shape()[1] != cfg_.dim)
    throw ContractError("flow expects [N, " + std::to_string(cfg_.dim) + "], got " + shape_str(x.shape()));
  Var z = x;
  Var log_det = ctx.c(Array(Shape{x.shape()[0]}, 0.0));
  for (std::size_t l = cfg_.layers; l-- > 0;) {
    Coupling c = coupling(ctx, l, z, cond);
    z = mul(sub(z, c.shift), exp(neg(c.log_scale)));
    log_det = sub(log_det, sum_axis(c.log_scale, 1));
  }
  return {z, log_det};
}

Var ConditionalFlow::nll(const Ctx& ctx, Var x, Var cond) const {
  FlowResult inv = inverse(ctx, x, cond);
  const double norm = 0.5 * static_cast<double>(cfg_.dim) * std::log(2.0 * std::numbers::pi);
  return sub(add_scalar(scale(sum_axis(square(inv.out), 1), 0.5), norm), inv.log_det);
}

Hypotheses sample_hypotheses(const Ctx& ctx, const ConditionalFlow& flow, Var cond, std::size_t m, Rng& rng) {
  if (m < 1) throw ContractError("sample_hypotheses needs at least one random draw");
  const std::size_t n = cond.shape()[0], dim = flow.config().dim;
  Hypotheses h;
  h.key = flow.forward(ctx, ctx.c(Array(Shape{n, dim}, 0.0)), cond).out;

  std::normal_distribution<double> normal(0.0, 1.0);
  Array z(Shape{n * m, dim});
  for (auto& v : z.values()) v = normal(rng);
  std::vector<std::size_t> rows(n * m);
  for (std::size_t i = 0; i < n * m; ++i) rows[i] = i / m;
  Var tiled = gather_rows(cond, rows);
  h.random = reshape(flow.forward(ctx, ctx.c(std::move(z)), tiled).out, {n, m, dim});
  return h;
}

}  // namespace mvh
