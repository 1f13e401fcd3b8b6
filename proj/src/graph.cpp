#include "mvh/graph.hpp"

#include <cmath>
#include <numbers>

#include "mvh/hand.hpp"

namespace mvh {

Var sinusoidal_encoding(Var x, std::size_t freqs) {
  Tape& t = *x.tape;
  Array w(Shape{freqs});
  for (std::size_t f = 0; f < freqs; ++f) w[f] = std::ldexp(std::numbers::pi / 2.0, static_cast<int>(f));
  Var phase = mul(repeat_last(x, freqs), t.constant(std::move(w)));  // [..., C, F]
  Var enc = concat({sin(phase), cos(phase)}, -1);                     // [..., C, 2F]
  Shape out = x.shape();
  out.back() *= 2 * freqs;
  return reshape(enc, out);
}

Var normalize_adjacency(Var a_learn) { return softmax(a_learn); }

Var agcn_propagate(Var x, Var adjacency, Var weight) {
  const Shape s = x.shape();
  if (s.size() < 2) throw ContractError("agcn_propagate expects [..., J, D], got " + shape_str(s));
  const std::size_t j = s[s.size() - 2], d = s.back();
  Var flat = reshape(x, {x.size() / (j * d), j, d});
  Var mixed = matmul(adjacency, flat);  // [B, J, D]
  return add(x, reshape(matmul(mixed, weight), s));
}

AttentionOut scaled_dot_attention(Var q, Var k, Var v) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Var weights = softmax(scale(matmul(q, transpose(k)), inv));
  return {matmul(weights, v), weights};
}

Array hand_adjacency() {
  Array a(Shape{kHandJoints, kHandJoints}, 0.0);
  for (std::size_t j = 0; j < kHandJoints; ++j) {
    a.at(j, j) = 1.0;
    if (kHandParents[j] >= 0) {
      const auto p = static_cast<std::size_t>(kHandParents[j]);
      a.at(j, p) = a.at(p, j) = 1.0;
    }
  }
  return a;
}

GraphInteraction::GraphInteraction(ParamStore& store, const std::string& name, const GraphConfig& cfg, Rng& rng)
    : name_(name), cfg_(cfg) {
  const std::size_t token_dim = 4 * cfg.pe_freqs + cfg.id_dim + 1;
  input_ = Linear(store, name + ".in", token_dim, cfg.model_dim, rng);

  std::normal_distribution<double> noise(0.0, 0.01);
  Array adj = hand_adjacency();
  if (cfg.joints != kHandJoints) adj = Array(Shape{cfg.joints, cfg.joints}, 0.0);
  for (auto& v : adj.values()) v += noise(rng);
  store.add(adjacency_name(), std::move(adj));

  std::normal_distribution<double> emb(0.0, 1.0);
  Array ids(Shape{cfg.joints, cfg.id_dim});
  for (auto& v : ids.values()) v = emb(rng);
  store.add(embedding_name(), std::move(ids));

  const std::size_t aug = cfg.model_dim + 1;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = name + ".layer" + std::to_string(l);
    gcn_w_.push_back(p + ".gcn.w");
    Array w = xavier_uniform(cfg.model_dim, cfg.model_dim, rng);
    for (auto& v : w.values()) v *= 0.5;
    store.add(gcn_w_.back(), std::move(w));
    q_.emplace_back(store, p + ".q", aug, cfg.qk_dim, rng);
    k_.emplace_back(store, p + ".k", aug, cfg.qk_dim, rng);
    v_.emplace_back(store, p + ".v", aug, cfg.model_dim, rng);
  }
  fuse_ = Mlp2(store, name + ".fuse", cfg.model_dim, cfg.fused_dim, cfg.fused_dim, rng);
}

Var GraphInteraction::build_tokens(const Ctx& ctx, Var joints, const Array& conf) const {
  const Shape s = joints.shape();
  if (s.size() != 4 || s[3] != 2) throw ContractError("build_tokens expects joints [G, V, J, 2], got " + shape_str(s));
  if (s[2] != cfg_.joints)
    throw ContractError("build_tokens: " + std::to_string(s[2]) + " joints per view, expected " +
                        std::to_string(cfg_.joints));
  if (conf.shape() != Shape{s[0], s[1], s[2]})
    throw ContractError("build_tokens: confidence shape " + shape_str(conf.shape()) + " vs joints " + shape_str(s));
  const double half = cfg_.frame_size / 2.0;
  Var pos = scale(add_scalar(joints, -half), 1.0 / half);
  Var pe = sinusoidal_encoding(pos, cfg_.pe_freqs);
  Var ids = add(ctx.c(Array(Shape{s[0], s[1], s[2], cfg_.id_dim}, 0.0)), ctx.p(embedding_name()));
  Var c = ctx.c(conf.reshaped({s[0], s[1], s[2], 1}));
  return concat({pe, ids, c}, -1);
}

Var GraphInteraction::agcn_layer(const Ctx& ctx, std::size_t layer, Var x) const {
  return agcn_propagate(x, normalize_adjacency(ctx.p(adjacency_name())), ctx.p(gcn_w_.at(layer)));
}

AttentionOut GraphInteraction::casa_layer(const Ctx& ctx, std::size_t layer, Var x, const Array& conf) const {
  const Shape s = x.shape();  // [G, V, J, D]
  const std::size_t g = s[0], n = s[1] * s[2];
  Var flat = reshape(x, {g, n, s[3]});
  Var aug = concat({flat, ctx.c(conf.reshaped({g, n, 1}))}, -1);
  AttentionOut att = scaled_dot_attention(q_.at(layer)(ctx, aug), k_.at(layer)(ctx, aug), v_.at(layer)(ctx, aug));
  return {reshape(add(flat, att.out), s), att.weights};
}

Var GraphInteraction::fuse(const Ctx& ctx, Var x) const { return fuse_(ctx, mean_axis(x, 2)); }

GraphOut GraphInteraction::forward(const Ctx& ctx, Var joints, const Array& conf) const {
  GraphOut out;
  Var x = input_(ctx, build_tokens(ctx, joints, conf));
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    x = agcn_layer(ctx, l, x);
    AttentionOut att = casa_layer(ctx, l, x, conf);
    x = att.out;
    out.attention.push_back(att.weights.value());
  }
  out.fused = fuse(ctx, x);
  return out;
}

}  // namespace mvh
