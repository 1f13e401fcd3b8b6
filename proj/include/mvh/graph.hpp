#pragma once

#include <vector>

#include "mvh/nn.hpp"

namespace mvh {

struct GraphConfig {
  std::size_t joints = 21;
  std::size_t pe_freqs = 8;     ///< per coordinate; sin and cos each -> 2 * 2 * 8 = 32 dims
  std::size_t id_dim = 32;
  std::size_t model_dim = 64;
  std::size_t qk_dim = 32;
  std::size_t fused_dim = 64;
  std::size_t layers = 2;
  double frame_size = 256.0;    ///< pixels; positions are normalised to [-1, 1]
};

/// Sinusoidal encoding of the last axis: [..., C] -> [..., C * 2F] laid out per
/// coordinate as sin(w_0 x) .. sin(w_{F-1} x), cos(w_0 x) .. cos(w_{F-1} x), w_f = 2^f * pi / 2.
Var sinusoidal_encoding(Var x, std::size_t freqs);

/// Row softmax of a learnable adjacency.
Var normalize_adjacency(Var a_learn);
/// x + A x W over the joint axis; x [..., J, D], A [J, J], W [D, D].
Var agcn_propagate(Var x, Var adjacency, Var weight);

/// Scaled dot-product attention, batched: q [G, N, d], k [G, M, d], v [G, M, e].
/// Returns softmax(q k^T / sqrt(d)) v and the attention weights [G, N, M].
struct AttentionOut {
  Var out;
  Var weights;
};
AttentionOut scaled_dot_attention(Var q, Var k, Var v);

struct GraphOut {
  Var fused;                     ///< [G, V, fused_dim]
  std::vector<Array> attention;  ///< per CASA layer, [G, V*J, V*J]
};

/// Joint tokens from decoded 2D joints and confidences, alternating adaptive-GCN
/// and confidence-aware self-attention layers, then per-view pooling and an MLP.
class GraphInteraction {
 public:
  GraphInteraction() = default;
  GraphInteraction(ParamStore& store, const std::string& name, const GraphConfig& cfg, Rng& rng);

  /// joints [G, V, J, 2] px, conf [G, V, J] -> tokens [G, V, J, 2*2F + id_dim + 1].
  Var build_tokens(const Ctx& ctx, Var joints, const Array& conf) const;
  /// x [G, V, J, D] -> same shape.
  Var agcn_layer(const Ctx& ctx, std::size_t layer, Var x) const;
  /// Attention jointly over the V*J tokens of each group, keys/queries/values see the confidence channel.
  AttentionOut casa_layer(const Ctx& ctx, std::size_t layer, Var x, const Array& conf) const;
  /// Mean over joints then the fusion MLP: [G, V, J, D] -> [G, V, fused_dim].
  Var fuse(const Ctx& ctx, Var x) const;

  GraphOut forward(const Ctx& ctx, Var joints, const Array& conf) const;

  const GraphConfig& config() const { return cfg_; }
  std::string adjacency_name() const { return name_ + ".adj"; }
  std::string embedding_name() const { return name_ + ".joint_id"; }

 private:
  std::string name_;
  GraphConfig cfg_;
  Linear input_;
  std::vector<Linear> q_, k_, v_;
  std::vector<std::string> gcn_w_;
  Mlp2 fuse_;
};

/// Kinematic-tree adjacency of the 21-joint hand (bones and diagonal set to 1).
Array hand_adjacency();

}  // namespace mvh
