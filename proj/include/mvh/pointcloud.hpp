#pragma once

#include <cstddef>
#include <vector>

#include "mvh/geometry.hpp"
#include "mvh/graph.hpp"
#include "mvh/nn.hpp"

namespace mvh {

/// Query and anchor clouds for F frames. Anchor rows are ordered (draw, joint).
struct PointCloud {
  Var query;                       ///< [F, J, 3] mm
  Array anchors;                   ///< [F, A, 3] mm; A = M * J
  std::vector<bool> anchor_valid;  ///< F * A; failed triangulations are false
  std::size_t dropped = 0;
};

/// key [F, V, J, 2] px, random [F, V, M, J, 2] px, conf [F, V, J].
/// Queries are the differentiable weighted DLT of the key hypotheses; anchor r of
/// joint j triangulates draw r of joint j across all views (with that joint's
/// confidences) and carries no gradient.
PointCloud lift_hypotheses(Var key, const Array& random, const Array& conf, const Rig& rig);

struct PointFeatureConfig {
  std::size_t pe_freqs = 8;
  std::size_t hidden = 64;
  std::size_t dim = 32;
  double frame_size = 256.0;
};

struct PointFeatures {
  Var feat;                  ///< [F, N, dim]
  std::vector<bool> hidden;  ///< F * N; behind every camera, feature is zero
};

/// Per view: sinusoidal encoding of the normalised projection plus the confidence
/// of the nearest decoded joint, through a shared bottleneck MLP; views are averaged
/// over those where the point has positive depth.
class PointFeatureNet {
 public:
  PointFeatureNet() = default;
  PointFeatureNet(ParamStore& store, const std::string& name, const PointFeatureConfig& cfg, Rng& rng);

  /// points [F, N, 3], joints2d [F, V, J, 2] px, conf [F, V, J].
  PointFeatures operator()(const Ctx& ctx, Var points, const Array& joints2d, const Array& conf, const Rig& rig) const;
  /// Pre-MLP encoding of one view, [F*N, 4 * pe_freqs + 1]; `valid` receives the depth test.
  Var view_encoding(const Ctx& ctx, Var points, const Array& joints2d, const Array& conf, const Camera& cam,
                    std::size_t view, std::vector<bool>& valid) const;
  const PointFeatureConfig& config() const { return cfg_; }

 private:
  PointFeatureConfig cfg_;
  Mlp2 mlp_;
};

/// k nearest keys for each query, within the same frame. queries [F, N, 3], keys [F, M, 3].
/// index holds F*N*k rows into the flattened keys; ties go to the lower index. When a
/// frame has fewer than k usable keys the remaining slots point at row 0 and carry a
/// -inf style bias in `bias` ([F*N, 1, k]).
struct Neighbours {
  std::size_t k = 0;
  std::vector<std::size_t> index;
  Array bias;
  std::vector<bool> empty;  ///< F*N; no usable key at all
};
Neighbours knn(const Array& queries, const Array& keys, std::size_t k, const std::vector<bool>* key_valid = nullptr);
/// knn routed through the tape's detach cache.
Neighbours knn_cached(Tape& tape, const Array& queries, const Array& keys, std::size_t k,
                      const std::vector<bool>* key_valid = nullptr);

/// out_i = sum_j softmax_j(q_i . (k_j + d_ij) / sqrt(D) + bias_ij) (v_j + d_ij) over the
/// neighbours of i. q [P, D]; keys, values [R, D]; delta [P, k, D]. Weights [P, 1, k].
AttentionOut neighbour_attention(Var q, Var keys, Var values, Var delta, const Neighbours& nb);

/// Per-joint attention across frames: q, k, v [B, T, J, d] -> out [B, T, J, d], weights [B*J, T, T].
AttentionOut temporal_attention(Var q, Var k, Var v);

struct StptConfig {
  std::size_t dim = 32;
  std::size_t blocks = 4;
  std::size_t knn = 8;
  std::size_t max_frames = 7;
  std::size_t hidden = 64;
  std::size_t coord_freqs = 4;
  double coord_scale = 100.0;  ///< mm; attention MLPs see coordinates / coord_scale
};

struct StptOutput {
  Var coords;                       ///< [B, T, J, 3]
  Var features;                     ///< [B, T, J, dim]
  std::vector<Array> block_coords;  ///< coordinates after each block
  std::vector<Array> attention;     ///< spatial, temporal, cross weights per block
};

/// Blocks of spatial kNN attention, temporal attention and anchor cross-attention,
/// each followed by a residual coordinate update C += coord_scale * FFN(F). The FFN
/// output layers start at zero.
class Stpt {
 public:
  Stpt() = default;
  Stpt(ParamStore& store, const std::string& name, const StptConfig& cfg, Rng& rng);

  /// coords [B, T, J, 3], feats [B, T, J, dim], anchors [B*T, A, 3], anchor_feats [B*T, A, dim].
  StptOutput forward(const Ctx& ctx, Var coords, Var feats, const Array& anchors, Var anchor_feats,
                     const std::vector<bool>& anchor_valid) const;

  const StptConfig& config() const { return cfg_; }
  std::string block(std::size_t b) const { return name_ + ".b" + std::to_string(b); }
  std::string ffn(std::size_t b) const { return block(b) + ".ffn"; }
  std::string frames(std::size_t b) const { return block(b) + ".frames"; }

 private:
  struct Block {
    Linear embed, sq, sk, sv, tq, tk, tv, cq, ck, cv;
    Mlp2 spos, cpos, ffn;
  };
  Var norm(const Ctx& ctx, std::size_t b, const char* which, Var x) const;
  Var relative_encoding(const Ctx& ctx, const Mlp2& net, Var rel) const;

  std::string name_;
  StptConfig cfg_;
  std::vector<Block> blocks_;
};

}  // namespace mvh
