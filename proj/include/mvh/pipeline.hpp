#pragma once

#include <cstdint>

#include "mvh/flow.hpp"
#include "mvh/graph.hpp"
#include "mvh/heatmap.hpp"
#include "mvh/pointcloud.hpp"
#include "mvh/skeleton.hpp"

namespace mvh {

struct ModelConfig {
  HeatmapGrid grid;
  std::size_t refiner_rank = 8;
  GraphConfig graph;
  FlowConfig flow;
  double residual_scale = 4.0;  ///< px; the flow works on (label - decoded) / residual_scale
  std::size_t hypotheses = 4;   ///< random draws per view
  PointFeatureConfig point;
  StptConfig stpt;
  SkeletonHeadConfig skeleton;
  LossWeights weights;

  void validate() const;
};

/// Consecutive frames seen by V views, plus the T-frame windows drawn from them.
/// Per-frame stages run once per frame; the point transformer runs per window.
struct FrameBlock {
  Array input;   ///< [F, V, J, 2] labels the frontend renders (jittered in training)
  Array pseudo;  ///< [F, V, J, 2] supervision targets
  Array conf;    ///< [F, V, J] detector confidence
  std::vector<std::vector<std::size_t>> windows;  ///< T frame indices each; the middle one is supervised
  bool detector_confidence = false;  ///< weight the 2D loss with `conf` instead of the model's confidence

  std::size_t frames() const { return input.dim(0); }
  std::size_t views() const { return input.dim(1); }
};

struct ForwardResult {
  LossTerms terms;
  Var total;
  Var refined;               ///< [W, T, J, 3] query after the point transformer
  Array initial;             ///< [W, T, J, 3] query before it
  Array skeleton;            ///< [W, J, 3] centre-frame skeleton joints
  Array decoded;             ///< [F, V, J, 2] soft-argmax joints
  Array confidence;          ///< [F, V, J] model confidence
  std::vector<std::size_t> centres;  ///< centre frame of each window
  std::size_t excluded = 0;  ///< projections behind a camera left out of the 2D loss
  std::size_t dropped = 0;   ///< anchors lost to failed triangulation
};

/// Frontend heatmaps, graph interaction, conditional flow, hypothesis lifting,
/// point transformer and skeleton head wired into one differentiable pass.
/// Losses use the centre frame of each window.
class HandModel {
 public:
  HandModel() = default;
  HandModel(ParamStore& store, const ModelConfig& cfg, std::uint64_t seed);

  /// `rng` draws the random hypotheses. Detached values go through the tape's DetachCache.
  ForwardResult forward(const Ctx& ctx, const FrameBlock& block, const Rig& rig, Rng& rng) const;

  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  HeatmapRefiner refiner_;
  GraphInteraction graph_;
  ConditionalFlow flow_;
  PointFeatureNet points_;
  Stpt stpt_;
  SkeletonHead head_;
  SkeletonTemplate tmpl_ = SkeletonTemplate::canonical();
};

/// Input heatmaps: each label rendered as a Gaussian and scaled by its confidence.
/// labels [N, 2] px, conf [N] -> [N, H*W]. Labels are clamped into the frame first.
Array render_confidence_maps(const Array& labels, const Array& conf, const HeatmapGrid& grid, double frame_size);

}  // namespace mvh
