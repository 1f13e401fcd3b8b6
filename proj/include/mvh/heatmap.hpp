#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "mvh/nn.hpp"

namespace mvh {

constexpr std::size_t kJoints = 21;

/// Raised when a heatmap has no positive mass to take an expectation over.
class UndefinedLocation : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct HeatmapGrid {
  std::size_t height = 32;
  std::size_t width = 32;
  double resolution = 8.0;  ///< pixels per cell
  double sigma = 2.0;       ///< Gaussian width in cells

  std::size_t cells() const { return height * width; }
  /// Cell coordinates place cell centres at integers: pixel 3.5 maps to cell 0 at resolution 8.
  double to_cell(double px) const { return (px + 0.5) / resolution - 0.5; }
  double to_px(double cell) const { return (cell + 0.5) * resolution - 0.5; }
};

struct RenderedHeatmaps {
  Array maps;                    ///< [J, H*W]
  std::vector<bool> out_of_frame;
};

/// Unnormalised Gaussian bumps (peak 1 at an exact cell centre), one grid per joint.
/// Joints farther than 3 sigma outside the grid give an all-zero map and a flag.
RenderedHeatmaps render_heatmaps(const Array& joints_px, const HeatmapGrid& grid);
/// Writes one joint's map into `out` (H*W values); returns false when out of frame.
bool render_one(double u_px, double v_px, const HeatmapGrid& grid, double* out);

/// Expectation of the cell coordinates under the sum-normalised grid, in cell units (x, y).
Eigen::Vector2d soft_argmax(std::span<const double> map, std::size_t height, std::size_t width);
/// max(map) clamped to [1e-3, 1].
double joint_confidence(std::span<const double> map);

constexpr double kMinConfidence = 1e-3;

// Differentiable forms over stacked maps [N, H*W].

/// Decoded joints in pixels, [N, 2].
Var soft_argmax_px(Var maps, const HeatmapGrid& grid);
/// Per-map confidence [N], clamped; gradient flows to the first maximal cell.
Var heatmap_confidence(Var maps);

/// Mean over joints of the mean squared error across cells (maps [N, H*W]).
Var loss_hmap(Var pred, Var target);
/// Mean over joints of the squared pixel error (inputs [N, 2]).
Var loss_hm2d(Var decoded, Var pseudo);

/// Per-joint dense refinement of a rendered heatmap: a low-rank network gives a
/// per-cell log-gain (bounded to +-3) that reweights the input map. The
/// up-projection starts at zero, so the refiner is the identity at initialisation.
class HeatmapRefiner {
 public:
  HeatmapRefiner() = default;
  HeatmapRefiner(ParamStore& store, const std::string& name, const HeatmapGrid& grid, std::size_t rank, Rng& rng);

  Var operator()(const Ctx& ctx, Var maps) const;

 private:
  Linear down_, up_;
};

}  // namespace mvh
