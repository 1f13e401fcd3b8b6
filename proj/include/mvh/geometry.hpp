#pragma once

#include <Eigen/Core>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvh/tape.hpp"

namespace mvh {

class GeometryError : public std::runtime_error {
 public:
  enum class Kind { BehindCamera, InsufficientViews, Degenerate, InvalidCamera };
  GeometryError(Kind kind, const std::string& what) : std::runtime_error(what), kind(kind) {}
  Kind kind;
};

constexpr double kMinDepthMm = 1e-6;

/// Pinhole camera, world -> camera: x_c = R x_w + t (millimetres), zero skew.
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Eigen::Matrix3d intrinsics() const;
  /// 3x4 matrix K [R | t].
  Eigen::Matrix<double, 3, 4> projection() const;
  Eigen::Vector3d center() const { return -R.transpose() * t; }
  double depth(const Eigen::Vector3d& x) const { return R.row(2).dot(x) + t.z(); }
  /// Throws InvalidCamera if R is not a rotation (1e-9) or focal lengths are not positive.
  void validate() const;
};

struct Rig {
  std::vector<Camera> cameras;
  std::vector<int> view_ids;

  std::size_t size() const { return cameras.size(); }
  /// Rig restricted to the listed view positions, in that order.
  Rig subset(std::span<const std::size_t> views) const;
};

Eigen::Vector2d project(const Camera& cam, const Eigen::Vector3d& x);

/// Camera at `eye` with its optical axis through `target`; the image x axis is up x axis.
/// Falls back to another up vector when `up` is nearly parallel to the axis.
Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, double focal, double cx, double cy,
               Eigen::Vector3d up = Eigen::Vector3d::UnitZ());

/// Confidence-weighted DLT. Each view contributes two rows scaled by its confidence;
/// the solution is the right singular vector of the smallest singular value.
Eigen::Vector3d triangulate_dlt(std::span<const Eigen::Vector2d> obs, std::span<const double> conf, const Rig& rig);

struct ProcrustesResult {
  std::vector<Eigen::Vector3d> aligned;
  std::vector<double> distances;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  double scale = 1.0;
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double mean_distance() const;
};

/// Similarity transform of `pred` onto `gt` minimising the summed squared distance.
ProcrustesResult procrustes_align(std::span<const Eigen::Vector3d> pred, std::span<const Eigen::Vector3d> gt);

// Differentiable forms.

struct ProjectedPoints {
  Var uv;                   ///< [P, 2] pixels; rows for invalid points are zero
  std::vector<bool> valid;  ///< depth above kMinDepthMm
};

/// Projects [P, 3] world points into one camera.
ProjectedPoints project_points(Var points, const Camera& cam);

/// Batched confidence-weighted DLT: obs [P, V, 2] pixels, conf [P, V] -> [P, 3] mm.
/// Gradients flow to `obs` through the smallest singular vector.
Var triangulate_points(Var obs, const Array& conf, const Rig& rig);

/// Plain batched DLT used where no gradient is needed. Failed points are reported
/// through `ok` instead of throwing.
std::vector<Eigen::Vector3d> triangulate_batch(const Array& obs, const Array& conf, const Rig& rig,
                                               std::vector<bool>& ok);

}  // namespace mvh
