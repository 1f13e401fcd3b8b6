#pragma once

#include <Eigen/Core>
#include <array>
#include <span>
#include <vector>

#include "mvh/heatmap.hpp"

namespace mvh {

constexpr std::size_t kPckThresholds = 100;
constexpr double kPckMaxMm = 50.0;

/// 100 evenly spaced thresholds from 0 to 50 mm inclusive.
std::array<double, kPckThresholds> pck_thresholds();

/// Fraction of distances <= threshold.
double pck(std::span<const double> distances, double threshold);

/// Mean PCK over the threshold grid (sort + binary search).
double auc(std::span<const double> distances);

/// Rank correlation with average ranks for ties; NaN when either side is constant
/// or fewer than two pairs are given.
double spearman(std::span<const double> a, std::span<const double> b);

struct MetricReport {
  std::size_t frames = 0;
  double mpjpe = 0.0;  ///< mm
  double pa_j = 0.0;   ///< mm, after per-frame similarity alignment
  double auc = 0.0;
  std::array<double, kPckThresholds> pck{};
  std::array<double, kJoints> per_joint{};
  double conf_error_spearman = 0.0;  ///< NaN when no confidences were recorded
};

class MetricAccumulator {
 public:
  /// One frame of predicted and true joints.
  void add_frame(std::span<const Eigen::Vector3d> pred, std::span<const Eigen::Vector3d> gt);
  /// One (confidence, 2D error in px) pair per view-joint.
  void add_confidence(double confidence, double error_px);
  MetricReport report() const;
  std::size_t frames() const { return frames_; }

 private:
  std::size_t frames_ = 0;
  std::vector<double> distances_;
  std::array<double, kJoints> joint_sum_{};
  double pa_sum_ = 0.0;
  double raw_sum_ = 0.0;
  std::vector<double> conf_, err_;
};

}  // namespace mvh
