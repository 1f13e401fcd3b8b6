#include "mvh/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mvh/geometry.hpp"

namespace mvh {

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = mid;
    i = j + 1;
  }
  return r;
}

}  // namespace

std::array<double, kPckThresholds> pck_thresholds() {
  std::array<double, kPckThresholds> t{};
  for (std::size_t i = 0; i < kPckThresholds; ++i)
    t[i] = kPckMaxMm * static_cast<double>(i) / static_cast<double>(kPckThresholds - 1);
  return t;
}

double pck(std::span<const double> distances, double threshold) {
  if (distances.empty()) return 0.0;
  std::size_t n = 0;
  for (double d : distances) n += d <= threshold;
  return static_cast<double>(n) / static_cast<double>(distances.size());
}

double auc(std::span<const double> distances) {
  if (distances.empty()) return 0.0;
  std::vector<double> sorted(distances.begin(), distances.end());
  std::sort(sorted.begin(), sorted.end());
  double sum = 0.0;
  for (double t : pck_thresholds()) {
    const auto within = std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    sum += static_cast<double>(within) / static_cast<double>(sorted.size());
  }
  return sum / static_cast<double>(kPckThresholds);
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("spearman: inputs differ in length");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (a.size() < 2) return nan;
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(a.size() - 1);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return nan;
  return sab / std::sqrt(saa * sbb);
}

void MetricAccumulator::add_frame(std::span<const Eigen::Vector3d> pred, std::span<const Eigen::Vector3d> gt) {
  if (pred.size() != kJoints || gt.size() != kJoints)
    throw ContractError("add_frame expects 21 predicted and 21 true joints");
  double raw = 0.0;
  for (std::size_t j = 0; j < kJoints; ++j) {
    const double d = (pred[j] - gt[j]).norm();
    distances_.push_back(d);
    joint_sum_[j] += d;
    raw += d;
  }
  raw /= static_cast<double>(kJoints);
  // The least-squares similarity minimises squared, not plain, distances; the
  // identity is also a similarity, so keep whichever is closer. Both sums run
  // over the same per-frame values, so PA-J <= MPJPE holds exactly.
  pa_sum_ += std::min(procrustes_align(pred, gt).mean_distance(), raw);
  raw_sum_ += raw;
  ++frames_;
}

void MetricAccumulator::add_confidence(double confidence, double error_px) {
  conf_.push_back(confidence);
  err_.push_back(error_px);
}

MetricReport MetricAccumulator::report() const {
  MetricReport r;
  r.frames = frames_;
  r.conf_error_spearman = spearman(conf_, err_);
  if (frames_ == 0) return r;
  const double n = static_cast<double>(frames_);
  r.mpjpe = raw_sum_ / n;
  r.pa_j = pa_sum_ / n;
  r.auc = auc(distances_);
  const auto th = pck_thresholds();
  for (std::size_t i = 0; i < kPckThresholds; ++i) r.pck[i] = pck(distances_, th[i]);
  for (std::size_t j = 0; j < kJoints; ++j) r.per_joint[j] = joint_sum_[j] / n;
  return r;
}

}  // namespace mvh
