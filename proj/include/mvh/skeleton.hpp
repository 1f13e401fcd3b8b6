#pragma once

#include <Eigen/Core>
#include <array>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvh/geometry.hpp"
#include "mvh/hand.hpp"
#include "mvh/nn.hpp"

namespace mvh {

/// Packed parameter layout: translation (3), global axis-angle (3), one axis-angle per
/// non-root joint (20 x 3, in joint order 1..20), one bone-length scale per non-root joint (20).
constexpr std::size_t kSkeletonParams = 3 + 3 + 3 * kHandBones + kHandBones;
constexpr std::size_t kRotOffset = 3;
constexpr std::size_t kScaleOffset = 6 + 3 * kHandBones;
constexpr double kMinBoneScale = 0.5;
constexpr double kMaxBoneScale = 2.0;

struct SkeletonTemplate {
  std::array<int, kHandJoints> parents = kHandParents;
  /// Rest vector from parent to joint, in the parent's frame at rest (mm). Entry 0 unused.
  std::array<Eigen::Vector3d, kHandJoints> bones{};

  /// Right hand, wrist at the origin, fingers along +y, palm facing +z.
  static SkeletonTemplate canonical();
  /// Exactly one root, parents precede children, 20 non-zero bones.
  void validate() const;
};

struct SkeletonParams {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Vector3d global_rotation = Eigen::Vector3d::Zero();
  std::array<Eigen::Vector3d, kHandJoints> rotations{};  ///< entry 0 unused
  std::array<double, kHandJoints> scales{};              ///< entry 0 unused

  static SkeletonParams rest();
  std::array<double, kSkeletonParams> pack() const;
  static SkeletonParams unpack(std::span<const double> packed);
};

Eigen::Matrix3d axis_angle_matrix(const Eigen::Vector3d& w);

/// Joint j = joint parent(j) + G_j (s_j * bone_j), G_j = G_parent(j) R(r_j), G_root = R(global).
/// Scales outside [0.5, 2] are clamped; `clamped` receives how many were.
std::array<Eigen::Vector3d, kHandJoints> forward_kinematics(const SkeletonTemplate& tmpl, const SkeletonParams& p,
                                                            std::size_t* clamped = nullptr);

// Differentiable forms.

/// Rodrigues map, w [N, 3] -> [N, 3, 3].
Var axis_angle_matrix(Var w);
/// Packed params [N, 86] -> joints [N, 21, 3]. Scales are clamped to [0.5, 2].
Var forward_kinematics(const SkeletonTemplate& tmpl, Var params);

struct SkeletonHeadConfig {
  std::size_t feature_dim = 32;
  std::size_t hidden = 128;
  double coord_scale = 100.0;
};

struct SkeletonOut {
  Var params;  ///< [B, 86] in SkeletonParams units
  Var joints;  ///< [B, 21, 3]
};

/// MLP from the centre-frame point features and coordinates (relative to their
/// centroid) to skeleton parameters. Translation is centroid + coord_scale * output,
/// bone scales are exp(ln 2 * tanh(output)). The last layer starts at zero.
class SkeletonHead {
 public:
  SkeletonHead() = default;
  SkeletonHead(ParamStore& store, const std::string& name, const SkeletonHeadConfig& cfg, Rng& rng);

  /// feats [B, J, D], coords [B, J, 3]; both are used as given (callers detach).
  SkeletonOut operator()(const Ctx& ctx, Var feats, Var coords, const SkeletonTemplate& tmpl) const;

 private:
  SkeletonHeadConfig cfg_;
  Mlp2 mlp_;
};

struct Proj2dLoss {
  Var value;
  std::size_t excluded = 0;  ///< projections behind a camera, left out of the sum
};

/// Mean over views of sum_j c_vj |pi_v(Q_j) - x_vj|^2 / J + sum_j c_vj |pi_v(S_j) - x_vj|^2 / J,
/// averaged over the batch. query, skeleton [B, J, 3]; pseudo [B, V, J, 2]; conf [B, V, J].
Proj2dLoss loss_proj2d(Var query, Var skeleton, const Array& pseudo, const Array& conf, const Rig& rig);

class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(std::string term) : std::runtime_error("non-finite loss term " + term), term(std::move(term)) {}
  std::string term;
};

struct LossWeights {
  double hmap = 0.001;
  double hm2d = 10.0;
  double nll = 0.1;
  double proj2d = 10.0;
  void validate() const;
};

struct LossTerms {
  Var hmap, hm2d, nll, proj2d;
};

/// hmap_w * L_hmap + hm2d_w * L_hm2d + nll_w * L_nll + proj2d_w * L_proj2d.
Var total_loss(const LossTerms& terms, const LossWeights& w);

}  // namespace mvh
