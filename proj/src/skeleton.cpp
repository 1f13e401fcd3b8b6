#include "mvh/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>

namespace mvh {

namespace {

Eigen::Matrix3d hat(const Eigen::Vector3d& w) {
  Eigen::Matrix3d k;
  k << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return k;
}

// R = I + a K + b K^2 with a = sin t / t, b = (1 - cos t) / t^2; da, db are the
// derivatives of a and b divided by t. Series below t = 1e-2.
struct RodriguesCoeffs {
  double a, b, da, db;
};

RodriguesCoeffs rodrigues_coeffs(double t) {
  const double t2 = t * t;
  if (t < 1e-2) {
    return {1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0, -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0};
  }
  const double s = std::sin(t), c = std::cos(t);
  return {s / t, (1.0 - c) / t2, (t * c - s) / (t2 * t), (t * s - 2.0 * (1.0 - c)) / (t2 * t2)};
}

}  // namespace

SkeletonTemplate SkeletonTemplate::canonical() {
  SkeletonTemplate t;
  const std::array<Eigen::Vector3d, kHandJoints> b = {
      Eigen::Vector3d(0, 0, 0),
      // thumb
      Eigen::Vector3d(-28, 28, -8), Eigen::Vector3d(-18, 22, 0), Eigen::Vector3d(-12, 18, 0), Eigen::Vector3d(-10, 14, 0),
      // index
      Eigen::Vector3d(-22, 88, 0), Eigen::Vector3d(0, 40, 0), Eigen::Vector3d(0, 24, 0), Eigen::Vector3d(0, 20, 0),
      // middle
      Eigen::Vector3d(-4, 92, 0), Eigen::Vector3d(0, 44, 0), Eigen::Vector3d(0, 28, 0), Eigen::Vector3d(0, 21, 0),
      // ring
      Eigen::Vector3d(13, 86, 0), Eigen::Vector3d(0, 40, 0), Eigen::Vector3d(0, 26, 0), Eigen::Vector3d(0, 20, 0),
      // little
      Eigen::Vector3d(28, 76, 0), Eigen::Vector3d(0, 32, 0), Eigen::Vector3d(0, 20, 0), Eigen::Vector3d(0, 18, 0)};
  t.bones = b;
  return t;
}

void SkeletonTemplate::validate() const {
  std::size_t roots = 0;
  for (std::size_t j = 0; j < kHandJoints; ++j) {
    if (parents[j] < 0) {
      ++roots;
      continue;
    }
    if (static_cast<std::size_t>(parents[j]) >= j)
      throw ContractError("skeleton template: parent of joint " + std::to_string(j) + " does not precede it");
    if (!(bones[j].norm() > 0.0) || !bones[j].allFinite())
      throw ContractError("skeleton template: bone " + std::to_string(j) + " has zero or non-finite length");
  }
  if (roots != 1 || parents[0] >= 0) throw ContractError("skeleton template must have exactly one root at joint 0");
}

SkeletonParams SkeletonParams::rest() {
  SkeletonParams p;
  for (auto& r : p.rotations) r.setZero();
  p.scales.fill(1.0);
  return p;
}

std::array<double, kSkeletonParams> SkeletonParams::pack() const {
  std::array<double, kSkeletonParams> out{};
  for (int k = 0; k < 3; ++k) {
    out[static_cast<std::size_t>(k)] = translation(k);
    out[kRotOffset + static_cast<std::size_t>(k)] = global_rotation(k);
  }
  for (std::size_t j = 1; j < kHandJoints; ++j) {
    for (int k = 0; k < 3; ++k) out[6 + 3 * (j - 1) + static_cast<std::size_t>(k)] = rotations[j](k);
    out[kScaleOffset + j - 1] = scales[j];
  }
  return out;
}

SkeletonParams SkeletonParams::unpack(std::span<const double> v) {
  if (v.size() != kSkeletonParams)
    throw ContractError("skeleton params: expected " + std::to_string(kSkeletonParams) + " values, got " +
                        std::to_string(v.size()));
  SkeletonParams p = rest();
  p.translation = Eigen::Vector3d(v[0], v[1], v[2]);
  p.global_rotation = Eigen::Vector3d(v[3], v[4], v[5]);
  for (std::size_t j = 1; j < kHandJoints; ++j) {
    p.rotations[j] = Eigen::Vector3d(v[6 + 3 * (j - 1)], v[7 + 3 * (j - 1)], v[8 + 3 * (j - 1)]);
    p.scales[j] = v[kScaleOffset + j - 1];
  }
  return p;
}

Eigen::Matrix3d axis_angle_matrix(const Eigen::Vector3d& w) {
  const RodriguesCoeffs c = rodrigues_coeffs(w.norm());
  const Eigen::Matrix3d k = hat(w);
  return Eigen::Matrix3d::Identity() + c.a * k + c.b * k * k;
}

std::array<Eigen::Vector3d, kHandJoints> forward_kinematics(const SkeletonTemplate& tmpl, const SkeletonParams& p,
                                                            std::size_t* clamped) {
  std::array<Eigen::Matrix3d, kHandJoints> g;
  std::array<Eigen::Vector3d, kHandJoints> x;
  std::size_t n_clamped = 0;
  g[0] = axis_angle_matrix(p.global_rotation);
  x[0] = p.translation;
  for (std::size_t j = 1; j < kHandJoints; ++j) {
    const auto par = static_cast<std::size_t>(tmpl.parents[j]);
    double s = p.scales[j];
    if (s < kMinBoneScale || s > kMaxBoneScale) {
      ++n_clamped;
      s = std::clamp(s, kMinBoneScale, kMaxBoneScale);
    }
    g[j] = g[par] * axis_angle_matrix(p.rotations[j]);
    x[j] = x[par] + g[j] * (s * tmpl.bones[j]);
  }
  if (n_clamped > 0 && !clamped)
    std::cerr << "warning: " << n_clamped << " bone scale(s) outside [0.5, 2] clamped\n";
  if (clamped) *clamped = n_clamped;
  return x;
}

Var axis_angle_matrix(Var w) {
  const Array& W = w.value();
  if (W.rank() != 2 || W.cols() != 3) throw ContractError("axis_angle_matrix expects [N, 3], got " + shape_str(W.shape()));
  const std::size_t n = W.rows();
  Array out(Shape{n, 3, 3});
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Matrix3d r = axis_angle_matrix(Eigen::Vector3d(W.at(i, 0), W.at(i, 1), W.at(i, 2)));
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) out[i * 9 + static_cast<std::size_t>(a * 3 + b)] = r(a, b);
  }
  const std::size_t iw = w.id;
  return w.tape->record(std::move(out), {w}, [iw, n](Tape& tp, std::size_t self) {
    const Array& W = tp.value(iw);
    const Array& G = tp.grad(self);
    Array& GW = tp.grad(iw);
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::Vector3d v(W.at(i, 0), W.at(i, 1), W.at(i, 2));
      const RodriguesCoeffs c = rodrigues_coeffs(v.norm());
      const Eigen::Matrix3d k = hat(v), k2 = k * k;
      Eigen::Matrix3d g;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) g(a, b) = G[i * 9 + static_cast<std::size_t>(a * 3 + b)];
      for (int d = 0; d < 3; ++d) {
        const Eigen::Matrix3d e = hat(Eigen::Vector3d::Unit(d));
        const Eigen::Matrix3d dr = c.a * e + c.b * (e * k + k * e) + c.da * v(d) * k + c.db * v(d) * k2;
        GW[i * 3 + static_cast<std::size_t>(d)] += (g.array() * dr.array()).sum();
      }
    }
  });
}

Var forward_kinematics(const SkeletonTemplate& tmpl, Var params) {
  const Shape ps = params.shape();
  if (ps.size() != 2 || ps[1] != kSkeletonParams)
    throw ContractError("forward_kinematics expects [N, " + std::to_string(kSkeletonParams) + "], got " + shape_str(ps));
  const std::size_t n = ps[0];
  Tape& t = *params.tape;
  Var rots = reshape(axis_angle_matrix(reshape(slice(params, 1, kRotOffset, kScaleOffset), {n * kHandJoints, 3})),
                     {n, kHandJoints, 3, 3});
  Var scales = clamp(slice(params, 1, kScaleOffset, kSkeletonParams), kMinBoneScale, kMaxBoneScale);  // [N, 20]
  std::vector<Var> g(kHandJoints), x(kHandJoints);
  g[0] = reshape(slice(rots, 1, 0, 1), {n, 3, 3});
  x[0] = reshape(slice(params, 1, 0, 3), {n, 3, 1});
  for (std::size_t j = 1; j < kHandJoints; ++j) {
    const auto par = static_cast<std::size_t>(tmpl.parents[j]);
    g[j] = matmul(g[par], reshape(slice(rots, 1, j, j + 1), {n, 3, 3}));
    Array bone(Shape{3, 1}, {tmpl.bones[j].x(), tmpl.bones[j].y(), tmpl.bones[j].z()});
    Var s = reshape(repeat_last(slice(scales, 1, j - 1, j), 3), {n, 3, 1});
    x[j] = add(x[par], mul(matmul(g[j], t.constant(std::move(bone))), s));
  }
  std::vector<Var> rows;
  for (auto& v : x) rows.push_back(reshape(v, {n, 1, 3}));
  return concat(rows, 1);
}

SkeletonHead::SkeletonHead(ParamStore& store, const std::string& name, const SkeletonHeadConfig& cfg, Rng& rng)
    : cfg_(cfg),
      mlp_(store, name, kHandJoints * (cfg.feature_dim + 3), cfg.hidden, kSkeletonParams, rng, Act::Tanh, Init::Zero) {}

SkeletonOut SkeletonHead::operator()(const Ctx& ctx, Var feats, Var coords, const SkeletonTemplate& tmpl) const {
  const Shape fs = feats.shape();
  if (fs.size() != 3 || fs[1] != kHandJoints || fs[2] != cfg_.feature_dim || coords.shape() != Shape{fs[0], fs[1], 3})
    throw ContractError("skeleton head: features " + shape_str(fs) + ", coords " + shape_str(coords.shape()));
  const std::size_t nb = fs[0];
  // centroid [B, 3] and its broadcast over joints
  Var centroid = mean_axis(coords, 1);
  Var centroid_j = permute(repeat_last(centroid, kHandJoints), {0, 2, 1});
  Var rel = scale(sub(coords, centroid_j), 1.0 / cfg_.coord_scale);
  Var raw = mlp_(ctx, reshape(concat({feats, rel}, -1), {nb, kHandJoints * (cfg_.feature_dim + 3)}));
  Var trans = add(centroid, scale(slice(raw, 1, 0, 3), cfg_.coord_scale));
  Var rots = slice(raw, 1, kRotOffset, kScaleOffset);
  Var scales = exp(scale(tanh(slice(raw, 1, kScaleOffset, kSkeletonParams)), std::numbers::ln2));
  SkeletonOut out;
  out.params = concat({trans, rots, scales}, 1);
  out.joints = forward_kinematics(tmpl, out.params);
  return out;
}

Proj2dLoss loss_proj2d(Var query, Var skeleton, const Array& pseudo, const Array& conf, const Rig& rig) {
  const Shape qs = query.shape();
  if (qs.size() != 3 || qs[2] != 3 || skeleton.shape() != qs)
    throw ContractError("loss_proj2d: query " + shape_str(qs) + " and skeleton " + shape_str(skeleton.shape()));
  const std::size_t nb = qs[0], nj = qs[1], nv = rig.size();
  if (pseudo.shape() != Shape{nb, nv, nj, 2} || conf.shape() != Shape{nb, nv, nj})
    throw ContractError("loss_proj2d: pseudo " + shape_str(pseudo.shape()) + ", conf " + shape_str(conf.shape()) +
                        " for " + std::to_string(nv) + " views");
  Proj2dLoss out;
  Var total;
  std::size_t counted = 0;
  const double norm = 1.0 / (static_cast<double>(nv) * static_cast<double>(nj) * static_cast<double>(nb));
  for (std::size_t v = 0; v < nv; ++v) {
    Array target(Shape{nb * nj, 2});
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t j = 0; j < nj; ++j)
        for (std::size_t k = 0; k < 2; ++k) target.at(b * nj + j, k) = pseudo[(((b * nv + v) * nj) + j) * 2 + k];
    for (Var pts : {query, skeleton}) {
      ProjectedPoints p = project_points(reshape(pts, {nb * nj, 3}), rig.cameras[v]);
      Array w(Shape{nb * nj});
      for (std::size_t i = 0; i < nb * nj; ++i) {
        const std::size_t b = i / nj, j = i % nj;
        if (p.valid[i]) {
          w[i] = conf[(b * nv + v) * nj + j] * norm;
          ++counted;
        } else {
          ++out.excluded;
        }
      }
      Var sq = sum_axis(square(sub(p.uv, query.tape->constant(target))), 1);
      Var term = sum(mul(sq, query.tape->constant(std::move(w))));
      total = total.tape ? add(total, term) : term;
    }
  }
  if (counted == 0) throw GeometryError(GeometryError::Kind::BehindCamera, "loss_proj2d: every joint is behind every camera");
  out.value = total;
  return out;
}

void LossWeights::validate() const {
  for (double w : {hmap, hm2d, nll, proj2d})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ContractError("loss weights must be finite and non-negative");
}

Var total_loss(const LossTerms& terms, const LossWeights& w) {
  w.validate();
  const std::pair<const char*, Var> named[] = {
      {"L_hmap", terms.hmap}, {"L_hm2d", terms.hm2d}, {"L_nll", terms.nll}, {"L_proj2d", terms.proj2d}};
  for (const auto& [name, v] : named) {
    if (v.size() != 1) throw ContractError(std::string("total_loss: ") + name + " is not a scalar");
    if (!std::isfinite(v.item())) throw NonFiniteLoss(name);
  }
  Var out = scale(terms.hmap, w.hmap);
  out = add(out, scale(terms.hm2d, w.hm2d));
  out = add(out, scale(terms.nll, w.nll));
  return add(out, scale(terms.proj2d, w.proj2d));
}

}  // namespace mvh
