#include "mvh/geometry.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace mvh {
namespace {

using DesignMatrix = Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor, 64, 4>;

// Normalized rows: image coords pass through K^-1, world coords are centred on the
// mean camera centre of the contributing views and divided by their mean distance
// from it. The normalisation moves with the rig, so the solution is equivariant
// under similarity transforms of the whole scene.
struct DltSystem {
  DesignMatrix a;
  std::vector<std::size_t> views;  // view of each row pair
  std::vector<Eigen::Matrix<double, 3, 4>> proj;  // normalized [R | (R o + t)/s] per row pair
  double world_scale = 1.0;
  Eigen::Vector3d world_origin = Eigen::Vector3d::Zero();
};

DltSystem build_system(const double* obs, const double* conf, const Rig& rig) {
  DltSystem sys;
  const std::size_t nv = rig.size();
  for (std::size_t v = 0; v < nv; ++v)
    if (conf[v] > 0.0) sys.views.push_back(v);
  if (sys.views.size() < 2)
    throw GeometryError(GeometryError::Kind::InsufficientViews,
                        "triangulation needs >= 2 views with positive confidence, got " +
                            std::to_string(sys.views.size()));
  const double nviews = static_cast<double>(sys.views.size());
  for (auto v : sys.views) sys.world_origin += rig.cameras[v].center() / nviews;
  double scale = 0.0;
  for (auto v : sys.views) scale += (rig.cameras[v].center() - sys.world_origin).norm() / nviews;
  if (!(scale > 0.0))
    throw GeometryError(GeometryError::Kind::Degenerate, "contributing cameras share one centre");
  sys.world_scale = scale;
  sys.a.resize(static_cast<Eigen::Index>(2 * sys.views.size()), 4);
  for (std::size_t r = 0; r < sys.views.size(); ++r) {
    const std::size_t v = sys.views[r];
    const Camera& cam = rig.cameras[v];
    Eigen::Matrix<double, 3, 4> p;
    p.leftCols<3>() = cam.R;
    p.col(3) = (cam.R * sys.world_origin + cam.t) / sys.world_scale;
    const double un = (obs[2 * v] - cam.cx) / cam.fx;
    const double vn = (obs[2 * v + 1] - cam.cy) / cam.fy;
    const double c = conf[v];
    sys.a.row(static_cast<Eigen::Index>(2 * r)) = c * (un * p.row(2) - p.row(0));
    sys.a.row(static_cast<Eigen::Index>(2 * r + 1)) = c * (vn * p.row(2) - p.row(1));
    sys.proj.push_back(p);
  }
  return sys;
}

struct DltSolution {
  Eigen::Vector3d point;
  Eigen::Vector4d v;
  Eigen::Vector4d sigma;
  Eigen::Matrix4d basis;
};

DltSolution solve_system(const DltSystem& sys) {
  Eigen::JacobiSVD<DesignMatrix> svd(sys.a, Eigen::ComputeFullV);
  DltSolution s;
  s.sigma = svd.singularValues();
  s.basis = svd.matrixV();
  s.v = s.basis.col(3);
  if (!(s.sigma(2) > 1e-12 * s.sigma(0)))
    throw GeometryError(GeometryError::Kind::Degenerate, "degenerate triangulation geometry (rank < 3)");
  if (std::abs(s.v(3)) < 1e-14)
    throw GeometryError(GeometryError::Kind::Degenerate, "triangulated point at infinity");
  s.point = sys.world_scale * s.v.head<3>() / s.v(3) + sys.world_origin;
  return s;
}

}  // namespace

Eigen::Matrix3d Camera::intrinsics() const {
  Eigen::Matrix3d k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

Eigen::Matrix<double, 3, 4> Camera::projection() const {
  Eigen::Matrix<double, 3, 4> rt;
  rt.leftCols<3>() = R;
  rt.col(3) = t;
  return intrinsics() * rt;
}

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0))
    throw GeometryError(GeometryError::Kind::InvalidCamera, "focal lengths must be positive");
  if (!(R.transpose() * R).isApprox(Eigen::Matrix3d::Identity(), 1e-9) ||
      std::abs(R.determinant() - 1.0) > 1e-9)
    throw GeometryError(GeometryError::Kind::InvalidCamera, "camera rotation is not orthonormal with det +1");
}

Rig Rig::subset(std::span<const std::size_t> views) const {
  Rig out;
  for (auto v : views) {
    if (v >= cameras.size()) throw ContractError("view index " + std::to_string(v) + " outside rig");
    out.cameras.push_back(cameras[v]);
    out.view_ids.push_back(view_ids.empty() ? static_cast<int>(v) : view_ids[v]);
  }
  return out;
}

Eigen::Vector2d project(const Camera& cam, const Eigen::Vector3d& x) {
  const Eigen::Vector3d xc = cam.R * x + cam.t;
  if (xc.z() <= kMinDepthMm)
    throw GeometryError(GeometryError::Kind::BehindCamera,
                        "point depth " + std::to_string(xc.z()) + " mm is behind the camera");
  return {cam.fx * xc.x() / xc.z() + cam.cx, cam.fy * xc.y() / xc.z() + cam.cy};
}

Eigen::Vector3d triangulate_dlt(std::span<const Eigen::Vector2d> obs, std::span<const double> conf, const Rig& rig) {
  if (obs.size() != rig.size() || conf.size() != rig.size())
    throw ContractError("triangulate_dlt: " + std::to_string(obs.size()) + " observations, " +
                        std::to_string(conf.size()) + " confidences for a rig of " + std::to_string(rig.size()));
  std::vector<double> flat(2 * obs.size());
  for (std::size_t i = 0; i < obs.size(); ++i) {
    flat[2 * i] = obs[i].x();
    flat[2 * i + 1] = obs[i].y();
  }
  return solve_system(build_system(flat.data(), conf.data(), rig)).point;
}

double ProcrustesResult::mean_distance() const {
  if (distances.empty()) return 0.0;
  return std::accumulate(distances.begin(), distances.end(), 0.0) / static_cast<double>(distances.size());
}

ProcrustesResult procrustes_align(std::span<const Eigen::Vector3d> pred, std::span<const Eigen::Vector3d> gt) {
  if (pred.size() != gt.size()) throw ContractError("procrustes_align: point count mismatch");
  if (pred.size() < 3) throw ContractError("procrustes_align needs at least 3 points");
  const double n = static_cast<double>(pred.size());
  Eigen::Vector3d mp = Eigen::Vector3d::Zero(), mg = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mg += gt[i];
  }
  mp /= n;
  mg /= n;
  double var_p = 0.0, var_g = 0.0;
  Eigen::Matrix3d s = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Eigen::Vector3d a = pred[i] - mp;
    const Eigen::Vector3d b = gt[i] - mg;
    var_p += a.squaredNorm();
    var_g += b.squaredNorm();
    s += a * b.transpose();
  }
  if (!(var_g > 1e-18)) throw GeometryError(GeometryError::Kind::Degenerate, "procrustes target has zero variance");

  // Horn's unit-quaternion solution: the rotation is the top eigenvector of N.
  Eigen::Matrix4d nm;
  const double sxx = s(0, 0), sxy = s(0, 1), sxz = s(0, 2);
  const double syx = s(1, 0), syy = s(1, 1), syz = s(1, 2);
  const double szx = s(2, 0), szy = s(2, 1), szz = s(2, 2);
  nm << sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,  //
      syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,    //
      szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,   //
      sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(nm);
  const Eigen::Vector4d q = eig.eigenvectors().col(3);
  ProcrustesResult out;
  out.rotation = Eigen::Quaterniond(q(0), q(1), q(2), q(3)).normalized().toRotationMatrix();

  double num = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) num += (gt[i] - mg).dot(out.rotation * (pred[i] - mp));
  out.scale = var_p > 0.0 ? num / var_p : 0.0;
  out.translation = mg - out.scale * out.rotation * mp;
  out.aligned.reserve(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    out.aligned.push_back(out.scale * out.rotation * pred[i] + out.translation);
    out.distances.push_back((out.aligned.back() - gt[i]).norm());
  }
  return out;
}

ProjectedPoints project_points(Var points, const Camera& cam) {
  const Array& X = points.value();
  if (X.rank() != 2 || X.cols() != 3) throw ContractError("project_points expects [P, 3], got " + shape_str(X.shape()));
  const std::size_t n = X.rows();
  Array uv(Shape{n, 2}, 0.0);
  std::vector<bool> valid(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d xw(X.at(i, 0), X.at(i, 1), X.at(i, 2));
    const Eigen::Vector3d xc = cam.R * xw + cam.t;
    if (xc.z() <= kMinDepthMm) continue;
    valid[i] = true;
    uv.at(i, 0) = cam.fx * xc.x() / xc.z() + cam.cx;
    uv.at(i, 1) = cam.fy * xc.y() / xc.z() + cam.cy;
  }
  const std::size_t ip = points.id;
  Var out = points.tape->record(std::move(uv), {points}, [ip, cam, valid](Tape& tp, std::size_t self) {
    const Array& X = tp.value(ip);
    const Array& G = tp.grad(self);
    Array& GX = tp.grad(ip);
    for (std::size_t i = 0; i < valid.size(); ++i) {
      if (!valid[i]) continue;
      const Eigen::Vector3d xw(X.at(i, 0), X.at(i, 1), X.at(i, 2));
      const Eigen::Vector3d xc = cam.R * xw + cam.t;
      const double iz = 1.0 / xc.z();
      // d(u, v)/d(x_c) then chain through R.
      const Eigen::Vector3d du(cam.fx * iz, 0.0, -cam.fx * xc.x() * iz * iz);
      const Eigen::Vector3d dv(0.0, cam.fy * iz, -cam.fy * xc.y() * iz * iz);
      const Eigen::Vector3d gc = G.at(i, 0) * du + G.at(i, 1) * dv;
      const Eigen::Vector3d gw = cam.R.transpose() * gc;
      for (int k = 0; k < 3; ++k) GX.at(i, static_cast<std::size_t>(k)) += gw(k);
    }
  });
  return {out, std::move(valid)};
}

Var triangulate_points(Var obs, const Array& conf, const Rig& rig) {
  const Array& O = obs.value();
  const std::size_t nv = rig.size();
  if (O.rank() != 3 || O.dim(1) != nv || O.dim(2) != 2)
    throw ContractError("triangulate_points expects obs [P, " + std::to_string(nv) + ", 2], got " +
                        shape_str(O.shape()));
  const std::size_t np = O.dim(0);
  if (conf.size() != np * nv)
    throw ContractError("triangulate_points: confidence shape " + shape_str(conf.shape()) + " vs obs " +
                        shape_str(O.shape()));
  Array out(Shape{np, 3});
  std::vector<DltSolution> sols;
  sols.reserve(np);
  for (std::size_t p = 0; p < np; ++p) {
    auto sys = build_system(O.data() + p * nv * 2, conf.data() + p * nv, rig);
    sols.push_back(solve_system(sys));
    for (int k = 0; k < 3; ++k) out.at(p, static_cast<std::size_t>(k)) = sols.back().point(k);
  }
  const std::size_t io = obs.id;
  return obs.tape->record(std::move(out), {obs}, [io, conf, rig, sols = std::move(sols)](Tape& tp, std::size_t self) {
    const Array& O = tp.value(io);
    const Array& G = tp.grad(self);
    Array& GO = tp.grad(io);
    const std::size_t nv = rig.size();
    for (std::size_t p = 0; p < sols.size(); ++p) {
      const DltSolution& s = sols[p];
      const DltSystem sys = build_system(O.data() + p * nv * 2, conf.data() + p * nv, rig);
      const double sc = sys.world_scale;
      const Eigen::Vector3d gx(G.at(p, 0), G.at(p, 1), G.at(p, 2));
      Eigen::Vector4d gv;
      gv.head<3>() = sc * gx / s.v(3);
      gv(3) = -sc * gx.dot(s.v.head<3>()) / (s.v(3) * s.v(3));
      // (M - lambda I)^+ gv with M = A^T A, restricted to the complement of v.
      const double lam = s.sigma(3) * s.sigma(3);
      Eigen::Vector4d w = Eigen::Vector4d::Zero();
      for (int k = 0; k < 3; ++k) {
        const Eigen::Vector4d b = s.basis.col(k);
        w += b * (b.dot(gv) / (s.sigma(k) * s.sigma(k) - lam));
      }
      const Eigen::VectorXd av = sys.a * s.v;
      const Eigen::VectorXd aw = sys.a * w;
      for (std::size_t r = 0; r < sys.views.size(); ++r) {
        const std::size_t v = sys.views[r];
        const Camera& cam = rig.cameras[v];
        const double c = conf[p * nv + v];
        const auto ru = static_cast<Eigen::Index>(2 * r), rv = ru + 1;
        // gA_row = -(Av_r w^T + Aw_r v^T); dRow/d(normalized coord) = c * P3.
        const Eigen::Matrix<double, 1, 4> p3 = sys.proj[r].row(2);
        const Eigen::Matrix<double, 1, 4> gu_row = -(av(ru) * w.transpose() + aw(ru) * s.v.transpose());
        const Eigen::Matrix<double, 1, 4> gv_row = -(av(rv) * w.transpose() + aw(rv) * s.v.transpose());
        GO[(p * nv + v) * 2] += c * gu_row.dot(p3) / cam.fx;
        GO[(p * nv + v) * 2 + 1] += c * gv_row.dot(p3) / cam.fy;
      }
    }
  });
}

Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, double focal, double cx, double cy,
               Eigen::Vector3d up) {
  const Eigen::Vector3d z = (target - eye).normalized();
  if (std::abs(z.dot(up.normalized())) > 0.95) up = std::abs(z.y()) < 0.9 ? Eigen::Vector3d::UnitY() : Eigen::Vector3d::UnitX();
  const Eigen::Vector3d x = up.cross(z).normalized();
  Camera c;
  c.R.row(0) = x;
  c.R.row(1) = z.cross(x);
  c.R.row(2) = z;
  c.t = -c.R * eye;
  c.fx = c.fy = focal;
  c.cx = cx;
  c.cy = cy;
  return c;
}

std::vector<Eigen::Vector3d> triangulate_batch(const Array& obs, const Array& conf, const Rig& rig,
                                               std::vector<bool>& ok) {
  const std::size_t nv = rig.size();
  if (obs.rank() != 3 || obs.dim(1) != nv || obs.dim(2) != 2 || conf.size() != obs.dim(0) * nv)
    throw ContractError("triangulate_batch: bad shapes " + shape_str(obs.shape()) + " / " + shape_str(conf.shape()));
  const std::size_t np = obs.dim(0);
  std::vector<Eigen::Vector3d> out(np, Eigen::Vector3d::Zero());
  ok.assign(np, false);
  for (std::size_t p = 0; p < np; ++p) {
    const bool finite = std::all_of(obs.data() + p * nv * 2, obs.data() + (p + 1) * nv * 2,
                                    [](double x) { return std::isfinite(x); });
    if (!finite) continue;
    try {
      out[p] = solve_system(build_system(obs.data() + p * nv * 2, conf.data() + p * nv, rig)).point;
      ok[p] = out[p].allFinite();
    } catch (const GeometryError&) {
      ok[p] = false;
    }
  }
  return out;
}

}  // namespace mvh
