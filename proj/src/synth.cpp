#include "mvh/synth.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace mvh {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

struct Wave {
  double amp = 0.0, freq = 0.0, phase = 0.0;
  double at(double t) const { return amp * std::sin(2.0 * std::numbers::pi * freq * t + phase); }
};

Wave random_wave(Rng& rng, double amp, double max_freq) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Wave w;
  w.amp = amp * (0.3 + 0.7 * u(rng));
  w.freq = max_freq * (0.25 + 0.75 * u(rng));
  w.phase = 2.0 * std::numbers::pi * u(rng);
  return w;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(seed ^ splitmix64(stream * 0x632BE59BD9B4E019ull + index));
}

void CorruptionProfile::validate() const {
  const auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(outlier_prob) || !prob(occlusion_prob) || !prob(occlusion_conf))
    throw ContractError("corruption profile '" + name + "': probabilities must lie in [0, 1]");
  if (!(sigma >= 0.0) || !(outlier_mag >= 0.0) || !(occlusion_inflation >= 0.0) || !(conf_noise >= 0.0) ||
      !(conf_scale > 0.0))
    throw ContractError("corruption profile '" + name + "': scales must be non-negative");
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
    throw ContractError("corruption profile name must be a single non-empty word");
}

CorruptionProfile CorruptionProfile::named(const std::string& name) {
  CorruptionProfile p;
  p.name = name;
  if (name == "gt") return p;
  if (name == "detector-strong") {
    p.sigma = 1.5;
    p.outlier_prob = 0.01;
    p.outlier_mag = 30.0;
    p.occlusion_prob = 0.05;
    p.occlusion_inflation = 2.0;
    p.occlusion_conf = 0.6;
    p.conf_noise = 0.05;
    return p;
  }
  if (name == "detector-weak") {
    p.sigma = 4.0;
    p.outlier_prob = 0.05;
    p.outlier_mag = 60.0;
    p.occlusion_prob = 0.15;
    p.occlusion_inflation = 3.0;
    p.occlusion_conf = 0.5;
    p.conf_noise = 0.05;
    return p;
  }
  throw ContractError("unknown corruption profile '" + name + "' (gt, detector-strong, detector-weak)");
}

Rig generate_rig(const RigConfig& cfg, std::uint64_t seed) {
  if (cfg.views < 2) throw ContractError("generate_rig needs at least 2 views, got " + std::to_string(cfg.views));
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  Rig rig;
  for (std::size_t v = 0; v < cfg.views; ++v) {
    const double az = golden * static_cast<double>(v) + 0.08 * u(rng);
    const double band = std::fmod(0.618034 * static_cast<double>(v) + 0.1, 1.0);
    const double el = std::asin(-0.25 + 0.9 * band) + 0.05 * u(rng);
    const double r = cfg.radius * (1.0 + 0.03 * u(rng));
    const double f = cfg.focal * (1.0 + 0.03 * u(rng));
    const Eigen::Vector3d eye = r * Eigen::Vector3d(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    const Eigen::Vector3d target(5.0 * u(rng), 5.0 * u(rng), 5.0 * u(rng));
    rig.cameras.push_back(look_at(eye, target, f, cfg.frame_size / 2.0, cfg.frame_size / 2.0));
    rig.view_ids.push_back(static_cast<int>(v));
  }
  // Every camera sees the whole working volume.
  const double h = cfg.volume / 2.0;
  for (std::size_t v = 0; v < rig.size(); ++v)
    for (int c = 0; c < 8; ++c) {
      const Eigen::Vector3d x((c & 1) ? h : -h, (c & 2) ? h : -h, (c & 4) ? h : -h);
      const Camera& cam = rig.cameras[v];
      const Eigen::Vector2d uv = project(cam, x);
      if (cam.depth(x) <= kMinDepthMm || uv.x() < 0.0 || uv.y() < 0.0 || uv.x() >= cfg.frame_size ||
          uv.y() >= cfg.frame_size)
        throw GeometryError(GeometryError::Kind::InvalidCamera,
                            "generated camera " + std::to_string(v) + " does not see the working volume");
    }
  // The first pair alone triangulates.
  const Rig pair = rig.subset(std::vector<std::size_t>{0, 1});
  const Eigen::Vector3d probe(10.0, -20.0, 30.0);
  const std::vector<Eigen::Vector2d> obs{project(pair.cameras[0], probe), project(pair.cameras[1], probe)};
  const std::vector<double> conf{1.0, 1.0};
  if ((triangulate_dlt(obs, conf, pair) - probe).norm() > 1e-6)
    throw GeometryError(GeometryError::Kind::Degenerate, "first two generated views do not triangulate");
  return rig;
}

Motion generate_motion(const SkeletonTemplate& tmpl, std::size_t frames, std::uint64_t seed, const MotionConfig& cfg) {
  if (frames < 1) throw ContractError("generate_motion needs at least one frame");
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);

  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  const Eigen::Matrix3d base = q.toRotationMatrix();
  std::array<double, kHandJoints> scales{};
  for (std::size_t j = 1; j < kHandJoints; ++j) scales[j] = 0.9 + 0.2 * u(rng);
  SkeletonParams rest = SkeletonParams::rest();
  rest.scales = scales;
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& x : forward_kinematics(tmpl, rest)) centroid += x / static_cast<double>(kHandJoints);
  const Eigen::Vector3d wrist0 = -base * centroid + Eigen::Vector3d(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5) * 60.0;

  std::array<Wave, 6> wrist, wobble;
  for (auto& w : wrist) w = random_wave(rng, cfg.wrist_amp / 2.0, cfg.max_freq);
  for (auto& w : wobble) w = random_wave(rng, cfg.rot_amp / 2.0, cfg.max_freq);
  std::array<double, 5> curl{};
  std::array<Wave, 5> flex;
  std::array<double, 5> spread{};
  for (std::size_t f = 0; f < 5; ++f) {
    curl[f] = 0.05 + 0.8 * u(rng);
    flex[f] = random_wave(rng, cfg.flex_amp, cfg.max_freq);
    spread[f] = 0.12 * (u(rng) - 0.5);
  }

  Motion m;
  for (double stretch = 1.0;; stretch *= 2.0) {
    if (stretch > 1024.0) throw std::logic_error("generate_motion: cannot meet the velocity bound");
    m.params = Array(Shape{frames, kSkeletonParams});
    m.joints = Array(Shape{frames, kHandJoints, 3});
    double vmax = 0.0;
    std::array<Eigen::Vector3d, kHandJoints> prev{};
    for (std::size_t t = 0; t < frames; ++t) {
      const double tt = static_cast<double>(t) / stretch;
      SkeletonParams p = rest;
      Eigen::Vector3d wob;
      for (int k = 0; k < 3; ++k) {
        p.translation(k) = wrist0(k) + wrist[static_cast<std::size_t>(k)].at(tt) + wrist[static_cast<std::size_t>(k) + 3].at(tt);
        wob(k) = wobble[static_cast<std::size_t>(k)].at(tt) + wobble[static_cast<std::size_t>(k) + 3].at(tt);
      }
      const Eigen::AngleAxisd g(base * axis_angle_matrix(wob));
      p.global_rotation = g.angle() * g.axis();
      for (std::size_t f = 0; f < 5; ++f) {
        const double bend = curl[f] + flex[f].at(tt);
        // flexion of the three phalanges, abduction of the metacarpal
        for (std::size_t k = 1; k < 4; ++k) {
          const std::size_t j = 1 + 4 * f + k;
          const Eigen::Vector3d axis = tmpl.bones[j].cross(Eigen::Vector3d::UnitZ()).normalized();
          p.rotations[j] = bend * (k == 1 ? 0.6 : 1.0) * axis;
        }
        p.rotations[1 + 4 * f] = spread[f] * Eigen::Vector3d::UnitZ();
      }
      const auto x = forward_kinematics(tmpl, p);
      const auto packed = p.pack();
      std::copy(packed.begin(), packed.end(), m.params.data() + t * kSkeletonParams);
      for (std::size_t j = 0; j < kHandJoints; ++j) {
        for (int k = 0; k < 3; ++k) m.joints[(t * kHandJoints + j) * 3 + static_cast<std::size_t>(k)] = x[j](k);
        if (t > 0) vmax = std::max(vmax, (x[j] - prev[j]).norm());
        prev[j] = x[j];
      }
    }
    if (vmax <= cfg.v_max) break;
  }
  for (double v : m.joints.values())
    if (std::abs(v) > 200.0) throw std::logic_error("generate_motion: joint left the working volume");
  return m;
}

Array project_sequence(const Array& joints, const Rig& rig) {
  if (joints.rank() != 3 || joints.dim(2) != 3)
    throw ContractError("project_sequence expects [T, J, 3], got " + shape_str(joints.shape()));
  const std::size_t nt = joints.dim(0), nj = joints.dim(1), nv = rig.size();
  Array out(Shape{nt, nv, nj, 2});
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t v = 0; v < nv; ++v)
      for (std::size_t j = 0; j < nj; ++j) {
        const double* p = joints.data() + (t * nj + j) * 3;
        const Eigen::Vector3d x(p[0], p[1], p[2]);
        if (rig.cameras[v].depth(x) <= kMinDepthMm)
          throw GeometryError(GeometryError::Kind::BehindCamera, "joint behind camera " + std::to_string(v));
        const Eigen::Vector2d uv = project(rig.cameras[v], x);
        out[((t * nv + v) * nj + j) * 2] = uv.x();
        out[((t * nv + v) * nj + j) * 2 + 1] = uv.y();
      }
  return out;
}

Corrupted corrupt(const Array& gt2d, const CorruptionProfile& profile, std::uint64_t seed, double frame_size) {
  profile.validate();
  if (gt2d.rank() != 4 || gt2d.dim(3) != 2) throw ContractError("corrupt expects [T, V, J, 2], got " + shape_str(gt2d.shape()));
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  const std::size_t count = gt2d.size() / 2;
  Corrupted out;
  out.pseudo = Array(gt2d.shape());
  out.conf = Array(Shape{gt2d.dim(0), gt2d.dim(1), gt2d.dim(2)});
  for (std::size_t i = 0; i < count; ++i) {
    // Fixed number of draws per joint keeps streams aligned across profiles.
    const double u_occ = u(rng), u_out = u(rng), ox = u(rng), oy = u(rng), nx = n(rng), ny = n(rng), nc = n(rng);
    const bool occluded = u_occ < profile.occlusion_prob;
    const double s = profile.sigma * (occluded ? profile.occlusion_inflation : 1.0);
    const double gx = gt2d[2 * i], gy = gt2d[2 * i + 1];
    double px, py;
    if (u_out < profile.outlier_prob) {
      px = std::clamp(gx + profile.outlier_mag * (2.0 * ox - 1.0), 0.0, frame_size - 1.0);
      py = std::clamp(gy + profile.outlier_mag * (2.0 * oy - 1.0), 0.0, frame_size - 1.0);
    } else {
      px = gx + s * nx;
      py = gy + s * ny;
    }
    out.pseudo[2 * i] = px;
    out.pseudo[2 * i + 1] = py;
    const double err = std::hypot(px - gx, py - gy);
    const double c = std::exp(-err / profile.conf_scale) * (occluded ? profile.occlusion_conf : 1.0) +
                     profile.conf_noise * nc;
    out.conf[i] = std::clamp(c, 1e-3, 1.0);
  }
  return out;
}

Dataset generate_dataset(const GenerateConfig& cfg) {
  Dataset d;
  d.seed = cfg.seed;
  d.frame_size = cfg.rig.frame_size;
  d.rig = generate_rig(cfg.rig, derive_seed(cfg.seed, 1, 0));
  d.profile = CorruptionProfile::named(cfg.profile);
  for (std::size_t i = cfg.first_sequence; i < cfg.first_sequence + cfg.sequences; ++i) {
    Sequence s;
    s.id = i;
    s.seed = derive_seed(cfg.seed, 2, i);
    Motion m = generate_motion(d.skeleton, cfg.frames, s.seed, cfg.motion);
    s.params = std::move(m.params);
    s.gt3d = std::move(m.joints);
    s.gt2d = project_sequence(s.gt3d, d.rig);
    Corrupted c = corrupt(s.gt2d, d.profile, derive_seed(cfg.seed, 3, i), d.frame_size);
    s.pseudo = std::move(c.pseudo);
    s.conf = std::move(c.conf);
    d.sequences.push_back(std::move(s));
  }
  return d;
}

}  // namespace mvh
