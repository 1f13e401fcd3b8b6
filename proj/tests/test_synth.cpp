#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "mvh/dataset.hpp"
#include "mvh/synth.hpp"

using namespace mvh;

namespace {

bool same_bits(const Array& a, const Array& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Average ranks, ties shared.
std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

Dataset small_dataset(std::size_t n, std::uint64_t seed = 3) {
  GenerateConfig cfg;
  cfg.sequences = n;
  cfg.frames = 6;
  cfg.seed = seed;
  cfg.rig.views = 4;
  return generate_dataset(cfg);
}

}  // namespace

TEST_CASE("rig generation is seeded and sees the working volume") {
  for (std::size_t views : {2u, 4u, 8u}) {
    RigConfig cfg;
    cfg.views = views;
    const Rig a = generate_rig(cfg, 11), b = generate_rig(cfg, 11), c = generate_rig(cfg, 12);
    REQUIRE(a.size() == views);
    for (std::size_t v = 0; v < views; ++v) {
      CHECK(a.cameras[v].R == b.cameras[v].R);
      CHECK(a.cameras[v].t == b.cameras[v].t);
      CHECK(a.cameras[v].fx == b.cameras[v].fx);
      CHECK(a.cameras[v].t != c.cameras[v].t);
      for (int k = 0; k < 8; ++k) {
        const Eigen::Vector3d x((k & 1) ? 200 : -200, (k & 2) ? 200 : -200, (k & 4) ? 200 : -200);
        const Eigen::Vector2d uv = project(a.cameras[v], x);
        CHECK(a.cameras[v].depth(x) > 0);
        CHECK((uv.array() >= 0.0).all());
        CHECK((uv.array() < 256.0).all());
      }
    }
    // any pair triangulates a probe, not just the first
    std::mt19937_64 rng(views);
    std::uniform_real_distribution<double> u(-150, 150);
    for (std::size_t i = 0; i + 1 < views; ++i) {
      const Rig pair = a.subset(std::vector<std::size_t>{i, i + 1});
      const Eigen::Vector3d x(u(rng), u(rng), u(rng));
      const std::vector<Eigen::Vector2d> obs{project(pair.cameras[0], x), project(pair.cameras[1], x)};
      const std::vector<double> conf{1.0, 1.0};
      CHECK((triangulate_dlt(obs, conf, pair) - x).norm() < 1e-6);
    }
  }
  RigConfig one;
  one.views = 1;
  CHECK_THROWS_AS(generate_rig(one, 0), ContractError);
}

TEST_CASE("motion is seeded, smooth and in the working volume") {
  const auto tmpl = SkeletonTemplate::canonical();
  const Motion a = generate_motion(tmpl, 40, 5), b = generate_motion(tmpl, 40, 5), c = generate_motion(tmpl, 40, 6);
  CHECK(same_bits(a.params, b.params));
  CHECK(same_bits(a.joints, b.joints));
  CHECK_FALSE(same_bits(a.joints, c.joints));
  const MotionConfig cfg;
  double worst = 0.0;
  for (std::size_t t = 1; t < 40; ++t)
    for (std::size_t j = 0; j < kHandJoints; ++j) {
      double d2 = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        const double d = a.joints[(t * kHandJoints + j) * 3 + k] - a.joints[((t - 1) * kHandJoints + j) * 3 + k];
        d2 += d * d;
      }
      worst = std::max(worst, std::sqrt(d2));
    }
  CHECK(worst <= cfg.v_max);
  CHECK(worst > 0.0);
  for (double v : a.joints.values()) CHECK(std::abs(v) <= 200.0);

  // joints are the FK of the stored parameters
  for (std::size_t t = 0; t < 40; t += 13) {
    std::array<double, kSkeletonParams> packed;
    std::copy_n(a.params.data() + t * kSkeletonParams, kSkeletonParams, packed.begin());
    const auto x = forward_kinematics(tmpl, SkeletonParams::unpack(packed));
    for (std::size_t j = 0; j < kHandJoints; ++j)
      for (int k = 0; k < 3; ++k) CHECK(x[j](k) == a.joints[(t * kHandJoints + j) * 3 + static_cast<std::size_t>(k)]);
  }

  const Motion single = generate_motion(tmpl, 1, 9);
  CHECK(single.joints.shape() == Shape{1, kHandJoints, 3});
  CHECK_THROWS_AS(generate_motion(tmpl, 0, 9), ContractError);
}

TEST_CASE("gt 2D is the projection of gt 3D") {
  const Dataset d = small_dataset(2);
  for (const auto& s : d.sequences)
    for (std::size_t t = 0; t < s.frames(); ++t)
      for (std::size_t v = 0; v < d.rig.size(); ++v)
        for (std::size_t j = 0; j < kHandJoints; ++j) {
          const double* x = s.gt3d.data() + (t * kHandJoints + j) * 3;
          const Eigen::Vector2d uv = project(d.rig.cameras[v], Eigen::Vector3d(x[0], x[1], x[2]));
          const std::size_t o = ((t * d.rig.size() + v) * kHandJoints + j) * 2;
          CHECK(s.gt2d[o] == uv.x());
          CHECK(s.gt2d[o + 1] == uv.y());
        }
}

TEST_CASE("corruption profiles") {
  Array gt(Shape{50, 4, kHandJoints, 2});
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(40, 216);
  for (auto& v : gt.values()) v = u(rng);

  SECTION("zero corruption is the identity") {
    const auto c = corrupt(gt, CorruptionProfile::named("gt"), 4);
    CHECK(same_bits(c.pseudo, gt));
    for (double v : c.conf.values()) CHECK(v == 1.0);
  }

  SECTION("reproducible from seed and profile") {
    const auto p = CorruptionProfile::named("detector-weak");
    const auto a = corrupt(gt, p, 4), b = corrupt(gt, p, 4), c = corrupt(gt, p, 5);
    CHECK(same_bits(a.pseudo, b.pseudo));
    CHECK(same_bits(a.conf, b.conf));
    CHECK_FALSE(same_bits(a.pseudo, c.pseudo));
  }

  SECTION("gaussian noise has the requested spread") {
    CorruptionProfile p;
    p.name = "sigma3";
    p.sigma = 3.0;
    Array many(Shape{1, 1, 10000, 2});
    for (auto& v : many.values()) v = 128.0;
    const auto c = corrupt(many, p, 8);
    for (int k = 0; k < 2; ++k) {
      double s = 0, s2 = 0;
      for (std::size_t i = 0; i < 10000; ++i) {
        const double e = c.pseudo[2 * i + static_cast<std::size_t>(k)] - 128.0;
        s += e;
        s2 += e * e;
      }
      const double sd = std::sqrt(s2 / 10000 - (s / 10000) * (s / 10000));
      CHECK(sd >= 2.8);
      CHECK(sd <= 3.2);
    }
  }

  SECTION("confidence anti-correlates with error") {
    for (const char* name : {"detector-weak", "detector-strong"}) {
      const auto c = corrupt(gt, CorruptionProfile::named(name), 6);
      std::vector<double> conf, err;
      for (std::size_t i = 0; i < c.conf.size(); ++i) {
        conf.push_back(c.conf[i]);
        err.push_back(std::hypot(c.pseudo[2 * i] - gt[2 * i], c.pseudo[2 * i + 1] - gt[2 * i + 1]));
      }
      CAPTURE(name);
      CHECK(pearson(ranks(conf), ranks(err)) < -0.5);
    }
  }

  SECTION("outliers stay in frame") {
    CorruptionProfile p = CorruptionProfile::named("detector-weak");
    p.outlier_prob = 1.0;
    p.outlier_mag = 500.0;
    const auto c = corrupt(gt, p, 2);
    for (double v : c.pseudo.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 255.0);
    }
  }

  SECTION("weak dominates strong") {
    const auto w = CorruptionProfile::named("detector-weak"), s = CorruptionProfile::named("detector-strong");
    CHECK(w.sigma > s.sigma);
    CHECK(w.outlier_prob > s.outlier_prob);
    CHECK(w.outlier_mag > s.outlier_mag);
    CHECK(w.occlusion_prob > s.occlusion_prob);
    CHECK(w.occlusion_inflation > s.occlusion_inflation);
    CHECK(w.occlusion_conf < s.occlusion_conf);
    double ew = 0, es = 0;
    const auto cw = corrupt(gt, w, 1), cs = corrupt(gt, s, 1);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      ew += std::abs(cw.pseudo[i] - gt[i]);
      es += std::abs(cs.pseudo[i] - gt[i]);
    }
    CHECK(ew > es);
  }

  SECTION("invalid profiles") {
    CorruptionProfile p;
    p.outlier_prob = 1.5;
    CHECK_THROWS_AS(corrupt(gt, p, 1), ContractError);
    p = CorruptionProfile{};
    p.sigma = -1;
    CHECK_THROWS_AS(p.validate(), ContractError);
    CHECK_THROWS_AS(CorruptionProfile::named("openpose"), ContractError);
  }
}

TEST_CASE("dataset container") {
  const Dataset d = small_dataset(3);

  SECTION("roundtrip is bit-exact") {
    const auto path = std::filesystem::temp_directory_path() / "mvh_test_roundtrip.mvhd";
    write_dataset(d, path);
    const Dataset r = read_dataset(path);
    std::filesystem::remove(path);
    CHECK(r.seed == d.seed);
    CHECK(r.frame_size == d.frame_size);
    CHECK(r.profile.name == d.profile.name);
    CHECK(r.profile.sigma == d.profile.sigma);
    CHECK(r.profile.conf_noise == d.profile.conf_noise);
    REQUIRE(r.rig.size() == d.rig.size());
    for (std::size_t v = 0; v < d.rig.size(); ++v) {
      CHECK(r.rig.cameras[v].R == d.rig.cameras[v].R);
      CHECK(r.rig.cameras[v].t == d.rig.cameras[v].t);
      CHECK(r.rig.cameras[v].cx == d.rig.cameras[v].cx);
      CHECK(r.rig.view_ids[v] == d.rig.view_ids[v]);
    }
    CHECK(r.skeleton.parents == d.skeleton.parents);
    for (std::size_t j = 0; j < kHandJoints; ++j) CHECK(r.skeleton.bones[j] == d.skeleton.bones[j]);
    REQUIRE(r.sequences.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(r.sequences[i].seed == d.sequences[i].seed);
      CHECK(same_bits(r.sequences[i].params, d.sequences[i].params));
      CHECK(same_bits(r.sequences[i].gt3d, d.sequences[i].gt3d));
      CHECK(same_bits(r.sequences[i].gt2d, d.sequences[i].gt2d));
      CHECK(same_bits(r.sequences[i].pseudo, d.sequences[i].pseudo));
      CHECK(same_bits(r.sequences[i].conf, d.sequences[i].conf));
    }
    CHECK(encode_dataset(r) == encode_dataset(d));
  }

  SECTION("every single-byte corruption is detected") {
    const std::string bytes = encode_dataset(d);
    std::mt19937_64 rng(0);
    std::uniform_int_distribution<std::size_t> pos(0, bytes.size() - 1);
    std::uniform_int_distribution<int> flip(1, 255);
    for (int trial = 0; trial < 200; ++trial) {
      std::string bad = bytes;
      bad[pos(rng)] ^= static_cast<char>(flip(rng));
      CHECK_THROWS_AS(decode_dataset(bad), DatasetError);
    }
  }

  SECTION("truncation and version mismatch") {
    const std::string bytes = encode_dataset(d);
    CHECK_THROWS_AS(decode_dataset(bytes.substr(0, bytes.size() - 9)), DatasetError);
    CHECK_THROWS_AS(decode_dataset(""), DatasetError);
    std::string v2 = bytes.substr(0, bytes.size() - 4);
    v2[v2.find(' ') + 1] = '2';
    put_u32_le(v2, crc32_of(v2.data(), v2.size()));
    CHECK_THROWS_WITH(decode_dataset(v2), Catch::Matchers::ContainsSubstring("version"));
    CHECK_THROWS_AS(read_dataset("/nonexistent/none.mvhd"), DatasetError);
  }

  SECTION("empty dataset") {
    Dataset e = d;
    e.sequences.clear();
    const Dataset r = decode_dataset(encode_dataset(e));
    CHECK(r.sequences.empty());
    std::size_t n = 0;
    for ([[maybe_unused]] const auto& s : r.sequences) ++n;
    CHECK(n == 0);
  }

  SECTION("crc matches the published check value") {
    const char* check = "123456789";
    CHECK(crc32_of(check, 9) == 0xCBF43926u);
  }
}
