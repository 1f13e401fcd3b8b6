#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include <Eigen/Geometry>

#include "mvh/geometry.hpp"
#include "mvh/metrics.hpp"

using namespace mvh;

namespace {

// Thresholds and counting written out longhand.
double brute_auc(const std::vector<double>& d) {
  double sum = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double t = 50.0 * i / 99.0;
    int in = 0;
    for (double x : d) in += x <= t ? 1 : 0;
    sum += static_cast<double>(in) / static_cast<double>(d.size());
  }
  return sum / 100.0;
}

std::vector<Eigen::Vector3d> random_hand(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 60.0);
  std::vector<Eigen::Vector3d> p(kJoints);
  for (auto& x : p) x = {n(rng), n(rng), n(rng)};
  return p;
}

}  // namespace

TEST_CASE("pck threshold grid") {
  const auto t = pck_thresholds();
  CHECK(t.front() == 0.0);
  CHECK(t.back() == 50.0);
  for (std::size_t i = 1; i < t.size(); ++i) CHECK(t[i] > t[i - 1]);
}

TEST_CASE("auc matches brute force") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 70.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> d(1 + rng() % 500);
    for (auto& x : d) x = u(rng);
    // some exact ties with grid points
    if (trial % 3 == 0) d[0] = 50.0 * 17 / 99.0;
    CHECK(std::abs(auc(d) - brute_auc(d)) < 1e-12);
  }
}

TEST_CASE("auc examples") {
  CHECK(auc(std::vector<double>(21, 0.0)) == 1.0);
  CHECK(auc(std::vector<double>(21, 50.5)) == 0.0);
  // 25 mm everywhere: thresholds from index 50 (25.25 mm) pass
  const auto t = pck_thresholds();
  int above = 0;
  for (double x : t) above += x > 25.0 ? 1 : 0;
  CHECK(std::abs(auc(std::vector<double>(21, 25.0)) - above / 100.0) < 1e-15);
  CHECK(above == 50);
}

TEST_CASE("spearman") {
  const std::vector<double> a{1, 2, 3, 4, 5}, b{10, 20, 30, 40, 50}, c{5, 4, 3, 2, 1};
  CHECK(spearman(a, b) == Catch::Approx(1.0));
  CHECK(spearman(a, c) == Catch::Approx(-1.0));
  // ties: ranks {0.5,0.5,2,3} vs {0,1,2,3}
  const std::vector<double> t{1, 1, 2, 3}, s{1, 2, 3, 4};
  const double r = spearman(t, s);
  CHECK(r == Catch::Approx(0.9486832980505138).epsilon(1e-12));
  CHECK(std::isnan(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3})));
  CHECK(std::isnan(spearman(std::vector<double>{1}, std::vector<double>{1})));
  CHECK_THROWS_AS(spearman(a, t), ContractError);
}

TEST_CASE("accumulator identities") {
  std::mt19937_64 rng(2);
  MetricAccumulator acc;
  for (int f = 0; f < 5; ++f) {
    const auto g = random_hand(rng);
    acc.add_frame(g, g);
  }
  const MetricReport r = acc.report();
  CHECK(r.frames == 5);
  CHECK(r.mpjpe == 0.0);
  CHECK(r.pa_j < 1e-9);
  CHECK(r.auc == 1.0);

  MetricAccumulator off;
  const auto g = random_hand(rng);
  std::vector<Eigen::Vector3d> p = g;
  for (auto& x : p) x += Eigen::Vector3d(0.0, 0.0, 60.0);
  off.add_frame(p, g);
  const MetricReport o = off.report();
  CHECK(o.mpjpe == Catch::Approx(60.0));
  CHECK(o.auc == 0.0);
  CHECK(o.pa_j < 1e-9);  // pure translation aligns away
  for (double j : o.per_joint) CHECK(j == Catch::Approx(60.0));
}

TEST_CASE("pa-j never exceeds mpjpe") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto g = random_hand(rng);
    std::vector<Eigen::Vector3d> p = g;
    const double noise = 1.0 + 30.0 * (trial % 7);
    for (auto& x : p) x += noise * Eigen::Vector3d(n(rng), n(rng), n(rng));
    // a few heavy outliers, where least squares alignment alone can lose to the identity
    if (trial % 4 == 0) p[trial % kJoints] += Eigen::Vector3d(400.0, -300.0, 200.0);
    MetricAccumulator acc;
    acc.add_frame(p, g);
    const MetricReport r = acc.report();
    CHECK(r.pa_j <= r.mpjpe);
  }
}

TEST_CASE("procrustes recovers a similarity") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = random_hand(rng);
    const Eigen::Matrix3d rot =
        Eigen::Quaterniond(Eigen::Vector4d(u(rng), u(rng), u(rng), u(rng)).normalized()).toRotationMatrix();
    const double s = 0.5 + u(rng) * u(rng) + 1.0;
    const Eigen::Vector3d t(100 * u(rng), 100 * u(rng), 100 * u(rng));
    std::vector<Eigen::Vector3d> p;
    for (const auto& x : g) p.push_back(s * rot * x + t);
    const ProcrustesResult r = procrustes_align(p, g);
    CHECK(r.mean_distance() < 1e-8);
    MetricAccumulator acc;
    acc.add_frame(p, g);
    CHECK(acc.report().pa_j < 1e-8);
  }
}

TEST_CASE("confidence correlation in report") {
  MetricAccumulator acc;
  for (int i = 0; i < 10; ++i) acc.add_confidence(1.0 - 0.1 * i, 1.0 * i);
  CHECK(acc.report().conf_error_spearman == Catch::Approx(-1.0));
  CHECK(std::isnan(MetricAccumulator().report().conf_error_spearman));
  CHECK_THROWS_AS(acc.add_frame(std::vector<Eigen::Vector3d>(20), std::vector<Eigen::Vector3d>(21)), ContractError);
}
