#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mvh/graph.hpp"
#include "mvh/hand.hpp"
#include "test_util.hpp"

using namespace mvh;
using Catch::Matchers::WithinAbs;

namespace {

struct Fixture {
  Rng rng{3};
  ParamStore store;
  GraphConfig cfg;
  GraphInteraction graph;
  Fixture() : graph(store, "g", cfg, rng) {}
};

Array random_joints(std::mt19937_64& rng, std::size_t g, std::size_t v, double lo = 0.0, double hi = 256.0) {
  return testutil::random_array({g, v, 21, 2}, rng, lo, hi);
}

}  // namespace

TEST_CASE("tokens") {
  Fixture f;
  std::mt19937_64 rng(1);
  Array joints = random_joints(rng, 1, 2);
  for (std::size_t i = 0; i < 42; ++i) joints[42 + i] = joints[i];  // view 1 = view 0
  Array conf = testutil::random_array({1, 2, 21}, rng, 0.001, 1.0);
  for (std::size_t j = 0; j < 21; ++j) conf[21 + j] = conf[j];
  Tape t;
  Ctx ctx{&t, &f.store};
  Var tok = f.graph.build_tokens(ctx, ctx.c(joints), conf);
  const std::size_t d = 4 * f.cfg.pe_freqs + f.cfg.id_dim + 1;
  REQUIRE(tok.shape() == Shape{1, 2, 21, d});
  const Array& tv = tok.value();
  for (std::size_t i = 0; i < 21 * d; ++i) CHECK(tv[i] == tv[21 * d + i]);
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t j = 0; j < 21; ++j) CHECK(tv[((v * 21) + j) * d + d - 1] == conf[v * 21 + j]);

  Array bad(Shape{1, 2, 20, 2});
  CHECK_THROWS_AS(f.graph.build_tokens(ctx, ctx.c(bad), Array(Shape{1, 2, 20})), ContractError);
}

TEST_CASE("tokens and fused features stay finite under fuzzing") {
  Fixture f;
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    Array joints = random_joints(rng, 1, 1, -20.0, 276.0);
    if (i % 10 == 0)
      for (std::size_t k = 0; k < joints.size(); ++k) joints[k] = (k % 2 == 0) == (i % 20 == 0) ? 0.0 : 255.0;
    Array conf = testutil::random_array({1, 1, 21}, rng, 1e-3, 1.0);
    Tape t;
    Ctx ctx{&t, &f.store};
    Var tok = f.graph.build_tokens(ctx, ctx.c(joints), conf);
    REQUIRE(tok.value().all_finite());
    if (i % 50 == 0) REQUIRE(f.graph.forward(ctx, ctx.c(joints), conf).fused.value().all_finite());
  }
}

TEST_CASE("sinusoidal encoding layout") {
  Tape t;
  Var e = sinusoidal_encoding(t.constant(Array(Shape{1, 2}, {0.5, -0.25})), 3);
  REQUIRE(e.shape() == Shape{1, 12});
  for (int f = 0; f < 3; ++f) {
    const double w = std::ldexp(M_PI / 2, f);
    CHECK_THAT(e.value()[f], WithinAbs(std::sin(w * 0.5), 1e-15));
    CHECK_THAT(e.value()[3 + f], WithinAbs(std::cos(w * 0.5), 1e-15));
    CHECK_THAT(e.value()[6 + f], WithinAbs(std::sin(-w * 0.25), 1e-15));
    CHECK_THAT(e.value()[9 + f], WithinAbs(std::cos(-w * 0.25), 1e-15));
  }
}

TEST_CASE("attention by hand") {
  Tape t;
  // single token
  auto one = scaled_dot_attention(t.constant(Array(Shape{1, 1, 2}, {0.3, -1.0})),
                                  t.constant(Array(Shape{1, 1, 2}, {2.0, 5.0})),
                                  t.constant(Array(Shape{1, 1, 3}, {1.0, 2.0, 3.0})));
  CHECK(one.weights.value()[0] == 1.0);
  CHECK(one.out.value().storage() == std::vector<double>{1.0, 2.0, 3.0});

  // identical keys -> uniform rows
  auto same = scaled_dot_attention(t.constant(Array(Shape{1, 3, 2}, {1, 2, 3, 4, 5, 6})),
                                   t.constant(Array(Shape{1, 3, 2}, {0.7, 0.1, 0.7, 0.1, 0.7, 0.1})),
                                   t.constant(Array(Shape{1, 3, 1}, {1, 2, 3})));
  for (double w : same.weights.value().values()) CHECK_THAT(w, WithinAbs(1.0 / 3.0, 1e-15));

  // two tokens: q = [[1, 0], [0, 2]], k = [[1, 1], [0, 1]], v = [[1, 0], [0, 1]], d = 2
  auto two = scaled_dot_attention(t.constant(Array(Shape{1, 2, 2}, {1, 0, 0, 2})),
                                  t.constant(Array(Shape{1, 2, 2}, {1, 1, 0, 1})),
                                  t.constant(Array(Shape{1, 2, 2}, {1, 0, 0, 1})));
  const double r = std::sqrt(2.0);
  // row 0 scores: [1, 0] / r ; row 1 scores: [2, 2] / r
  const double a00 = std::exp(1 / r) / (std::exp(1 / r) + 1.0);
  CHECK_THAT(two.weights.value()[0], WithinAbs(a00, 1e-12));
  CHECK_THAT(two.weights.value()[1], WithinAbs(1 - a00, 1e-12));
  CHECK_THAT(two.weights.value()[2], WithinAbs(0.5, 1e-12));
  CHECK_THAT(two.out.value()[0], WithinAbs(a00, 1e-12));
  CHECK_THAT(two.out.value()[1], WithinAbs(1 - a00, 1e-12));
  CHECK_THAT(two.out.value()[3], WithinAbs(0.5, 1e-12));
}

TEST_CASE("casa with a single token returns value projection plus residual") {
  Rng rng(4);
  ParamStore store;
  GraphConfig cfg;
  cfg.joints = 1;
  GraphInteraction g(store, "g", cfg, rng);
  std::mt19937_64 r(5);
  const Array x = testutil::random_array({1, 1, 1, cfg.model_dim}, r);
  const Array conf(Shape{1, 1, 1}, {0.6});
  Tape t;
  Ctx ctx{&t, &store};
  auto att = g.casa_layer(ctx, 0, ctx.c(x), conf);
  CHECK(att.weights.value()[0] == 1.0);
  const Array& w = store.value("g.layer0.v.w");
  for (std::size_t o = 0; o < cfg.model_dim; ++o) {
    double proj = store.value("g.layer0.v.b")[o] + 0.6 * w.at(cfg.model_dim, o);
    for (std::size_t i = 0; i < cfg.model_dim; ++i) proj += x[i] * w.at(i, o);
    CHECK_THAT(att.out.value()[o], WithinAbs(x[o] + proj, 1e-12));
  }
}

TEST_CASE("adaptive GCN propagation") {
  Tape t;
  std::mt19937_64 rng(6);
  const Array x = testutil::random_array({2, 3, 5, 4}, rng);
  Array eye5(Shape{5, 5}, 0.0), eye4(Shape{4, 4}, 0.0);
  for (std::size_t i = 0; i < 5; ++i) eye5.at(i, i) = 1.0;
  for (std::size_t i = 0; i < 4; ++i) eye4.at(i, i) = 1.0;
  Var y = agcn_propagate(t.constant(x), t.constant(eye5), t.constant(eye4));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.value()[i] == 2.0 * x[i]);

  Var norm = normalize_adjacency(t.constant(testutil::random_array({21, 21}, rng, -3, 3)));
  for (std::size_t r = 0; r < 21; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 21; ++c) s += norm.value().at(r, c);
    CHECK_THAT(s, WithinAbs(1.0, 1e-12));
  }

  // 3-node chain 0-1-2 with bones and diagonal at 1, softmax rows.
  Array chain(Shape{3, 3}, {1, 1, 0, 1, 1, 1, 0, 1, 1});
  Array feats(Shape{1, 3, 2}, {1, 0, 0, 1, 1, 1});
  Array w(Shape{2, 2}, {1, 0, 0, 1});
  Var out = agcn_propagate(t.constant(feats), normalize_adjacency(t.constant(chain)), t.constant(w));
  const double e = std::exp(1.0);
  const double end = e / (2 * e + 1), endf = 1 / (2 * e + 1);  // end rows: two e's and one 1
  // node 0: weights (end, end, endf) over nodes (0, 1, 2)
  CHECK_THAT(out.value()[0], WithinAbs(1 + end * 1 + end * 0 + endf * 1, 1e-12));
  CHECK_THAT(out.value()[1], WithinAbs(0 + end * 0 + end * 1 + endf * 1, 1e-12));
  // node 1: all three neighbours equal weight
  CHECK_THAT(out.value()[2], WithinAbs(0 + 2.0 / 3.0, 1e-12));
  CHECK_THAT(out.value()[3], WithinAbs(1 + 2.0 / 3.0, 1e-12));
  // node 2: weights (endf, end, end)
  CHECK_THAT(out.value()[4], WithinAbs(1 + endf * 1 + end * 0 + end * 1, 1e-12));
  CHECK_THAT(out.value()[5], WithinAbs(1 + endf * 0 + end * 1 + end * 1, 1e-12));
}

TEST_CASE("fuse") {
  Fixture f;
  for (const auto& n : {"g.fuse.l1.b", "g.fuse.l2.b"}) {
    std::mt19937_64 r(std::string(n).size());
    f.store.value(n) = testutil::random_array(f.store.value(n).shape(), r);
  }
  Tape t;
  Ctx ctx{&t, &f.store};
  Var out = f.graph.fuse(ctx, ctx.c(Array(Shape{2, 3, 21, f.cfg.model_dim}, 0.0)));
  REQUIRE(out.shape() == Shape{2, 3, f.cfg.fused_dim});
  const Array& b1 = f.store.value("g.fuse.l1.b");
  const Array& w2 = f.store.value("g.fuse.l2.w");
  const Array& b2 = f.store.value("g.fuse.l2.b");
  for (std::size_t o = 0; o < f.cfg.fused_dim; ++o) {
    double expect = b2[o];
    for (std::size_t h = 0; h < b1.size(); ++h) expect += std::max(0.0, b1[h]) * w2.at(h, o);
    CHECK_THAT(out.value()[o], WithinAbs(expect, 1e-12));
    CHECK(out.value()[o] == out.value()[5 * f.cfg.fused_dim + o]);
  }
}

TEST_CASE("joint permutation with permuted embeddings leaves fused features unchanged") {
  Fixture f;
  std::mt19937_64 rng(8);
  const Array joints = random_joints(rng, 2, 3, 40.0, 216.0);
  const Array conf = testutil::random_array({2, 3, 21}, rng, 0.01, 1.0);
  std::vector<std::size_t> perm(21);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  Array pj(joints.shape()), pc(conf.shape());
  for (std::size_t gv = 0; gv < 6; ++gv)
    for (std::size_t j = 0; j < 21; ++j) {
      pc[gv * 21 + j] = conf[gv * 21 + perm[j]];
      for (int c = 0; c < 2; ++c) pj[(gv * 21 + j) * 2 + c] = joints[(gv * 21 + perm[j]) * 2 + c];
    }
  ParamStore permuted = f.store;
  Array& emb = permuted.value(f.graph.embedding_name());
  const Array& emb0 = f.store.value(f.graph.embedding_name());
  for (std::size_t j = 0; j < 21; ++j)
    for (std::size_t d = 0; d < emb.cols(); ++d) emb.at(j, d) = emb0.at(perm[j], d);
  Array& adj = permuted.value(f.graph.adjacency_name());
  const Array& adj0 = f.store.value(f.graph.adjacency_name());
  for (std::size_t a = 0; a < 21; ++a)
    for (std::size_t b = 0; b < 21; ++b) adj.at(a, b) = adj0.at(perm[a], perm[b]);

  Tape t1, t2;
  Ctx c1{&t1, &f.store}, c2{&t2, &permuted};
  auto o1 = f.graph.forward(c1, c1.c(joints), conf);
  auto o2 = f.graph.forward(c2, c2.c(pj), pc);
  REQUIRE(o1.fused.shape() == Shape{2, 3, 64});
  for (std::size_t i = 0; i < o1.fused.size(); ++i)
    CHECK_THAT(o1.fused.value()[i], WithinAbs(o2.fused.value()[i], 1e-9));
}

TEST_CASE("attention rows sum to one and graph gradients check") {
  Fixture f;
  std::mt19937_64 rng(9);
  const Array joints = random_joints(rng, 1, 2, 40.0, 216.0);
  const Array conf = testutil::random_array({1, 2, 21}, rng, 0.01, 1.0);
  {
    Tape t;
    Ctx ctx{&t, &f.store};
    auto out = f.graph.forward(ctx, ctx.c(joints), conf);
    REQUIRE(out.attention.size() == 2);
    for (const auto& a : out.attention)
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < a.cols(); ++c) s += a.at(r, c);
        CHECK_THAT(s, WithinAbs(1.0, 1e-12));
      }
  }
  const Array readout = testutil::random_array({1, 2, 64}, rng);
  ParamStore& store = f.store;
  store.add("joints", joints);
  GradCheckOptions opt;
  opt.max_entries_per_param = 12;
  auto report = grad_check(
      [&](Tape& t) {
        Ctx ctx{&t, &store};
        return sum(mul(f.graph.forward(ctx, ctx.p("joints"), conf).fused, ctx.c(readout)));
      },
      store, opt);
  INFO(report.to_string());
  CHECK(report.passed);
}
