#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <random>

#include "mvh/grad_check.hpp"
#include "mvh/pipeline.hpp"
#include "mvh/synth.hpp"
#include "mvh/trainer.hpp"

using namespace mvh;

namespace {

struct Fixture {
  Dataset data;
  FrameBlock block;
  Rig rig;
  ParamStore store;
  HandModel model;

  Fixture(std::uint64_t seed, std::size_t views, std::size_t window, bool perturb) {
    GenerateConfig gc;
    gc.sequences = 1;
    gc.frames = 8;
    gc.seed = seed;
    data = generate_dataset(gc);
    const auto v = first_views(views);
    rig = data.rig.subset(v);
    Rng jr(seed);
    block = sequence_block(data.sequences[0], v, 3, 5, window, 1.5, &jr);
    ModelConfig mc;
    mc.hypotheses = 2;
    mc.stpt.blocks = 2;
    model = HandModel(store, mc, seed);
    if (perturb) {
      // zero-initialised output layers would hide whole branches from the check
      std::mt19937_64 rng(seed + 11);
      std::normal_distribution<double> n(0.0, 0.03);
      for (const auto& name : store.names())
        for (double& x : store.value(name).values()) x += n(rng);
    }
  }

  ForwardResult run(Tape& t, ParamStore& s, std::uint64_t draw) const {
    Rng rng(draw);
    return model.forward(Ctx{&t, &s}, block, rig, rng);
  }
};

bool same_bits(const Array& a, const Array& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("model output shapes") {
  Fixture fx(1, 4, 5, false);
  Tape t;
  const ForwardResult r = fx.run(t, fx.store, 0);
  const std::size_t nf = fx.block.frames();
  CHECK(nf == 6);  // frames 1..6: centres 3 and 4 with two neighbours each side
  CHECK(r.refined.shape() == Shape{2, 5, kJoints, 3});
  CHECK(r.initial.shape() == Shape{2, 5, kJoints, 3});
  CHECK(r.skeleton.shape() == Shape{2, kJoints, 3});
  CHECK(r.decoded.shape() == Shape{nf, 4, kJoints, 2});
  CHECK(r.confidence.shape() == Shape{nf, 4, kJoints});
  CHECK(r.centres == std::vector<std::size_t>{2, 3});
  CHECK(std::isfinite(r.total.item()));
  for (double c : r.confidence.values()) {
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);
  }
}

TEST_CASE("untrained transformer leaves the lifted queries untouched") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Fixture fx(seed, 4, 5, false);
    Tape t;
    const ForwardResult r = fx.run(t, fx.store, seed);
    double worst = 0.0;
    for (std::size_t i = 0; i < r.initial.size(); ++i)
      worst = std::max(worst, std::abs(r.initial[i] - r.refined.value()[i]));
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("forward is deterministic and does not touch parameters") {
  Fixture fx(4, 2, 3, true);
  ParamStore before = fx.store;
  Tape t1, t2;
  const ForwardResult a = fx.run(t1, fx.store, 9), b = fx.run(t2, fx.store, 9);
  CHECK(a.total.item() == b.total.item());
  CHECK(same_bits(a.refined.value(), b.refined.value()));
  for (const auto& name : before.names()) CHECK(same_bits(before.value(name), fx.store.value(name)));
}

TEST_CASE("rejects malformed blocks") {
  Fixture fx(1, 2, 3, false);
  Tape t;
  FrameBlock bad = fx.block;
  bad.windows[0][0] = 99;
  Rng rng(0);
  CHECK_THROWS_AS(fx.model.forward(Ctx{&t, &fx.store}, bad, fx.rig, rng), ContractError);
  bad = fx.block;
  bad.windows[0].pop_back();
  CHECK_THROWS_AS(fx.model.forward(Ctx{&t, &fx.store}, bad, fx.rig, rng), ContractError);
  CHECK_THROWS_AS(fx.model.forward(Ctx{&t, &fx.store}, fx.block, fx.data.rig, rng), ContractError);
}

TEST_CASE("fused refiner matches the composed graph") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 0.2);
  ParamStore store;
  Rng init(1);
  const HeatmapGrid grid;
  HeatmapRefiner ref(store, "r", grid, 4, init);
  for (const auto& name : store.names())
    for (double& x : store.value(name).values()) x += n(rng);
  Array maps(Shape{5, grid.cells()});
  for (double& x : maps.values()) x = std::abs(n(rng));
  store.add("x", maps);  // a parameter, so its gradient is collected too
  Array w(Shape{5, grid.cells()});
  for (double& x : w.values()) x = n(rng);

  Tape ta;
  const Ctx ca{&ta, &store};
  Var ya = ref(ca, ca.p("x"));
  ta.backward(sum(mul(ya, ca.c(w))));
  const Array fused = ya.value();
  std::map<std::string, Array> fused_g;
  for (const auto& name : store.names()) fused_g[name] = store.grad(name);
  store.zero_grad();

  Tape tb;
  const Ctx cb{&tb, &store};
  Var xb = cb.p("x");
  Var hidden = tanh(add(matmul(xb, cb.p("r.down.w")), cb.p("r.down.b")));
  Var gain = scale(tanh(scale(add(matmul(hidden, cb.p("r.up.w")), cb.p("r.up.b")), 1.0 / 3.0)), 3.0);
  Var yb = mul(xb, exp(gain));
  tb.backward(sum(mul(yb, cb.c(w))));

  for (std::size_t i = 0; i < fused.size(); ++i) CHECK(fused[i] == Catch::Approx(yb.value()[i]).margin(1e-13));
  for (const auto& name : store.names()) {
    const Array& g = store.grad(name);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(fused_g[name][i] == Catch::Approx(g[i]).margin(1e-12));
  }
}

TEST_CASE("loss gradients match finite differences") {
  const char* terms[] = {"hmap", "hm2d", "nll", "proj2d", "total"};
  for (std::uint64_t seed : {1u, 2u, 3u})
    for (const char* term : terms) {
      DYNAMIC_SECTION("seed " << seed << " " << term) {
        Fixture fx(seed, 2, 3, true);
        DetachCache cache;
        GradCheckOptions opt;
        opt.max_entries_per_param = 2;
        opt.seed = seed;
        const std::string which = term;
        // parameters upstream of each term; the rest have zero gradient by construction
        if (which == "hmap" || which == "hm2d") opt.prefixes = {"refiner"};
        if (which == "nll") opt.prefixes = {"refiner", "graph", "flow"};
        const auto report = grad_check(
            [&](Tape& t) {
              cache.rewind();
              t.set_detach_cache(&cache);
              const ForwardResult r = fx.run(t, fx.store, seed + 100);
              if (which == "hmap") return r.terms.hmap;
              if (which == "hm2d") return r.terms.hm2d;
              if (which == "nll") return r.terms.nll;
              if (which == "proj2d") return r.terms.proj2d;
              return r.total;
            },
            fx.store, opt);
        INFO(report.to_string());
        CHECK(report.passed);
        CHECK(report.max_rel_error < 1e-4);
      }
    }
}

TEST_CASE("frontend terms reach only their upstream parameters") {
  Fixture fx(2, 2, 3, true);
  const auto upstream = [](const std::string& name, std::initializer_list<const char*> groups) {
    for (const char* g : groups)
      if (name.rfind(g, 0) == 0) return true;
    return false;
  };
  for (const char* term : {"hmap", "hm2d", "nll"}) {
    const std::string which = term;
    fx.store.zero_grad();
    Tape t;
    const ForwardResult r = fx.run(t, fx.store, 1);
    t.backward(which == "hmap" ? r.terms.hmap : which == "hm2d" ? r.terms.hm2d : r.terms.nll);
    for (const auto& name : fx.store.names()) {
      const bool up = which == "nll" ? upstream(name, {"refiner", "graph", "flow"}) : upstream(name, {"refiner"});
      if (up) continue;
      INFO(which << " " << name);
      for (double g : fx.store.grad(name).values()) CHECK(g == 0.0);
    }
  }
  fx.store.zero_grad();
}
