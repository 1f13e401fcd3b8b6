#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <limits>

#include "mvh/synth.hpp"
#include "mvh/trainer.hpp"

using namespace mvh;

namespace {

Dataset small_data(std::size_t sequences, std::size_t frames, std::uint64_t seed, const std::string& profile = "detector-weak") {
  GenerateConfig gc;
  gc.sequences = sequences;
  gc.frames = frames;
  gc.seed = seed;
  gc.profile = profile;
  return generate_dataset(gc);
}

TrainConfig small_config() {
  TrainConfig c;
  c.batch = 1;
  c.chunk = 4;
  c.epochs = 3;
  c.blocks = 2;
  c.hypotheses = 2;
  c.window = 3;
  return c;
}

bool same_store(const ParamStore& a, const ParamStore& b) {
  if (a.names() != b.names() || a.step_count() != b.step_count()) return false;
  for (const auto& [name, e] : a.entries()) {
    const auto& f = b.entries().at(name);
    for (auto [x, y] : {std::pair{&e.value, &f.value}, {&e.m, &f.m}, {&e.v, &f.v}})
      if (x->shape() != y->shape() || std::memcmp(x->data(), y->data(), x->size() * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("windows replicate the sequence ends") {
  const auto one = make_windows(1, 5);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == std::vector<std::size_t>{0, 0, 0, 0, 0});
  const auto ten = make_windows(10, 5);
  CHECK(ten.size() == 10);
  CHECK(ten[0] == std::vector<std::size_t>{0, 0, 0, 1, 2});
  CHECK(ten[5] == std::vector<std::size_t>{3, 4, 5, 6, 7});
  CHECK(ten[9] == std::vector<std::size_t>{7, 8, 9, 9, 9});
  for (std::size_t f = 0; f < 10; ++f) CHECK(ten[f][2] == f);
  CHECK(make_windows(4, 1)[3] == std::vector<std::size_t>{3});
  CHECK_THROWS_AS(make_windows(0, 5), ContractError);
  CHECK_THROWS_AS(make_windows(5, 4), ContractError);
}

TEST_CASE("config text") {
  TrainConfig c;
  apply_config(c, "# comment\nepochs = 3\n  lr=0.002  \nprofile = detector-strong\nw_nll = 0.5\n\nviews = 6 # trailing\n");
  CHECK(c.epochs == 3);
  CHECK(c.lr == 0.002);
  CHECK(c.profile == "detector-strong");
  CHECK(c.weights.nll == 0.5);
  CHECK(c.views == 6);

  TrainConfig back;
  apply_config(back, config_text(c));
  CHECK(config_text(back) == config_text(c));
  c.lr = 0.1 + 0.2;  // not a short decimal
  apply_config(back, config_text(c));
  CHECK(back.lr == c.lr);

  TrainConfig d;
  CHECK_THROWS_AS(apply_config(d, "epoch = 3"), ConfigError);
  CHECK_THROWS_AS(apply_config(d, "epochs = three"), ConfigError);
  CHECK_THROWS_AS(apply_config(d, "epochs = -1"), ConfigError);
  CHECK_THROWS_AS(apply_config(d, "epochs 3"), ConfigError);
  CHECK_THROWS_AS(apply_config(d, "window = 4"), ConfigError);
  CHECK_THROWS_AS(apply_config(d, "views = 1"), ConfigError);
  CHECK_THROWS_AS(apply_config(d, "profile = blurry"), ConfigError);
  CHECK_THROWS_AS(apply_config(d, "w_nll = -1"), ConfigError);
  CHECK(config_text(d) == config_text(TrainConfig{}));
  CHECK_THROWS_AS(load_config("/nonexistent/cfg"), ConfigError);

  TrainConfig p;
  p.use_full_schedule();
  CHECK(p.epochs == 30);
  CHECK(p.batch == 8);
  CHECK(p.lr == 3e-4);
  CHECK(p.decay_epoch == 20);
}

TEST_CASE("frame blocks") {
  const Dataset d = small_data(2, 10, 3);
  const Sequence& s = d.sequences[1];
  const std::vector<std::size_t> views{1, 3};
  const FrameBlock b = sequence_block(s, views, 0, 4, 5);
  CHECK(b.frames() == 6);
  CHECK(b.views() == 2);
  REQUIRE(b.windows.size() == 4);
  CHECK(b.windows[0] == std::vector<std::size_t>{0, 0, 0, 1, 2});
  CHECK(b.windows[3] == std::vector<std::size_t>{1, 2, 3, 4, 5});
  // view 1 of the block is camera 3
  CHECK(b.pseudo[((2 * 2 + 1) * kJoints + 4) * 2] == s.pseudo[((2 * 8 + 3) * kJoints + 4) * 2]);
  CHECK(b.conf[(2 * 2 + 1) * kJoints + 4] == s.conf[(2 * 8 + 3) * kJoints + 4]);
  CHECK(b.input.storage() == b.pseudo.storage());

  Rng rng(1);
  const FrameBlock j = sequence_block(s, views, 6, 10, 5, 2.0, &rng);
  CHECK(j.frames() == 6);
  CHECK(j.windows[3] == std::vector<std::size_t>{3, 4, 5, 5, 5});
  CHECK(j.pseudo.storage() == sequence_block(s, views, 6, 10, 5).pseudo.storage());
  CHECK(j.input.storage() != j.pseudo.storage());

  const FrameBlock m = merge_blocks({b, j});
  CHECK(m.frames() == 12);
  CHECK(m.windows.size() == 8);
  CHECK(m.windows[4] == std::vector<std::size_t>{6, 7, 8, 9, 10});
  CHECK(m.input[b.input.size()] == j.input[0]);
  CHECK_THROWS_AS(sequence_block(s, {0, 8}, 0, 4, 5), ContractError);
  CHECK_THROWS_AS(sequence_block(s, views, 4, 4, 5), ContractError);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const Dataset d = small_data(2, 8, 1);
  TrainConfig c = small_config();
  c.lr = 0.0;
  Trainer t(c, d);
  const ParamStore before = t.store();
  for (int i = 0; i < 3; ++i) t.step();
  for (const auto& name : before.names()) {
    const Array& a = before.value(name);
    const Array& b = t.store().value(name);
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("checkpoints are deterministic and survive a roundtrip") {
  const Dataset d = small_data(2, 8, 1);
  TrainConfig c = small_config();
  Trainer a(c, d), b(c, d);
  for (int i = 0; i < 3; ++i) {
    const LossRecord ra = a.step(), rb = b.step();
    CHECK(loss_csv_row(ra) == loss_csv_row(rb));
  }
  const std::string ea = encode_checkpoint(a.checkpoint()), eb = encode_checkpoint(b.checkpoint());
  CHECK(ea == eb);

  c.seed = 1;
  Trainer other(c, d);
  other.step();
  CHECK(encode_checkpoint(other.checkpoint()) != ea);

  const Checkpoint back = decode_checkpoint(ea);
  CHECK(back.step == 3);
  CHECK(config_text(back.config) == config_text(a.checkpoint().config));
  CHECK(same_store(back.store, a.store()));
  CHECK(encode_checkpoint(back) == ea);

  const auto dir = std::filesystem::temp_directory_path() / "mvh_ckpt_test";
  std::filesystem::create_directories(dir);
  write_checkpoint(a.checkpoint(), dir / "a.ckpt");
  CHECK(encode_checkpoint(read_checkpoint(dir / "a.ckpt")) == ea);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(read_checkpoint(dir / "missing"), CheckpointError);

  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::string bad = ea;
    const std::size_t at = rng() % bad.size();
    bad[at] = static_cast<char>(bad[at] ^ (1 + rng() % 255));
    CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  }
  CHECK_THROWS_AS(decode_checkpoint(ea.substr(0, ea.size() / 2)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(""), CheckpointError);
}

TEST_CASE("resuming matches an uninterrupted run") {
  const Dataset d = small_data(2, 8, 2);
  TrainConfig c = small_config();
  Trainer straight(c, d);
  std::vector<std::string> rows;
  for (int i = 0; i < 10; ++i) rows.push_back(loss_csv_row(straight.step()));

  Trainer first(c, d);
  for (int i = 0; i < 5; ++i) first.step();
  Trainer resumed(decode_checkpoint(encode_checkpoint(first.checkpoint())), d);
  CHECK(resumed.steps_done() == 5);
  for (int i = 5; i < 10; ++i) CHECK(loss_csv_row(resumed.step()) == rows[static_cast<std::size_t>(i)]);
  CHECK(encode_checkpoint(resumed.checkpoint()) == encode_checkpoint(straight.checkpoint()));
  CHECK(straight.steps_per_epoch() == 4);
}

TEST_CASE("training stops at the planned step count") {
  const Dataset d = small_data(2, 8, 2);
  TrainConfig c = small_config();
  c.max_steps = 3;
  Trainer t(c, d);
  CHECK(t.total_steps() == 3);
  std::size_t seen = 0;
  t.run([&](const LossRecord& r) {
    CHECK(r.step == seen);
    ++seen;
  });
  CHECK(seen == 3);
  CHECK(t.done());
  CHECK_THROWS(t.step());

  c.max_steps = 0;
  c.decay_epoch = 1;
  Trainer u(c, d);
  CHECK(u.total_steps() == 12);
  std::vector<double> lrs;
  u.run([&](const LossRecord& r) { lrs.push_back(r.lr); });
  CHECK(lrs.front() == c.lr);
  CHECK(lrs.back() == c.lr / 10.0);
}

TEST_CASE("non-finite loss aborts with the last good state") {
  Dataset d = small_data(2, 8, 4);
  // finite, but its squared residual overflows
  d.sequences[1].pseudo[100] = 1e300;
  TrainConfig c = small_config();
  Trainer t(c, d);
  Checkpoint before = t.checkpoint();
  bool aborted = false;
  try {
    while (!t.done()) {
      before = t.checkpoint();
      t.step();
    }
  } catch (const TrainingAborted& e) {
    aborted = true;
    CHECK(e.last_good.step == before.step);
    CHECK(encode_checkpoint(e.last_good) == encode_checkpoint(before));
    for (const auto& [name, entry] : e.last_good.store.entries()) CHECK(entry.value.all_finite());
  }
  CHECK(aborted);
}

TEST_CASE("overfitting one sequence drives the 2D loss down") {
  // clean labels and no jitter: noisy ones leave a floor set by the noise
  const Dataset d = small_data(1, 8, 6, "gt");
  TrainConfig c;
  c.jitter = 0.0;
  c.batch = 1;
  c.chunk = 8;
  c.epochs = 200;
  c.decay_epoch = 200;
  c.blocks = 2;
  c.window = 3;
  Trainer t(c, d);
  std::vector<double> p2;
  t.run([&](const LossRecord& r) { p2.push_back(r.proj2d); });
  REQUIRE(p2.size() == 200);
  INFO("first " << p2.front() << " last " << p2.back());
  CHECK(p2.back() * 10.0 <= p2.front());
}

TEST_CASE("evaluation") {
  const Dataset train = small_data(2, 8, 1);
  GenerateConfig gc;
  gc.sequences = 2;
  gc.frames = 6;
  gc.seed = 1;
  gc.first_sequence = 50;
  const Dataset test = generate_dataset(gc);
  TrainConfig c = small_config();
  c.max_steps = 2;
  Trainer t(c, train);
  t.run();
  const MetricReport a = evaluate(t.checkpoint(), test, {});
  const MetricReport b = evaluate(t.model(), t.store(), c.window, test, {first_views(4), 0});
  CHECK(a.frames == 12);
  CHECK(a.mpjpe == b.mpjpe);
  CHECK(a.pa_j <= a.mpjpe);
  CHECK(a.mpjpe > 0.0);
  CHECK(std::isfinite(a.conf_error_spearman));
  CHECK(evaluate(t.checkpoint(), test, {{0, 5, 7}, 0}).frames == 12);
  CHECK_THROWS_AS(evaluate(t.checkpoint(), test, {{2}, 0}), ContractError);

  const std::string header = report_csv_header(), row = report_csv_row("x", 4, a);
  CHECK(std::count(header.begin(), header.end(), ',') == std::count(row.begin(), row.end(), ','));
  CHECK(loss_csv_header().size() > 0);
}

TEST_CASE("baseline triangulation") {
  const Dataset gt = small_data(3, 10, 1, "gt");
  CHECK(baseline_dlt(gt, first_views(4)).mpjpe < 1e-3);
  CHECK(baseline_dlt(gt, first_views(2)).mpjpe < 1e-3);
  CHECK_THROWS_AS(baseline_dlt(gt, {1}), ContractError);

  double weak = 0, strong = 0, two = 0, eight = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Dataset w = small_data(4, 20, seed, "detector-weak");
    const Dataset s = small_data(4, 20, seed, "detector-strong");
    weak += baseline_dlt(w, first_views(4)).mpjpe;
    strong += baseline_dlt(s, first_views(4)).mpjpe;
    two += baseline_dlt(w, first_views(2)).mpjpe;
    eight += baseline_dlt(w, first_views(8)).mpjpe;
  }
  CHECK(weak > strong);
  CHECK(two >= eight);
}
