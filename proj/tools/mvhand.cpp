// Command line front end: data generation, training, evaluation and sweeps.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "mvh/diagnostics.hpp"
#include "mvh/synth.hpp"
#include "mvh/trainer.hpp"

using namespace mvh;
namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 64;
constexpr int kNoCheckpoint = 2;
constexpr int kAborted = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::size_t> views;
  std::string out = ".";
  std::string data;
};

void add_common(CLI::App* app, Common& c, bool views = true) {
  app->add_option("--config", c.config, "flat key = value config file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "seed for data and training");
  if (views) app->add_option("--views", c.views, "camera indices, e.g. --views 0 1 2 3")->delimiter(',');
  app->add_option("--out", c.out, "output directory");
}

TrainConfig make_config(const Common& c) {
  TrainConfig cfg;
  if (!c.config.empty()) cfg = load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

Dataset split(const TrainConfig& cfg, const std::string& data_dir, bool test) {
  if (!data_dir.empty()) return read_dataset(fs::path(data_dir) / (test ? "test.mvh" : "train.mvh"));
  GenerateConfig g;
  g.seed = cfg.seed;
  g.frames = cfg.frames;
  g.profile = cfg.profile;
  g.sequences = test ? cfg.test_sequences : cfg.train_sequences;
  g.first_sequence = test ? cfg.train_sequences : 0;
  return generate_dataset(g);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

std::vector<std::size_t> view_list(const Common& c, std::size_t fallback) {
  return c.views.empty() ? first_views(fallback) : c.views;
}

void print_report(const std::string& label, const MetricReport& r) {
  std::cout << label << ": frames " << r.frames << "  MPJPE " << r.mpjpe << " mm  PA-J " << r.pa_j << " mm  AUC "
            << r.auc << "  conf/err spearman " << r.conf_error_spearman << "\n";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Trains to completion, streaming the loss curve; returns the final checkpoint.
Checkpoint train_run(Trainer& trainer, const fs::path& loss_csv, bool append) {
  std::ofstream csv(loss_csv, append ? std::ios::app : std::ios::trunc);
  if (!append) csv << loss_csv_header() << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  trainer.run([&](const LossRecord& r) {
    csv << loss_csv_row(r) << "\n";
    if (r.step % 50 == 0 || r.step + 1 == trainer.total_steps())
      std::cerr << "step " << r.step + 1 << "/" << trainer.total_steps() << "  total " << r.total << "  proj2d "
                << r.proj2d << "  " << seconds_since(t0) << " s\n";
  });
  return trainer.checkpoint();
}

int cmd_generate(const Common& c) {
  const TrainConfig cfg = make_config(c);
  fs::create_directories(c.out);
  write_dataset(split(cfg, "", false), fs::path(c.out) / "train.mvh");
  write_dataset(split(cfg, "", true), fs::path(c.out) / "test.mvh");
  std::cout << "wrote " << cfg.train_sequences << " train and " << cfg.test_sequences << " test sequences to "
            << c.out << "\n";
  return 0;
}

int cmd_train(const Common& c, bool full, const std::string& resume) {
  TrainConfig cfg = make_config(c);
  if (full) cfg.use_full_schedule();
  if (!c.views.empty()) {
    if (c.views != first_views(c.views.size()))
      throw ConfigError("train uses the first V cameras; pass --views 0,1,...,V-1");
    cfg.views = c.views.size();
  }
  cfg.validate();
  const Dataset data = split(cfg, c.data, false);
  fs::create_directories(c.out);
  const fs::path out(c.out);
  std::optional<Trainer> trainer;
  if (!resume.empty())
    trainer.emplace(read_checkpoint(resume), data);
  else
    trainer.emplace(cfg, data);
  write_text(out / "config.txt", config_text(trainer->checkpoint().config));
  try {
    const Checkpoint ck = train_run(*trainer, out / "loss.csv", !resume.empty());
    write_checkpoint(ck, out / "model.ckpt");
    std::cout << "trained " << ck.step << " steps; checkpoint " << (out / "model.ckpt").string() << "\n";
  } catch (const TrainingAborted& e) {
    write_checkpoint(e.last_good, out / "last_good.ckpt");
    std::cerr << "training aborted: " << e.what() << "; last good state in " << (out / "last_good.ckpt").string()
              << "\n";
    return kAborted;
  }
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt_path) {
  if (ckpt_path.empty() || !fs::exists(ckpt_path)) {
    std::cerr << "eval needs an existing --checkpoint\n";
    return kNoCheckpoint;
  }
  const Checkpoint ck = read_checkpoint(ckpt_path);
  TrainConfig cfg = ck.config;
  if (c.seed) cfg.seed = *c.seed;
  const Dataset test = split(cfg, c.data, true);
  EvalOptions opt;
  opt.views = view_list(c, ck.config.views);
  const MetricReport r = evaluate(ck, test, opt);
  const MetricReport b = baseline_dlt(test, opt.views);
  print_report("model", r);
  print_report("baseline", b);
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "metrics.csv", report_csv_header() + "\n" + report_csv_row("model", opt.views.size(), r) +
                                                  "\n" + report_csv_row("baseline_dlt", opt.views.size(), b) + "\n");
  return 0;
}

int cmd_triangulate(const Common& c) {
  const TrainConfig cfg = make_config(c);
  const Dataset test = split(cfg, c.data, true);
  const auto views = view_list(c, cfg.views);
  const MetricReport r = baseline_dlt(test, views);
  print_report("baseline", r);
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "triangulation.csv",
             report_csv_header() + "\n" + report_csv_row("baseline_dlt", views.size(), r) + "\n");
  return 0;
}

int cmd_sweep(const Common& c) {
  const TrainConfig base = make_config(c);
  const Dataset train = split(base, c.data, false);
  const Dataset test = split(base, c.data, true);
  struct Setting {
    std::string factor;
    std::size_t value;
  };
  std::vector<Setting> settings;
  for (std::size_t v : {2, 4, 6, 8}) settings.push_back({"views", v});
  for (std::size_t t : {1, 3, 5, 7}) settings.push_back({"window", t});
  for (std::size_t k : {1, 2, 3, 4}) settings.push_back({"blocks", k});

  fs::create_directories(c.out);
  std::ofstream csv(fs::path(c.out) / "sweep.csv");
  csv << "factor,value,views,window,blocks,steps,mpjpe,pa_j,auc,conf_error_spearman,baseline_mpjpe\n";
  for (const Setting& s : settings) {
    TrainConfig cfg = base;
    if (s.factor == "views") cfg.views = s.value;
    if (s.factor == "window") cfg.window = s.value;
    if (s.factor == "blocks") cfg.blocks = s.value;
    cfg.validate();
    if (train.rig.size() < cfg.views) throw ConfigError("dataset has fewer cameras than the sweep needs");
    std::cerr << "sweep " << s.factor << " = " << s.value << "\n";
    Trainer trainer(cfg, train);
    trainer.run();
    const auto views = first_views(cfg.views);
    const MetricReport r = evaluate(trainer.model(), trainer.store(), cfg.window, test, {views, 0});
    const MetricReport b = baseline_dlt(test, views);
    csv << s.factor << ',' << s.value << ',' << cfg.views << ',' << cfg.window << ',' << cfg.blocks << ','
        << trainer.steps_done() << ',' << r.mpjpe << ',' << r.pa_j << ',' << r.auc << ',' << r.conf_error_spearman
        << ',' << b.mpjpe << "\n";
    csv.flush();
  }
  return 0;
}

int cmd_gradcheck(const Common& c, std::size_t entries) {
  const std::uint64_t seed = c.seed.value_or(0);
  bool ok = true;
  for (const auto& term : loss_term_names()) {
    const GradCheckReport r = check_model_gradient(term, seed, entries);
    std::cout << term << ": max rel. error " << r.max_rel_error << (r.passed ? "  ok" : "  FAILED") << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

int cmd_plot_data(const Common& c, const std::string& ckpt_path, const std::string& loss_path, std::size_t smooth) {
  fs::create_directories(c.out);
  const fs::path out(c.out);
  if (!ckpt_path.empty()) {
    if (!fs::exists(ckpt_path)) {
      std::cerr << "no checkpoint at " << ckpt_path << "\n";
      return kNoCheckpoint;
    }
    const Checkpoint ck = read_checkpoint(ckpt_path);
    TrainConfig cfg = ck.config;
    if (c.seed) cfg.seed = *c.seed;
    const Dataset test = split(cfg, c.data, true);
    EvalOptions opt;
    opt.views = view_list(c, ck.config.views);
    const MetricReport r = evaluate(ck, test, opt);
    const MetricReport b = baseline_dlt(test, opt.views);
    std::ofstream pck(out / "pck.csv");
    pck << "threshold_mm,model,baseline_dlt\n";
    const auto th = pck_thresholds();
    for (std::size_t i = 0; i < th.size(); ++i) pck << th[i] << ',' << r.pck[i] << ',' << b.pck[i] << "\n";
  }
  if (!loss_path.empty()) {
    std::ifstream in(loss_path);
    if (!in) throw std::runtime_error("cannot read loss curve '" + loss_path + "'");
    std::string line;
    std::getline(in, line);
    if (line != loss_csv_header()) throw std::runtime_error("'" + loss_path + "' is not a loss curve");
    std::ofstream csv(out / "loss_smoothed.csv");
    csv << "step,total,proj2d,total_avg,proj2d_avg\n";
    std::vector<double> total, proj;
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
      if (f.size() != 8) throw std::runtime_error("malformed loss row: " + line);
      total.push_back(std::stod(f[3]));
      proj.push_back(std::stod(f[7]));
      const std::size_t n = total.size(), k = std::min(n, std::max<std::size_t>(smooth, 1));
      double st = 0, sp = 0;
      for (std::size_t i = n - k; i < n; ++i) {
        st += total[i];
        sp += proj[i];
      }
      csv << f[0] << ',' << f[3] << ',' << f[7] << ',' << st / k << ',' << sp / k << "\n";
    }
  }
  if (ckpt_path.empty() && loss_path.empty()) {
    std::cerr << "plot-data needs --checkpoint and/or --loss\n";
    return kUsage;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view hand keypoint lifting from noisy 2D labels"};
  app.require_subcommand(1);
  std::string ckpt, resume, loss;
  bool full = false;
  std::size_t entries = 2, smooth = 50;

  Common gen, tr, ev, tri, sw, gc, pd;
  CLI::App* g = app.add_subcommand("generate", "write train.mvh and test.mvh");
  add_common(g, gen, false);
  CLI::App* t = app.add_subcommand("train", "train a model, writing model.ckpt and loss.csv");
  add_common(t, tr);
  t->add_option("--data", tr.data, "directory with train.mvh (generated from the config when omitted)");
  t->add_flag("--full-schedule", full, "30 epochs, batch 8, lr 3e-4 decayed at epoch 20");
  t->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  CLI::App* e = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(e, ev);
  e->add_option("--data", ev.data, "directory with test.mvh");
  e->add_option("--checkpoint", ckpt, "model checkpoint");
  CLI::App* tg = app.add_subcommand("triangulate", "confidence-weighted DLT baseline on the test split");
  add_common(tg, tri);
  tg->add_option("--data", tri.data, "directory with test.mvh");
  CLI::App* s = app.add_subcommand("sweep", "train and evaluate over views, window length and block count");
  add_common(s, sw, false);
  s->add_option("--data", sw.data, "directory with train.mvh and test.mvh");
  CLI::App* gr = app.add_subcommand("gradcheck", "finite-difference check of every loss term");
  add_common(gr, gc, false);
  gr->add_option("--entries", entries, "entries checked per parameter array");
  CLI::App* p = app.add_subcommand("plot-data", "PCK curve and smoothed loss curve as CSV");
  add_common(p, pd);
  p->add_option("--data", pd.data, "directory with test.mvh");
  p->add_option("--checkpoint", ckpt, "model checkpoint for the PCK curve");
  p->add_option("--loss", loss, "loss.csv written by train");
  p->add_option("--smooth", smooth, "moving-average length");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << err.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr, full, resume);
    if (*e) return cmd_eval(ev, ckpt);
    if (*tg) return cmd_triangulate(tri);
    if (*s) return cmd_sweep(sw);
    if (*gr) return cmd_gradcheck(gc, entries);
    if (*p) return cmd_plot_data(pd, ckpt, loss, smooth);
  } catch (const ConfigError& err) {
    std::cerr << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return kUsage;
}
