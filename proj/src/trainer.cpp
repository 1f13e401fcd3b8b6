#include "mvh/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include "mvh/synth.hpp"

namespace mvh {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' needs a non-negative integer, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("config: '" + key + "' needs a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' needs a number, got '" + v + "'");
  }
  if (used != v.size() || !std::isfinite(x)) throw ConfigError("config: '" + key + "' needs a number, got '" + v + "'");
  return x;
}

// Every key with a reader and a writer, in the order config_text prints them.
struct Field {
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

std::string num(double v) {
  std::ostringstream o;
  o << std::setprecision(17) << v;
  return o.str();
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    const auto sz = [&](const char* k, std::size_t TrainConfig::*m) {
      v.push_back({k, [k, m](TrainConfig& c, const std::string& s) { c.*m = to_size(k, s); },
                   [m](const TrainConfig& c) { return std::to_string(c.*m); }});
    };
    const auto dbl = [&](const char* k, auto get_ref) {
      v.push_back({k, [k, get_ref](TrainConfig& c, const std::string& s) { get_ref(c) = to_double(k, s); },
                   [get_ref](const TrainConfig& c) { return num(get_ref(const_cast<TrainConfig&>(c))); }});
    };
    sz("epochs", &TrainConfig::epochs);
    sz("batch", &TrainConfig::batch);
    sz("chunk", &TrainConfig::chunk);
    dbl("lr", [](TrainConfig& c) -> double& { return c.lr; });
    sz("decay_epoch", &TrainConfig::decay_epoch);
    sz("window", &TrainConfig::window);
    sz("blocks", &TrainConfig::blocks);
    sz("hypotheses", &TrainConfig::hypotheses);
    sz("views", &TrainConfig::views);
    dbl("w_hmap", [](TrainConfig& c) -> double& { return c.weights.hmap; });
    dbl("w_hm2d", [](TrainConfig& c) -> double& { return c.weights.hm2d; });
    dbl("w_nll", [](TrainConfig& c) -> double& { return c.weights.nll; });
    dbl("w_proj2d", [](TrainConfig& c) -> double& { return c.weights.proj2d; });
    v.push_back({"seed", [](TrainConfig& c, const std::string& s) { c.seed = to_size("seed", s); },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }});
    v.push_back({"profile", [](TrainConfig& c, const std::string& s) { c.profile = s; },
                 [](const TrainConfig& c) { return c.profile; }});
    dbl("jitter", [](TrainConfig& c) -> double& { return c.jitter; });
    sz("max_steps", &TrainConfig::max_steps);
    sz("conf_warmup", &TrainConfig::conf_warmup);
    sz("train_sequences", &TrainConfig::train_sequences);
    sz("test_sequences", &TrainConfig::test_sequences);
    sz("frames", &TrainConfig::frames);
    return v;
  }();
  return f;
}

Eigen::Vector3d joint(const Array& a, std::size_t offset) {
  return {a[offset], a[offset + 1], a[offset + 2]};
}

}  // namespace

void TrainConfig::validate() const {
  const auto bad = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (epochs == 0 || batch == 0 || chunk == 0 || window == 0 || blocks == 0 || hypotheses == 0)
    bad("epochs, batch, chunk, window, blocks and hypotheses must be positive");
  if (window % 2 == 0) bad("window must be odd, got " + std::to_string(window));
  if (window > 7) bad("window is limited to 7 frames");
  if (views < 2) bad("at least 2 views are needed");
  if (!(lr >= 0.0)) bad("lr must be non-negative");
  if (!(jitter >= 0.0)) bad("jitter must be non-negative");
  if (frames == 0) bad("frames must be positive");
  try {
    CorruptionProfile::named(profile);
    weights.validate();
  } catch (const ContractError& e) {
    bad(e.what());
  }
}

void TrainConfig::use_full_schedule() {
  epochs = 30;
  batch = 8;
  lr = 3e-4;
  decay_epoch = 20;
}

void apply_config(TrainConfig& out, const std::string& text) {
  TrainConfig cfg = out;  // untouched on error
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto& f = fields();
    const auto it = std::find_if(f.begin(), f.end(), [&](const Field& x) { return key == x.key; });
    if (it == f.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->set(cfg, value);
  }
  cfg.validate();
  out = std::move(cfg);
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  TrainConfig cfg;
  apply_config(cfg, ss.str());
  return cfg;
}

std::string config_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

ModelConfig model_config(const TrainConfig& cfg) {
  ModelConfig m;
  m.hypotheses = cfg.hypotheses;
  m.stpt.blocks = cfg.blocks;
  m.weights = cfg.weights;
  return m;
}

std::vector<std::vector<std::size_t>> make_windows(std::size_t frames, std::size_t window) {
  if (frames == 0) throw ContractError("make_windows: empty sequence");
  if (window % 2 == 0) throw ContractError("make_windows: window length must be odd");
  const auto h = static_cast<std::ptrdiff_t>(window / 2), last = static_cast<std::ptrdiff_t>(frames) - 1;
  std::vector<std::vector<std::size_t>> out(frames);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::ptrdiff_t k = -h; k <= h; ++k)
      out[f].push_back(static_cast<std::size_t>(std::clamp(static_cast<std::ptrdiff_t>(f) + k, std::ptrdiff_t{0}, last)));
  return out;
}

std::vector<std::size_t> first_views(std::size_t v) {
  std::vector<std::size_t> out(v);
  for (std::size_t i = 0; i < v; ++i) out[i] = i;
  return out;
}

FrameBlock sequence_block(const Sequence& seq, const std::vector<std::size_t>& views, std::size_t begin,
                          std::size_t end, std::size_t window, double jitter, Rng* jitter_rng) {
  const std::size_t n = seq.frames(), nv_all = seq.conf.dim(1), nj = kJoints;
  if (begin >= end || end > n) throw ContractError("sequence_block: bad frame range");
  for (std::size_t v : views)
    if (v >= nv_all) throw ContractError("sequence_block: view " + std::to_string(v) + " not in the dataset");
  const std::size_t h = window / 2;
  const std::size_t lo = begin >= h ? begin - h : 0, hi = std::min(n, end + h);
  const std::size_t nf = hi - lo, nv = views.size();
  FrameBlock b;
  b.pseudo = Array(Shape{nf, nv, nj, 2});
  b.conf = Array(Shape{nf, nv, nj});
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t v = 0; v < nv; ++v)
      for (std::size_t j = 0; j < nj; ++j) {
        const std::size_t src = ((lo + f) * nv_all + views[v]) * nj + j, dst = (f * nv + v) * nj + j;
        b.pseudo[2 * dst] = seq.pseudo[2 * src];
        b.pseudo[2 * dst + 1] = seq.pseudo[2 * src + 1];
        b.conf[dst] = seq.conf[src];
      }
  b.input = b.pseudo;
  if (jitter_rng != nullptr && jitter > 0.0) {
    std::normal_distribution<double> nd(0.0, jitter);
    for (auto& x : b.input.values()) x += nd(*jitter_rng);
  }
  const auto all = make_windows(n, window);
  for (std::size_t f = begin; f < end; ++f) {
    std::vector<std::size_t> w;
    for (std::size_t i : all[f]) w.push_back(i - lo);
    b.windows.push_back(std::move(w));
  }
  return b;
}

FrameBlock merge_blocks(const std::vector<FrameBlock>& blocks) {
  if (blocks.empty()) throw ContractError("merge_blocks: nothing to merge");
  if (blocks.size() == 1) return blocks[0];
  std::size_t nf = 0;
  const std::size_t nv = blocks[0].views();
  for (const auto& b : blocks) {
    if (b.views() != nv) throw ContractError("merge_blocks: view counts differ");
    nf += b.frames();
  }
  FrameBlock out;
  out.input = Array(Shape{nf, nv, kJoints, 2});
  out.pseudo = Array(Shape{nf, nv, kJoints, 2});
  out.conf = Array(Shape{nf, nv, kJoints});
  out.detector_confidence = blocks[0].detector_confidence;
  std::size_t off = 0;
  for (const auto& b : blocks) {
    std::copy(b.input.storage().begin(), b.input.storage().end(), out.input.data() + off * nv * kJoints * 2);
    std::copy(b.pseudo.storage().begin(), b.pseudo.storage().end(), out.pseudo.data() + off * nv * kJoints * 2);
    std::copy(b.conf.storage().begin(), b.conf.storage().end(), out.conf.data() + off * nv * kJoints);
    for (auto w : b.windows) {
      for (auto& i : w) i += off;
      out.windows.push_back(std::move(w));
    }
    off += b.frames();
  }
  return out;
}

std::string loss_csv_header() { return "step,epoch,lr,total,hmap,hm2d,nll,proj2d"; }

std::string loss_csv_row(const LossRecord& r) {
  std::ostringstream o;
  o << r.step << ',' << r.epoch << ',' << num(r.lr) << ',' << num(r.total) << ',' << num(r.hmap) << ',' << num(r.hm2d)
    << ',' << num(r.nll) << ',' << num(r.proj2d);
  return o.str();
}

// Trainer

Trainer::Trainer(const TrainConfig& cfg, const Dataset& data) : cfg_(cfg), data_(&data) {
  cfg_.validate();
  model_ = HandModel(store_, model_config(cfg_), derive_seed(cfg_.seed, 103, 0));
  init();
}

Trainer::Trainer(const Checkpoint& ckpt, const Dataset& data) : cfg_(ckpt.config), data_(&data) {
  cfg_.validate();
  model_ = HandModel(store_, model_config(cfg_), derive_seed(cfg_.seed, 103, 0));
  if (store_.names() != ckpt.store.names()) throw CheckpointError("checkpoint parameters do not match the model");
  for (const auto& [name, e] : ckpt.store.entries())
    if (e.value.shape() != store_.value(name).shape())
      throw CheckpointError("checkpoint parameter '" + name + "' has the wrong shape");
  store_ = ckpt.store;
  step_ = ckpt.step;
  init();
}

void Trainer::init() {
  if (data_->rig.size() < cfg_.views)
    throw ContractError("dataset has " + std::to_string(data_->rig.size()) + " views, config wants " +
                        std::to_string(cfg_.views));
  views_ = first_views(cfg_.views);
  rig_ = data_->rig.subset(views_);
  for (std::size_t s = 0; s < data_->sequences.size(); ++s) {
    const std::size_t n = data_->sequences[s].frames();
    for (std::size_t b = 0; b < n; b += cfg_.chunk) chunks_.push_back({s, b, std::min(n, b + cfg_.chunk)});
  }
  if (chunks_.empty()) throw ContractError("training dataset has no frames");
  plan_size_ = (chunks_.size() + cfg_.batch - 1) / cfg_.batch;
  total_steps_ = static_cast<std::uint64_t>(plan_size_) * cfg_.epochs;
  if (cfg_.max_steps > 0) total_steps_ = std::min<std::uint64_t>(total_steps_, cfg_.max_steps);
}

std::vector<Trainer::Chunk> Trainer::epoch_plan(std::size_t epoch) const {
  std::vector<Chunk> order = chunks_;
  Rng rng(derive_seed(cfg_.seed, 102, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

LossRecord Trainer::step() {
  if (done()) throw std::logic_error("trainer already finished");
  const std::size_t epoch = static_cast<std::size_t>(step_ / plan_size_), k = static_cast<std::size_t>(step_ % plan_size_);
  const auto plan = epoch_plan(epoch);
  Rng jitter_rng(derive_seed(cfg_.seed, 100, step_));
  Rng draw_rng(derive_seed(cfg_.seed, 101, step_));
  std::vector<FrameBlock> parts;
  for (std::size_t i = k * cfg_.batch; i < std::min(plan.size(), (k + 1) * cfg_.batch); ++i) {
    const Chunk& c = plan[i];
    parts.push_back(sequence_block(data_->sequences[c.sequence], views_, c.begin, c.end, cfg_.window, cfg_.jitter,
                                   &jitter_rng));
  }
  FrameBlock block = merge_blocks(parts);
  block.detector_confidence = step_ < cfg_.conf_warmup;

  LossRecord rec;
  rec.step = step_;
  rec.epoch = epoch;
  rec.lr = epoch >= cfg_.decay_epoch ? cfg_.lr / 10.0 : cfg_.lr;
  try {
    Tape tape;
    const Ctx ctx{&tape, &store_};
    const ForwardResult r = model_.forward(ctx, block, rig_, draw_rng);
    rec.total = r.total.item();
    rec.hmap = r.terms.hmap.item();
    rec.hm2d = r.terms.hm2d.item();
    rec.nll = r.terms.nll.item();
    rec.proj2d = r.terms.proj2d.item();
    tape.backward(r.total);
    store_.adam_step(rec.lr);
  } catch (const NonFiniteLoss& e) {
    store_.zero_grad();
    throw TrainingAborted(std::string(e.what()) + " at step " + std::to_string(step_), checkpoint());
  } catch (const NonFiniteGradient& e) {
    store_.zero_grad();
    throw TrainingAborted(std::string(e.what()) + " at step " + std::to_string(step_), checkpoint());
  }
  ++step_;
  return rec;
}

void Trainer::run(const std::function<void(const LossRecord&)>& on_step) {
  while (!done()) {
    const LossRecord r = step();
    if (on_step) on_step(r);
  }
}

// Evaluation

MetricReport evaluate(const HandModel& model, const ParamStore& store, std::size_t window, const Dataset& test,
                      const EvalOptions& opt) {
  const std::vector<std::size_t> views = opt.views;
  if (views.size() < 2) throw ContractError("evaluate needs at least 2 views");
  const Rig rig = test.rig.subset(views);
  ParamStore local = store;  // forward never writes, but keep the caller's store out of reach
  MetricAccumulator acc;
  const std::size_t nv_all = test.rig.size(), nv = views.size(), nj = kJoints;
  for (std::size_t s = 0; s < test.sequences.size(); ++s) {
    const Sequence& seq = test.sequences[s];
    const std::size_t n = seq.frames();
    if (n == 0) continue;
    const FrameBlock block = sequence_block(seq, views, 0, n, window);
    Rng rng(derive_seed(opt.seed, 200, s));
    Tape tape;
    const ForwardResult r = model.forward(Ctx{&tape, &local}, block, rig, rng);
    const std::size_t tc = window / 2;
    const Array& refined = r.refined.value();
    for (std::size_t w = 0; w < n; ++w) {
      const std::size_t f = r.centres[w];
      std::vector<Eigen::Vector3d> pred(nj), gt(nj);
      for (std::size_t j = 0; j < nj; ++j) {
        pred[j] = joint(refined, ((w * window + tc) * nj + j) * 3);
        gt[j] = joint(seq.gt3d, (f * nj + j) * 3);
      }
      acc.add_frame(pred, gt);
      for (std::size_t v = 0; v < nv; ++v)
        for (std::size_t j = 0; j < nj; ++j) {
          const std::size_t i = (f * nv + v) * nj + j, g = (f * nv_all + views[v]) * nj + j;
          acc.add_confidence(r.confidence[i], std::hypot(r.decoded[2 * i] - seq.gt2d[2 * g],
                                                         r.decoded[2 * i + 1] - seq.gt2d[2 * g + 1]));
        }
    }
  }
  return acc.report();
}

MetricReport evaluate(const Checkpoint& ckpt, const Dataset& test, const EvalOptions& opt) {
  ParamStore store;
  const HandModel model(store, model_config(ckpt.config), derive_seed(ckpt.config.seed, 103, 0));
  if (store.names() != ckpt.store.names()) throw CheckpointError("checkpoint parameters do not match the model");
  EvalOptions o = opt;
  if (o.views.empty()) o.views = first_views(ckpt.config.views);
  return evaluate(model, ckpt.store, ckpt.config.window, test, o);
}

MetricReport baseline_dlt(const Dataset& test, const std::vector<std::size_t>& views) {
  if (views.size() < 2) throw ContractError("baseline_dlt needs at least 2 views");
  const Rig rig = test.rig.subset(views);
  const std::size_t nv_all = test.rig.size(), nv = views.size(), nj = kJoints;
  MetricAccumulator acc;
  for (const Sequence& seq : test.sequences)
    for (std::size_t f = 0; f < seq.frames(); ++f) {
      std::vector<Eigen::Vector3d> pred(nj), gt(nj);
      for (std::size_t j = 0; j < nj; ++j) {
        std::vector<Eigen::Vector2d> obs(nv);
        std::vector<double> conf(nv);
        for (std::size_t v = 0; v < nv; ++v) {
          const std::size_t i = (f * nv_all + views[v]) * nj + j;
          obs[v] = {seq.pseudo[2 * i], seq.pseudo[2 * i + 1]};
          conf[v] = seq.conf[i];
        }
        pred[j] = triangulate_dlt(obs, conf, rig);
        gt[j] = joint(seq.gt3d, (f * nj + j) * 3);
      }
      acc.add_frame(pred, gt);
      for (std::size_t v = 0; v < nv; ++v)
        for (std::size_t j = 0; j < nj; ++j) {
          const std::size_t i = (f * nv_all + views[v]) * nj + j;
          acc.add_confidence(seq.conf[i], std::hypot(seq.pseudo[2 * i] - seq.gt2d[2 * i],
                                                     seq.pseudo[2 * i + 1] - seq.gt2d[2 * i + 1]));
        }
    }
  return acc.report();
}

std::string report_csv_header() {
  std::string h = "setting,views,frames,mpjpe,pa_j,auc,conf_error_spearman";
  for (std::size_t j = 0; j < kJoints; ++j) h += ",joint" + std::to_string(j);
  return h;
}

std::string report_csv_row(const std::string& setting, std::size_t views, const MetricReport& r) {
  std::ostringstream o;
  o << setting << ',' << views << ',' << r.frames << ',' << num(r.mpjpe) << ',' << num(r.pa_j) << ',' << num(r.auc)
    << ',' << num(r.conf_error_spearman);
  for (double v : r.per_joint) o << ',' << num(v);
  return o.str();
}

}  // namespace mvh
