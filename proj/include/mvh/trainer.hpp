#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mvh/dataset.hpp"
#include "mvh/metrics.hpp"
#include "mvh/param_store.hpp"
#include "mvh/pipeline.hpp"

namespace mvh {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 4;        ///< sequence chunks per step
  std::size_t chunk = 8;        ///< consecutive centre frames per chunk
  double lr = 1e-3;
  std::size_t decay_epoch = 7;  ///< learning rate drops tenfold from this epoch on
  std::size_t window = 5;       ///< T, odd
  std::size_t blocks = 4;       ///< K
  std::size_t hypotheses = 4;   ///< M
  std::size_t views = 4;        ///< V, the first V cameras of the rig
  LossWeights weights;
  std::uint64_t seed = 0;
  std::string profile = "detector-weak";
  double jitter = 5.0;          ///< px, Gaussian label jitter on the frontend input
  std::size_t max_steps = 0;    ///< stop early when non-zero
  std::size_t conf_warmup = 0;  ///< steps that weight the 2D loss with detector confidence
  // Dataset sizes used by the command line tool.
  std::size_t train_sequences = 200;
  std::size_t test_sequences = 50;
  std::size_t frames = 30;

  void validate() const;
  /// Original recipe: 30 epochs, batch 8, lr 3e-4 dropping tenfold at epoch 20.
  void use_full_schedule();
};

/// Flat `key = value` text, '#' starts a comment. Unknown keys and malformed values throw ConfigError.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
void apply_config(TrainConfig& cfg, const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string config_text(const TrainConfig& cfg);

ModelConfig model_config(const TrainConfig& cfg);

/// One window per frame; frame indices clamp at the sequence ends.
std::vector<std::vector<std::size_t>> make_windows(std::size_t frames, std::size_t window);

std::vector<std::size_t> first_views(std::size_t v);

/// Frames [begin, end) of a sequence as centres, with the neighbours their windows need.
/// `views` selects cameras. Labels are jittered when `jitter_rng` is given.
FrameBlock sequence_block(const Sequence& seq, const std::vector<std::size_t>& views, std::size_t begin,
                          std::size_t end, std::size_t window, double jitter = 0.0, Rng* jitter_rng = nullptr);
/// Concatenates blocks, shifting window indices.
FrameBlock merge_blocks(const std::vector<FrameBlock>& blocks);

struct LossRecord {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double total = 0.0, hmap = 0.0, hm2d = 0.0, nll = 0.0, proj2d = 0.0;
};
std::string loss_csv_header();
std::string loss_csv_row(const LossRecord& r);

struct Checkpoint {
  TrainConfig config;
  ParamStore store;
  std::uint64_t step = 0;
};
/// Versioned text header (config, step, parameter names and shapes), little-endian
/// float64 blocks for values and Adam moments, trailing CRC-32.
std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes);
void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a loss or gradient goes non-finite; carries the state before the failing step.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, Checkpoint last_good)
      : std::runtime_error(what), last_good(std::move(last_good)) {}
  Checkpoint last_good;
};

/// Single-threaded trainer. Everything random is derived from (seed, step) or
/// (seed, epoch), so a resumed run continues exactly like an uninterrupted one.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const Dataset& data);
  Trainer(const Checkpoint& ckpt, const Dataset& data);

  bool done() const { return step_ >= total_steps_; }
  LossRecord step();
  /// Runs to completion, calling `on_step` after every step.
  void run(const std::function<void(const LossRecord&)>& on_step = {});

  Checkpoint checkpoint() const { return {cfg_, store_, step_}; }
  const ParamStore& store() const { return store_; }
  const HandModel& model() const { return model_; }
  std::size_t steps_per_epoch() const { return plan_size_; }
  std::uint64_t total_steps() const { return total_steps_; }
  std::uint64_t steps_done() const { return step_; }

 private:
  struct Chunk {
    std::size_t sequence, begin, end;
  };
  void init();
  std::vector<Chunk> epoch_plan(std::size_t epoch) const;

  TrainConfig cfg_;
  const Dataset* data_;
  ParamStore store_;
  HandModel model_;
  Rig rig_;
  std::vector<std::size_t> views_;
  std::vector<Chunk> chunks_;
  std::size_t plan_size_ = 0;
  std::uint64_t total_steps_ = 0;
  std::uint64_t step_ = 0;
};

struct EvalOptions {
  std::vector<std::size_t> views;  ///< empty: the first cfg.views cameras
  std::uint64_t seed = 0;          ///< hypothesis draws
};

/// Refined centre-frame queries against gt 3D for every frame of every sequence;
/// confidence against the decoded 2D error for every view-joint.
MetricReport evaluate(const HandModel& model, const ParamStore& store, std::size_t window, const Dataset& test,
                      const EvalOptions& opt);
MetricReport evaluate(const Checkpoint& ckpt, const Dataset& test, const EvalOptions& opt);

/// Detector-confidence-weighted DLT of the raw labels, per frame.
MetricReport baseline_dlt(const Dataset& test, const std::vector<std::size_t>& views);

/// CSV with a fixed column order for metric reports.
std::string report_csv_header();
std::string report_csv_row(const std::string& setting, std::size_t views, const MetricReport& r);

}  // namespace mvh
