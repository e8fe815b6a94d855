#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "attrobf/data.hpp"
#include "attrobf/losses.hpp"
#include "attrobf/models.hpp"

namespace attrobf {

enum class DiscriminatorMode { bidirectional, d_attr, d_attr_plus_at };

std::string to_string(DiscriminatorMode mode);
DiscriminatorMode parse_discriminator_mode(const std::string& text);

struct TrainConfig {
  double lr_generator = 1e-4;
  double lr_discriminator = 5e-4;
  int64_t batch_size = 128;
  int64_t iters_stage1 = 300000;
  int64_t iters_stage2 = 100000;
  std::string decay = "linear_to_zero";
  double decay_start = 0.5;  // fraction of the run before the linear decay begins
  LossWeights weights;
  Margins margins;
  DiscriminatorMode discriminator_mode = DiscriminatorMode::bidirectional;
  uint64_t seed = 0;
  int64_t checkpoint_every = 0;  // 0 = final checkpoint only
  bool desk_scale_overrides = false;  // apply desk_scale() iteration counts and batch sizes
  int64_t d_steps = 1;           // discriminator updates per generator update
  bool stage2_update_discriminator = false;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  int64_t adversary_iters = 20000;
  double adversary_lr = 1e-3;
  int64_t adversary_batch = 128;
  double mixup_alpha = 1.0;
  int64_t log_every = 10;
  bool debug_checks = false;
  std::string out_dir;      // checkpoints and loss curves; empty = keep in memory only
  std::string resume_from;  // checkpoint to continue from

  /// Desk-scale values for the iteration counts and batch sizes.
  static TrainConfig desk_scale();

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  /// Applies the keys in kv on top of base; unknown keys throw ParseError.
  static TrainConfig from_map(const std::map<std::string, std::string>& kv, TrainConfig base);
  static TrainConfig from_map(const std::map<std::string, std::string>& kv) { return from_map(kv, TrainConfig{}); }
};

/// Constant until decay_start * total, then linear to zero at total.
double scheduled_lr(double base, int64_t iteration, int64_t total, double decay_start);

struct LossRecord {
  int64_t iteration;
  std::string term;
  double value;
  bool operator==(const LossRecord&) const = default;
};

class LossCurves {
 public:
  void add(int64_t iteration, const std::string& term, double value);
  const std::vector<LossRecord>& records() const { return records_; }
  /// Values of one term in iteration order.
  std::vector<double> series(const std::string& term) const;
  std::string to_csv() const;
  static LossCurves from_csv(const std::string& text);
  /// Appends records [from, end) to a CSV file, writing the header when the file is new.
  void append_csv(const std::filesystem::path& path, size_t from) const;

 private:
  std::vector<LossRecord> records_;
};

// ---------------------------------------------------------------------------
// Stage I
// ---------------------------------------------------------------------------

class Stage1Trainer {
 public:
  Stage1Trainer(TrainConfig cfg, const NetConfig& net, const AttrImageDataset& ds);
  /// Generic inputs: (N, C, H, W) images or (N, D) points for the mlp profile.
  Stage1Trainer(TrainConfig cfg, const NetConfig& net, torch::Tensor inputs, torch::Tensor labels,
                std::vector<std::string> attr_names);

  /// Continues a run saved by save(); cfg supplies iteration budget and paths.
  static Stage1Trainer resume(const std::filesystem::path& checkpoint, TrainConfig cfg, const AttrImageDataset& ds);

  /// One discriminator phase then one generator update. Returns every loss term.
  std::map<std::string, double> step();
  /// Steps until iteration() == cfg.iters_stage1, checkpointing on the way.
  void run();
  void save(const std::filesystem::path& path) const;

  /// Parameters that must never receive gradients; verified each step when debug_checks is on.
  /// Gradients they already hold (from their own training) are the baseline.
  void set_isolated_parameters(std::vector<torch::Tensor> params);

  int64_t iteration() const { return iter_; }
  Stage1Model& model() { return model_; }
  const LossCurves& curves() const { return curves_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  void init_optimizers();
  void flush(const std::filesystem::path& checkpoint);

  TrainConfig cfg_;
  torch::Tensor inputs_, labels_;
  Stage1Model model_;
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_d_;
  std::mt19937_64 rng_;
  int64_t iter_ = 0;
  LossCurves curves_;
  size_t flushed_ = 0;
  std::vector<torch::Tensor> isolated_;
  std::vector<torch::Tensor> isolated_grads_;
};

struct Stage1Outcome {
  Stage1Model model;
  LossCurves curves;
  std::filesystem::path checkpoint;  // empty when cfg.out_dir is empty
};

Stage1Outcome train_stage1(const TrainConfig& cfg, const NetConfig& net, const AttrImageDataset& ds);

// ---------------------------------------------------------------------------
// Stage II
// ---------------------------------------------------------------------------

class Stage2Trainer {
 public:
  Stage2Trainer(TrainConfig cfg, Stage1Model stage1, const AttrImageDataset& ds);

  std::map<std::string, double> step();
  void run();
  void save(const std::filesystem::path& path) const;

  int64_t iteration() const { return iter_; }
  Stage2Model& model() { return model_; }
  const LossCurves& curves() const { return curves_; }

  /// Last lambda map produced by step(), for range checks.
  const torch::Tensor& last_lambda() const { return last_lambda_; }

 private:
  TrainConfig cfg_;
  AttrImageDataset ds_;
  Stage2Model model_;
  std::unique_ptr<torch::optim::Adam> opt_f_, opt_d_;
  std::mt19937_64 rng_;
  int64_t iter_ = 0;
  LossCurves curves_;
  size_t flushed_ = 0;
  torch::Tensor last_lambda_;
};

struct Stage2Outcome {
  Stage2Model model;
  LossCurves curves;
  std::filesystem::path checkpoint;
};

Stage2Outcome train_stage2(const TrainConfig& cfg, const AttrImageDataset& ds,
                           const std::filesystem::path& stage1_checkpoint);
Stage2Outcome train_stage2(const TrainConfig& cfg, const AttrImageDataset& ds, Stage1Model stage1);

// ---------------------------------------------------------------------------
// Adversary
// ---------------------------------------------------------------------------

struct AdversaryOutcome {
  AdversaryModel model;
  LossCurves curves;
  std::filesystem::path checkpoint;
};

/// Trains the held-out classifier from scratch on ds. With mixup, inputs and
/// label vectors are blended with Beta(alpha, alpha) coefficients.
AdversaryOutcome train_adversary(const AttrImageDataset& ds, bool mixup, const TrainConfig& cfg,
                                 const NetConfig& net);

// ---------------------------------------------------------------------------
// Two-Gaussian toy
// ---------------------------------------------------------------------------

struct ToyOptions {
  int64_t hidden = 64;
  bool spectral_norm = false;
  int64_t grid_n = 41;
  double grid_margin = 1.0;
};

struct ToyModeResult {
  DiscriminatorMode mode;
  torch::Tensor source;      // (N, 2)
  torch::Tensor labels;      // (N)
  torch::Tensor translated;  // (N, 2), every point sent to the opposite class
  torch::Tensor grid;        // (G, 2) grid nodes
  torch::Tensor conf_pos;    // (G) D_pos (or D_attr) probability
  torch::Tensor conf_neg;    // (G) D_neg probability (equals conf_pos for single-head modes)
  LossCurves curves;
};

struct ToyReport {
  std::vector<ToyModeResult> modes;
  const ToyModeResult& get(DiscriminatorMode mode) const;
};

ToyReport train_toy(const TrainConfig& cfg, const LabeledPoints2D& toy, const ToyOptions& options = {});
ToyModeResult train_toy_mode(const TrainConfig& cfg, const LabeledPoints2D& toy, DiscriminatorMode mode,
                             const ToyOptions& options = {});

/// translated_points.csv and confidence_grid_{dattr,dpos,dneg}.csv.
void write_toy_report(const ToyReport& report, const std::filesystem::path& dir);

}  // namespace attrobf
