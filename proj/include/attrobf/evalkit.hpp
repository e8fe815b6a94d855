#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "attrobf/data.hpp"
#include "attrobf/models.hpp"
#include "attrobf/nets.hpp"
#include "attrobf/train.hpp"

namespace attrobf {

/// Binary entropy in bits; 0 log 0 = 0. Throws std::invalid_argument outside [0, 1].
double shannon_entropy(double p);
/// Elementwise version; values must already lie in [0, 1].
torch::Tensor shannon_entropy(const torch::Tensor& p);

/// Image transform applied for one target attribute: (images, attr index) -> images.
using AttrTransform = std::function<torch::Tensor(const torch::Tensor&, int64_t)>;

AttrTransform identity_transform();
AttrTransform inversion_transform(Stage1Model& model);
AttrTransform obfuscation_transform(Stage2Model& model);

struct EvalOptions {
  /// > 0: draw a balanced subset of at most this many images per attribute;
  /// 0: evaluate ds as given.
  int64_t max_per_attr = 0;
  int64_t batch = 256;
};

// ---------------------------------------------------------------------------
// Inversion
// ---------------------------------------------------------------------------

inline constexpr const char* kInversionHeader =
    "attribute,n_pos,n_neg,real_tpr,real_tnr,real_acc,inv_tpr,inv_tnr,inv_acc,inv_other_acc,warning";

struct InversionRow {
  std::string attribute;
  int64_t n_pos = 0, n_neg = 0;
  double real_tpr = 0, real_tnr = 0, real_acc = 0;
  double inv_tpr = 0, inv_tnr = 0, inv_acc = 0;
  /// Accuracy on the non-target attributes of the inverted images (utility).
  double inv_other_acc = 0;
  std::string warning;
};

struct InversionReport {
  std::vector<InversionRow> rows;
  double mean_real_acc() const;
  double mean_inv_acc() const;
  double mean_other_acc() const;
};

/// Scores the adversary against the ORIGINAL labels, threshold 0.5.
InversionReport eval_inversion(const AttrTransform& invert, AdversaryModel& adversary, const AttrImageDataset& ds,
                               const std::vector<std::string>& attrs, const EvalOptions& options = {});
void write_inversion_csv(const InversionReport& report, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Uncertainty
// ---------------------------------------------------------------------------

inline constexpr const char* kUncertaintyHeader =
    "attribute,direction,n,real_entropy,ours_entropy,gain_entropy,real_prob,ours_prob,gain_prob";

/// One (attribute, original-label cluster) cell. Probabilities are those the
/// adversary assigns to the original label; entropies are per-image means.
struct UncertaintyRow {
  std::string attribute;
  std::string direction;  // pos_to_uncertain | neg_to_uncertain
  int64_t n = 0;
  double real_entropy = 0, ours_entropy = 0, gain_entropy = 0;  // gain = ours - real
  double real_prob = 0, ours_prob = 0, gain_prob = 0;           // gain = real - ours
};

struct UncertaintyReport {
  std::vector<UncertaintyRow> rows;
  double mean_real_entropy() const;
  double mean_ours_entropy() const;
  /// Mean over cells of |real_prob - 0.5| - |ours_prob - 0.5|.
  double mean_prob_movement() const;
};

UncertaintyReport eval_uncertainty(const AttrTransform& obfuscate, AdversaryModel& mixup_adversary,
                                   const AttrImageDataset& ds, const std::vector<std::string>& attrs,
                                   const EvalOptions& options = {});
void write_uncertainty_csv(const UncertaintyReport& report, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Trade-off sweep
// ---------------------------------------------------------------------------

inline constexpr const char* kTradeoffHeader = "delta2,privacy,utility";

struct TradeoffRow {
  double delta2 = 0;
  double privacy = 0;  // mean target-attribute accuracy after inversion (lower is better)
  double utility = 0;  // mean non-target-attribute accuracy after inversion (higher is better)
};

/// One Stage-I model per delta2. With cfg.out_dir set, each model lives in
/// out_dir/delta2_<v>/ and an existing checkpoint there is loaded instead of retrained.
std::vector<TradeoffRow> tradeoff_sweep(const TrainConfig& cfg, const NetConfig& net,
                                        const std::vector<double>& delta2_values, const AttrImageDataset& train,
                                        const AttrImageDataset& eval, AdversaryModel& adversary,
                                        const EvalOptions& options = {});
void write_tradeoff_csv(const std::vector<TradeoffRow>& rows, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// FID
// ---------------------------------------------------------------------------

struct FidResult {
  double fid = 0;
  int64_t n_a = 0, n_b = 0, dim = 0;
  std::vector<std::string> warnings;
};

/// Frechet distance between Gaussian fits of two (N, F) feature sets. Needs N >= F + 1.
FidResult compute_fid(const torch::Tensor& features_a, const torch::Tensor& features_b);
/// Features from the adversary's penultimate layer.
FidResult compute_fid(const torch::Tensor& images_a, const torch::Tensor& images_b, AdversaryModel& extractor,
                      int64_t batch = 256);
void write_fid(const FidResult& result, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Figure exports
// ---------------------------------------------------------------------------

inline constexpr int kHistogramBins = 20;

/// Counts over kHistogramBins equal bins of [0, 1]; 1.0 lands in the last bin.
std::vector<int64_t> histogram01(const torch::Tensor& values, int bins = kHistogramBins);

/// scatter_<attr>_<pos|neg>.csv with point rows then mean and std rows.
std::vector<std::filesystem::path> export_scatter(const AttrTransform& obfuscate, AdversaryModel& mixup_adversary,
                                                  const AttrImageDataset& ds, const std::vector<std::string>& attrs,
                                                  const std::filesystem::path& dir, const EvalOptions& options = {});

/// hist_<attr>_<pos|neg>_<prob|entropy>.csv with original, inverted and obfuscated counts.
std::vector<std::filesystem::path> export_histograms(const AttrTransform& invert, const AttrTransform& obfuscate,
                                                     AdversaryModel& mixup_adversary, const AttrImageDataset& ds,
                                                     const std::vector<std::string>& attrs,
                                                     const std::filesystem::path& dir,
                                                     const EvalOptions& options = {});

}  // namespace attrobf
