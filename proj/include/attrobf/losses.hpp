#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <random>

#include "attrobf/nets.hpp"

namespace attrobf {

/// Clamp applied to every probability before a log.
inline constexpr double kProbEps = 1e-7;

/// Batched label edit. All tensors are (B, N_A) float except num_edited (B) int64.
struct EditPlan {
  torch::Tensor mask;        // 1 where the code position was replaced
  torch::Tensor values;      // replacement bits s (0 where mask is 0)
  torch::Tensor num_edited;  // N_s per sample
  torch::Tensor c_bar;
  torch::Tensor y_bar;
};

struct Margins {
  double delta1 = 0.05;
  double delta2 = 0.0;
  double delta3 = 0.0;

  void validate() const;
};

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;

  void validate() const;
};

/// Generator-side Stage-I terms computed on one batch.
struct Stage1Parts {
  torch::Tensor rec, cclf, bi, adv, util, reg;
};

enum class AdvSide { discriminator, generator };

/// Elementwise natural-log BCE with probabilities clamped to [eps, 1 - eps].
torch::Tensor bce(const torch::Tensor& p, const torch::Tensor& target);

torch::Tensor loss_rec(const torch::Tensor& x_hat, const torch::Tensor& x);
torch::Tensor loss_cclf(const torch::Tensor& c, const torch::Tensor& y);

/// Largest N_s the sampler draws: floor(N_A / 2), at least 1.
int64_t max_edits(int64_t num_attrs);

/// N_s ~ uniform{1..max_edits}, N_s distinct positions, fair replacement bits.
EditPlan edit_code(const torch::Tensor& c, const torch::Tensor& y, std::mt19937_64& rng);

/// Caller-chosen edit: mask and values given explicitly (test-time assignment).
EditPlan edit_code(const torch::Tensor& c, const torch::Tensor& y, const torch::Tensor& mask,
                   const torch::Tensor& values);

/// Per attribute: y_org selects D_pos (1) or D_neg (0), BCE against y_tar.
/// Averaged over unmasked entries; an empty mask yields 0.
torch::Tensor loss_bi(const DiscOutput& disc, const torch::Tensor& y_org, const torch::Tensor& y_tar,
                      const std::optional<torch::Tensor>& mask = std::nullopt);

/// Discriminator term on generated images: original labels, edited positions only.
torch::Tensor loss_attr_disc(const DiscOutput& disc_on_generated, const torch::Tensor& y, const torch::Tensor& m);

/// Realism term. The discriminator side is -(log D(x) + log(1 - D(x_bar)));
/// the generator side is the non-saturating -log D(x_bar). realism_real is
/// ignored on the generator side.
torch::Tensor loss_adv(const torch::Tensor& realism_real, const torch::Tensor& realism_fake, AdvSide side);

/// mean_b max(mean |e_xbar - e_x| - delta1, 0) over flattened (B, F) encodings.
torch::Tensor loss_reg(const torch::Tensor& e_xbar, const torch::Tensor& e_x, double delta1);

torch::Tensor loss_util(const DiscOutput& disc_xbar, const DiscOutput& disc_xhat, const torch::Tensor& y,
                        const torch::Tensor& m, double delta2, double delta3);

torch::Tensor loss_generator_total(const Stage1Parts& parts, const LossWeights& weights);

/// Soft 0.5 target on both heads at target_attr plus gated BCE against y on the
/// remaining attributes, plus the generator-side realism term when available.
torch::Tensor loss_entropy_stage2(const DiscOutput& disc_xprime, const torch::Tensor& y_org, int64_t target_attr);

}  // namespace attrobf
