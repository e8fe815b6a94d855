#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

#include "attrobf/checkpoint.hpp"
#include "attrobf/nets.hpp"

namespace attrobf {

/// Stage-I networks: encoder E, decoder G and the discriminator heads.
struct Stage1Model {
  NetConfig net;
  std::vector<std::string> attr_names;
  Encoder encoder{nullptr};
  Decoder decoder{nullptr};
  Discriminator disc{nullptr};

  static Stage1Model create(const NetConfig& net, const std::vector<std::string>& attr_names);

  void train(bool on);
  std::vector<torch::Tensor> generator_parameters() const;

  torch::Tensor reconstruct(const torch::Tensor& x);
  /// Overwrites the code at masked positions with values and decodes.
  torch::Tensor edit(const torch::Tensor& x, const torch::Tensor& mask, const torch::Tensor& values);
  /// Per-sample target values for one attribute; every other code entry is kept.
  torch::Tensor assign(const torch::Tensor& x, int64_t attr, const torch::Tensor& target);
  /// Flips the thresholded code of one attribute.
  torch::Tensor invert(const torch::Tensor& x, int64_t attr);

  void write(CheckpointWriter& out) const;
  static Stage1Model read(CheckpointReader& in);
};

/// Stage-II: frozen Stage-I networks plus the mixing network f.
struct Stage2Model {
  Stage1Model stage1;
  MixNet mix{nullptr};

  struct Output {
    torch::Tensor x_bar;    // attribute-inverted image
    torch::Tensor lam;      // (B, 1, H, W)
    torch::Tensor x_prime;  // obfuscated image
  };

  static Stage2Model create(Stage1Model stage1);
  void train(bool on);
  /// Inverts attr (thresholded code flipped), predicts lambda and mixes.
  Output obfuscate(const torch::Tensor& x, int64_t attr);

  void write(CheckpointWriter& out) const;
  static Stage2Model read(CheckpointReader& in);
};

struct AdversaryModel {
  NetConfig net;
  std::vector<std::string> attr_names;
  bool mixup = false;
  Adversary net_module{nullptr};

  torch::Tensor predict(const torch::Tensor& x);
  torch::Tensor features(const torch::Tensor& x);

  void write(CheckpointWriter& out) const;
  static AdversaryModel read(CheckpointReader& in);
};

Stage1Model load_stage1(const std::filesystem::path& path);
Stage2Model load_stage2(const std::filesystem::path& path);
AdversaryModel load_adversary(const std::filesystem::path& path);
void save_adversary(const std::filesystem::path& path, const AdversaryModel& model);

/// Runs fn over x in chunks of at most batch rows under NoGradGuard and concatenates.
template <typename Fn>
torch::Tensor batched(const torch::Tensor& x, int64_t batch, Fn&& fn) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < x.size(0); i += batch) parts.push_back(fn(x.narrow(0, i, std::min(batch, x.size(0) - i))));
  return parts.empty() ? torch::Tensor() : torch::cat(parts, 0);
}

}  // namespace attrobf
