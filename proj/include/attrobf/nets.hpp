#pragma once

#include <torch/torch.h>

#include <map>
#include <string>
#include <vector>

#include "attrobf/data.hpp"

namespace attrobf {

enum class NetProfile { conv, mlp };

/// Architecture contract shared by every network of one model.
/// The mlp profile swaps images for point vectors (toy world); image_size and
/// channels are then ignored and point_dim is used instead.
struct NetConfig {
  NetProfile profile = NetProfile::conv;
  int64_t image_size = 32;
  int64_t channels = 3;
  int64_t num_attrs = 4;
  int64_t base_width = 16;
  int64_t depth = 3;
  bool spectral_norm_on_discriminators = true;
  bool shared_trunk = true;
  /// false builds a single attribute head (D_attr ablations); p_neg then aliases p_pos.
  bool bidirectional = true;
  int64_t disc_width = 16;
  int64_t mix_width = 16;
  int64_t mix_blocks = 5;
  int64_t adversary_width = 16;
  int64_t point_dim = 2;
  int64_t hidden = 64;
  ValueRange value_range;

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static NetConfig from_map(const std::map<std::string, std::string>& kv);
  bool operator==(const NetConfig&) const = default;
};

/// (u, c) = E(x). u holds the U-net skip maps (finest first) and the bottleneck.
struct LatentPair {
  std::vector<torch::Tensor> skips;
  torch::Tensor bottleneck;
  torch::Tensor code;  // (B, N_A)

  /// (B, F) concatenation of every flattened u map and c.
  torch::Tensor flat() const;
};

struct DiscOutput {
  torch::Tensor p_pos;    // (B, N_A) in [0, 1]
  torch::Tensor p_neg;    // (B, N_A) in [0, 1]
  torch::Tensor realism;  // (B) in (0, 1); undefined for the mlp profile
};

/// Per-pixel interpolation coefficients, (B, 1, H, W) in [0, 1].
struct MixMap {
  torch::Tensor lam;
};

/// lam * x + (1 - lam) * x_bar, lam broadcast over channels.
torch::Tensor apply_mix(const torch::Tensor& x, const torch::Tensor& x_bar, const MixMap& mix);

// ---------------------------------------------------------------------------
// Spectrally normalized layers
// ---------------------------------------------------------------------------

/// Holds a raw weight and the power-iteration vector u. In training mode each
/// call to weight() advances one power iteration; in eval mode u is reused.
class SpectralWeight {
 public:
  SpectralWeight() = default;
  SpectralWeight(torch::nn::Module& owner, torch::Tensor weight, bool enabled);

  torch::Tensor weight(bool training);
  torch::Tensor raw() const { return weight_; }
  bool enabled() const { return enabled_; }

 private:
  torch::Tensor weight_;
  torch::Tensor u_;
  bool enabled_ = false;
};

struct SNConv2dImpl : torch::nn::Module {
  SNConv2dImpl(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding, bool sn);
  torch::Tensor forward(const torch::Tensor& x);
  /// The weight the layer actually applies (W / sigma when normalization is on).
  torch::Tensor effective_weight();

  SpectralWeight w;
  torch::Tensor bias;
  int64_t stride, padding;
};
TORCH_MODULE(SNConv2d);

struct SNLinearImpl : torch::nn::Module {
  SNLinearImpl(int64_t in, int64_t out, bool sn);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor effective_weight();

  SpectralWeight w;
  torch::Tensor bias;
};
TORCH_MODULE(SNLinear);

// ---------------------------------------------------------------------------
// Encoder / decoder
// ---------------------------------------------------------------------------

struct EncoderImpl : torch::nn::Module {
  explicit EncoderImpl(const NetConfig& cfg);
  LatentPair forward(const torch::Tensor& x);

  NetConfig cfg;
  torch::nn::Sequential stem{nullptr};
  torch::nn::ModuleList downs{nullptr};
  torch::nn::Linear code_head{nullptr};
};
TORCH_MODULE(Encoder);

struct DecoderImpl : torch::nn::Module {
  explicit DecoderImpl(const NetConfig& cfg);
  /// Residual only, G(u, code).
  torch::Tensor residual(const LatentPair& u, const torch::Tensor& code);
  /// x + G(u, code), clipped to the value range (conv profile).
  torch::Tensor forward(const torch::Tensor& x, const LatentPair& u, const torch::Tensor& code);

  NetConfig cfg;
  torch::nn::Sequential inject{nullptr};
  torch::nn::ModuleList ups{nullptr};
  torch::nn::ModuleList merges{nullptr};
  torch::nn::Sequential mlp{nullptr};
  torch::nn::Conv2d to_image{nullptr};
};
TORCH_MODULE(Decoder);

// ---------------------------------------------------------------------------
// Discriminator: attribute heads D_pos / D_neg and realism head D_img
// ---------------------------------------------------------------------------

struct DiscriminatorImpl : torch::nn::Module {
  explicit DiscriminatorImpl(const NetConfig& cfg);
  DiscOutput forward(const torch::Tensor& x);

  /// Every spectrally normalized layer, for norm checks.
  std::vector<torch::Tensor> effective_weights();

  NetConfig cfg;
  torch::nn::ModuleList trunks{nullptr};  // 1 when shared, 3 otherwise (pos, neg, img)
  SNLinear head_pos{nullptr};
  SNLinear head_neg{nullptr};
  SNLinear head_img{nullptr};

 private:
  torch::Tensor trunk(size_t which, const torch::Tensor& x);
  std::vector<torch::Tensor> run_trunks(const torch::Tensor& x);
};
TORCH_MODULE(Discriminator);

// ---------------------------------------------------------------------------
// Mixing network f(x, x_bar, c, c_bar) -> lambda
// ---------------------------------------------------------------------------

struct ResBlockImpl : torch::nn::Module {
  explicit ResBlockImpl(int64_t width);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d a{nullptr}, b{nullptr};
};
TORCH_MODULE(ResBlock);

struct MixNetImpl : torch::nn::Module {
  explicit MixNetImpl(const NetConfig& cfg);
  MixMap forward(const torch::Tensor& x, const torch::Tensor& x_bar, const torch::Tensor& c,
                 const torch::Tensor& c_bar);

  NetConfig cfg;
  torch::nn::Conv2d stem{nullptr};
  torch::nn::Sequential blocks{nullptr};
  torch::nn::Conv2d out{nullptr};
};
TORCH_MODULE(MixNet);

// ---------------------------------------------------------------------------
// Held-out adversary: a small residual classifier
// ---------------------------------------------------------------------------

struct BasicBlockImpl : torch::nn::Module {
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d c1{nullptr}, c2{nullptr};
  torch::nn::BatchNorm2d b1{nullptr}, b2{nullptr};
  torch::nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(BasicBlock);

struct AdversaryImpl : torch::nn::Module {
  explicit AdversaryImpl(const NetConfig& cfg);
  torch::Tensor logits(const torch::Tensor& x);
  /// Pooled penultimate features, (B, 4 * adversary_width).
  torch::Tensor features(const torch::Tensor& x);
  /// Per-attribute probabilities; throws StateError until marked trained.
  torch::Tensor predict(const torch::Tensor& x);

  bool trained() const { return trained_; }
  void set_trained(bool v) { trained_ = v; }

  NetConfig cfg;
  torch::nn::Sequential body{nullptr};
  torch::nn::Linear fc{nullptr};

 private:
  bool trained_ = false;
};
TORCH_MODULE(Adversary);

/// Checks an input batch against the config and throws std::invalid_argument on mismatch.
void check_input(const NetConfig& cfg, const torch::Tensor& x, const char* what);

int64_t parameter_count(torch::nn::Module& m);

}  // namespace attrobf
