#include "attrobf/nets.hpp"

#include <algorithm>
#include <cmath>

#include "attrobf/errors.hpp"
#include "attrobf/kv.hpp"

namespace attrobf {

namespace F = torch::nn::functional;

namespace {

bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

torch::nn::Conv2dOptions conv_opts(int64_t in, int64_t out, int64_t k, int64_t s, int64_t p) {
  return torch::nn::Conv2dOptions(in, out, k).stride(s).padding(p);
}

torch::nn::LeakyReLU lrelu(double slope) {
  return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(slope));
}

// Encoder/decoder width at U-net level k (0 = full resolution).
int64_t level_width(const NetConfig& cfg, int64_t k) { return cfg.base_width << std::min<int64_t>(k, 3); }

torch::Tensor broadcast_code(const torch::Tensor& code, int64_t h, int64_t w) {
  return code.unsqueeze(-1).unsqueeze(-1).expand({code.size(0), code.size(1), h, w});
}

}  // namespace

// ---------------------------------------------------------------------------
// NetConfig
// ---------------------------------------------------------------------------

void NetConfig::validate() const {
  if (num_attrs < 1) throw std::invalid_argument("num_attrs must be at least 1");
  if (depth < 2) throw std::invalid_argument("depth must be at least 2");
  if (base_width < 1 || disc_width < 1 || mix_width < 1 || adversary_width < 1 || hidden < 1)
    throw std::invalid_argument("network widths must be positive");
  if (mix_blocks < 0) throw std::invalid_argument("mix_blocks must be non-negative");
  value_range.validate();
  if (profile == NetProfile::conv) {
    if (!is_power_of_two(image_size) || image_size < 16)
      throw std::invalid_argument("image_size must be a power of two >= 16");
    if ((image_size >> depth) < 1) throw std::invalid_argument("depth too large for image_size");
    if (channels < 1) throw std::invalid_argument("channels must be positive");
  } else if (point_dim < 1) {
    throw std::invalid_argument("point_dim must be positive");
  }
}

std::map<std::string, std::string> NetConfig::to_map() const {
  return {
      {"profile", profile == NetProfile::conv ? "conv" : "mlp"},
      {"image_size", std::to_string(image_size)},
      {"channels", std::to_string(channels)},
      {"num_attrs", std::to_string(num_attrs)},
      {"base_width", std::to_string(base_width)},
      {"depth", std::to_string(depth)},
      {"spectral_norm", spectral_norm_on_discriminators ? "true" : "false"},
      {"shared_trunk", shared_trunk ? "true" : "false"},
      {"bidirectional", bidirectional ? "true" : "false"},
      {"disc_width", std::to_string(disc_width)},
      {"mix_width", std::to_string(mix_width)},
      {"mix_blocks", std::to_string(mix_blocks)},
      {"adversary_width", std::to_string(adversary_width)},
      {"point_dim", std::to_string(point_dim)},
      {"hidden", std::to_string(hidden)},
      {"value_lo", kv::format_double(value_range.lo)},
      {"value_hi", kv::format_double(value_range.hi)},
  };
}

NetConfig NetConfig::from_map(const std::map<std::string, std::string>& m) {
  NetConfig c;
  const auto known = c.to_map();
  for (const auto& [k, v] : m) {
    if (!known.count(k)) throw ParseError("unknown network key '" + k + "'");
    if (k == "profile") {
      if (v != "conv" && v != "mlp") throw ParseError("profile must be conv or mlp");
      c.profile = v == "conv" ? NetProfile::conv : NetProfile::mlp;
    } else if (k == "image_size") c.image_size = kv::to_int(k, v);
    else if (k == "channels") c.channels = kv::to_int(k, v);
    else if (k == "num_attrs") c.num_attrs = kv::to_int(k, v);
    else if (k == "base_width") c.base_width = kv::to_int(k, v);
    else if (k == "depth") c.depth = kv::to_int(k, v);
    else if (k == "spectral_norm") c.spectral_norm_on_discriminators = kv::to_bool(k, v);
    else if (k == "shared_trunk") c.shared_trunk = kv::to_bool(k, v);
    else if (k == "bidirectional") c.bidirectional = kv::to_bool(k, v);
    else if (k == "disc_width") c.disc_width = kv::to_int(k, v);
    else if (k == "mix_width") c.mix_width = kv::to_int(k, v);
    else if (k == "mix_blocks") c.mix_blocks = kv::to_int(k, v);
    else if (k == "adversary_width") c.adversary_width = kv::to_int(k, v);
    else if (k == "point_dim") c.point_dim = kv::to_int(k, v);
    else if (k == "hidden") c.hidden = kv::to_int(k, v);
    else if (k == "value_lo") c.value_range.lo = static_cast<float>(kv::to_double(k, v));
    else if (k == "value_hi") c.value_range.hi = static_cast<float>(kv::to_double(k, v));
  }
  return c;
}

void check_input(const NetConfig& cfg, const torch::Tensor& x, const char* what) {
  if (!x.defined()) throw std::invalid_argument(std::string(what) + ": undefined tensor");
  if (cfg.profile == NetProfile::mlp) {
    if (x.dim() != 2 || x.size(1) != cfg.point_dim)
      throw std::invalid_argument(std::string(what) + ": expected (B, " + std::to_string(cfg.point_dim) + ") points");
    return;
  }
  if (x.dim() != 4 || x.size(1) != cfg.channels || x.size(2) != cfg.image_size || x.size(3) != cfg.image_size)
    throw std::invalid_argument(std::string(what) + ": expected (B, " + std::to_string(cfg.channels) + ", " +
                                std::to_string(cfg.image_size) + ", " + std::to_string(cfg.image_size) +
                                ") images");
}

int64_t parameter_count(torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

torch::Tensor LatentPair::flat() const {
  std::vector<torch::Tensor> parts;
  const auto b = code.size(0);
  for (const auto& s : skips) parts.push_back(s.reshape({b, -1}));
  parts.push_back(bottleneck.reshape({b, -1}));
  parts.push_back(code);
  return torch::cat(parts, 1);
}

torch::Tensor apply_mix(const torch::Tensor& x, const torch::Tensor& x_bar, const MixMap& mix) {
  if (!x.sizes().equals(x_bar.sizes())) throw std::invalid_argument("apply_mix: x and x_bar shapes differ");
  const auto& lam = mix.lam;
  if (lam.dim() != 4 || lam.size(0) != x.size(0) || lam.size(1) != 1 || lam.size(2) != x.size(2) ||
      lam.size(3) != x.size(3))
    throw std::invalid_argument("apply_mix: lambda must be (B, 1, H, W)");
  return lam * x + (1 - lam) * x_bar;
}

// ---------------------------------------------------------------------------
// Spectral normalization
// ---------------------------------------------------------------------------

SpectralWeight::SpectralWeight(torch::nn::Module& owner, torch::Tensor weight, bool enabled) : enabled_(enabled) {
  weight_ = owner.register_parameter("weight", std::move(weight));
  auto u = torch::randn({weight_.size(0)});
  u_ = owner.register_buffer("u", F::normalize(u, F::NormalizeFuncOptions().dim(0).eps(1e-12)));
}

torch::Tensor SpectralWeight::weight(bool training) {
  if (!enabled_) return weight_;
  const auto norm = F::NormalizeFuncOptions().dim(0).eps(1e-12);
  auto mat = weight_.reshape({weight_.size(0), -1});
  torch::Tensor u, v;
  {
    torch::NoGradGuard guard;
    if (training) {
      v = F::normalize(torch::mv(mat.t(), u_), norm);
      u_.copy_(F::normalize(torch::mv(mat, v), norm));
    }
    // Snapshot: a later power iteration must not touch a graph built from this one.
    u = u_.clone();
    v = F::normalize(torch::mv(mat.t(), u), norm);
  }
  auto sigma = torch::dot(u, torch::mv(mat, v));
  return weight_ / sigma;
}

SNConv2dImpl::SNConv2dImpl(int64_t in, int64_t out, int64_t kernel, int64_t s, int64_t p, bool sn)
    : stride(s), padding(p) {
  torch::nn::Conv2d init(conv_opts(in, out, kernel, s, p));
  w = SpectralWeight(*this, init->weight.detach().clone(), sn);
  bias = register_parameter("bias", init->bias.detach().clone());
}

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x) {
  return F::conv2d(x, w.weight(is_training()), F::Conv2dFuncOptions().bias(bias).stride(stride).padding(padding));
}

torch::Tensor SNConv2dImpl::effective_weight() { return w.weight(false); }

SNLinearImpl::SNLinearImpl(int64_t in, int64_t out, bool sn) {
  torch::nn::Linear init(in, out);
  w = SpectralWeight(*this, init->weight.detach().clone(), sn);
  bias = register_parameter("bias", init->bias.detach().clone());
}

torch::Tensor SNLinearImpl::forward(const torch::Tensor& x) { return F::linear(x, w.weight(is_training()), bias); }

torch::Tensor SNLinearImpl::effective_weight() { return w.weight(false); }

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

EncoderImpl::EncoderImpl(const NetConfig& c) : cfg(c) {
  cfg.validate();
  downs = register_module("downs", torch::nn::ModuleList());
  if (cfg.profile == NetProfile::mlp) {
    stem = register_module("stem", torch::nn::Sequential(torch::nn::Linear(cfg.point_dim, cfg.hidden), lrelu(0.2),
                                                         torch::nn::Linear(cfg.hidden, cfg.hidden), lrelu(0.2)));
    code_head = register_module("code_head", torch::nn::Linear(cfg.hidden, cfg.num_attrs));
    return;
  }
  stem = register_module("stem", torch::nn::Sequential(torch::nn::Conv2d(conv_opts(cfg.channels, level_width(cfg, 0), 3, 1, 1)),
                                                       lrelu(0.2)));
  for (int64_t k = 1; k <= cfg.depth; ++k) {
    downs->push_back(torch::nn::Sequential(
        torch::nn::Conv2d(conv_opts(level_width(cfg, k - 1), level_width(cfg, k), 4, 2, 1)), lrelu(0.2)));
  }
  code_head = register_module("code_head", torch::nn::Linear(level_width(cfg, cfg.depth), cfg.num_attrs));
}

LatentPair EncoderImpl::forward(const torch::Tensor& x) {
  check_input(cfg, x, "encode");
  LatentPair out;
  auto h = stem->forward(x);
  if (cfg.profile == NetProfile::mlp) {
    out.bottleneck = h;
    out.code = code_head->forward(h);
    return out;
  }
  out.skips.push_back(h);
  for (size_t k = 0; k < downs->size(); ++k) {
    h = downs[k]->as<torch::nn::Sequential>()->forward(h);
    if (k + 1 < downs->size()) out.skips.push_back(h);
  }
  out.bottleneck = h;
  out.code = code_head->forward(h.mean({2, 3}));
  return out;
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

DecoderImpl::DecoderImpl(const NetConfig& c) : cfg(c) {
  cfg.validate();
  ups = register_module("ups", torch::nn::ModuleList());
  merges = register_module("merges", torch::nn::ModuleList());
  if (cfg.profile == NetProfile::mlp) {
    torch::nn::Linear last(cfg.hidden, cfg.point_dim);
    torch::nn::init::zeros_(last->weight);
    torch::nn::init::zeros_(last->bias);
    mlp = register_module("mlp", torch::nn::Sequential(torch::nn::Linear(cfg.hidden + cfg.num_attrs, cfg.hidden),
                                                       lrelu(0.2), torch::nn::Linear(cfg.hidden, cfg.hidden),
                                                       lrelu(0.2), last));
    return;
  }
  const auto wd = level_width(cfg, cfg.depth);
  inject = register_module("inject", torch::nn::Sequential(torch::nn::Conv2d(conv_opts(wd + cfg.num_attrs, wd, 3, 1, 1)),
                                                           lrelu(0.2)));
  for (int64_t k = cfg.depth; k >= 1; --k) {
    const auto win = level_width(cfg, k), wout = level_width(cfg, k - 1);
    ups->push_back(torch::nn::Sequential(
        torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(win, wout, 4).stride(2).padding(1)), lrelu(0.2)));
    merges->push_back(torch::nn::Sequential(torch::nn::Conv2d(conv_opts(2 * wout, wout, 3, 1, 1)), lrelu(0.2)));
  }
  to_image = register_module("to_image", torch::nn::Conv2d(conv_opts(level_width(cfg, 0), cfg.channels, 3, 1, 1)));
  torch::nn::init::zeros_(to_image->weight);
  torch::nn::init::zeros_(to_image->bias);
}

torch::Tensor DecoderImpl::residual(const LatentPair& u, const torch::Tensor& code) {
  if (!code.defined() || code.dim() != 2 || code.size(1) != cfg.num_attrs)
    throw std::invalid_argument("decode: code must be (B, N_A)");
  if (code.size(0) != u.bottleneck.size(0)) throw std::invalid_argument("decode: batch size of u and code differ");
  if (cfg.profile == NetProfile::mlp) return mlp->forward(torch::cat({u.bottleneck, code}, 1));

  if (u.skips.size() != static_cast<size_t>(cfg.depth)) throw std::invalid_argument("decode: wrong number of skip maps");
  auto h = u.bottleneck;
  h = inject->forward(torch::cat({h, broadcast_code(code, h.size(2), h.size(3))}, 1));
  for (size_t j = 0; j < ups->size(); ++j) {
    h = ups[j]->as<torch::nn::Sequential>()->forward(h);
    const auto& skip = u.skips[u.skips.size() - 1 - j];
    h = merges[j]->as<torch::nn::Sequential>()->forward(torch::cat({h, skip}, 1));
  }
  return to_image->forward(h);
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& x, const LatentPair& u, const torch::Tensor& code) {
  check_input(cfg, x, "decode");
  if (x.size(0) != code.size(0)) throw std::invalid_argument("decode: batch size of x and code differ");
  auto out = x + residual(u, code);
  if (cfg.profile == NetProfile::mlp) return out;
  return out.clamp(cfg.value_range.lo, cfg.value_range.hi);
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

DiscriminatorImpl::DiscriminatorImpl(const NetConfig& c) : cfg(c) {
  cfg.validate();
  const bool sn = cfg.spectral_norm_on_discriminators;
  const bool mlp = cfg.profile == NetProfile::mlp;
  size_t n_trunks = 1;
  if (!cfg.shared_trunk) n_trunks = (cfg.bidirectional ? 2 : 1) + (mlp ? 0 : 1);

  int64_t feat = 0;
  trunks = register_module("trunks", torch::nn::ModuleList());
  for (size_t t = 0; t < n_trunks; ++t) {
    torch::nn::Sequential seq;
    if (mlp) {
      seq->push_back(SNLinear(cfg.point_dim, cfg.hidden, sn));
      seq->push_back(lrelu(0.01));
      seq->push_back(SNLinear(cfg.hidden, cfg.hidden, sn));
      seq->push_back(lrelu(0.01));
      feat = cfg.hidden;
    } else {
      int64_t in = cfg.channels, width = cfg.disc_width, res = cfg.image_size;
      while (res > 4) {
        seq->push_back(SNConv2d(in, width, 4, 2, 1, sn));
        seq->push_back(lrelu(0.01));
        in = width;
        width *= 2;
        res /= 2;
      }
      feat = in * res * res;
    }
    trunks->push_back(seq);
  }
  head_pos = register_module("head_pos", SNLinear(feat, cfg.num_attrs, sn));
  if (cfg.bidirectional) head_neg = register_module("head_neg", SNLinear(feat, cfg.num_attrs, sn));
  if (!mlp) head_img = register_module("head_img", SNLinear(feat, 1, sn));
}

torch::Tensor DiscriminatorImpl::trunk(size_t which, const torch::Tensor& x) {
  auto h = trunks[which]->as<torch::nn::Sequential>()->forward(x);
  return h.reshape({h.size(0), -1});
}

std::vector<torch::Tensor> DiscriminatorImpl::run_trunks(const torch::Tensor& x) {
  // Order: attribute-positive, attribute-negative, realism.
  if (trunks->size() == 1) {
    auto f = trunk(0, x);
    return {f, f, f};
  }
  std::vector<torch::Tensor> out;
  size_t t = 0;
  out.push_back(trunk(t++, x));
  out.push_back(cfg.bidirectional ? trunk(t++, x) : out.back());
  out.push_back(t < trunks->size() ? trunk(t, x) : torch::Tensor());
  return out;
}

DiscOutput DiscriminatorImpl::forward(const torch::Tensor& x) {
  check_input(cfg, x, "discriminate");
  auto feats = run_trunks(x);
  DiscOutput out;
  out.p_pos = torch::sigmoid(head_pos->forward(feats[0]));
  out.p_neg = cfg.bidirectional ? torch::sigmoid(head_neg->forward(feats[1])) : out.p_pos;
  if (head_img) out.realism = torch::sigmoid(head_img->forward(feats[2])).squeeze(1);
  return out;
}

std::vector<torch::Tensor> DiscriminatorImpl::effective_weights() {
  std::vector<torch::Tensor> out;
  for (const auto& m : modules(/*include_self=*/false)) {
    if (auto conv = std::dynamic_pointer_cast<SNConv2dImpl>(m)) out.push_back(conv->effective_weight());
    if (auto lin = std::dynamic_pointer_cast<SNLinearImpl>(m)) out.push_back(lin->effective_weight());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mixing network
// ---------------------------------------------------------------------------

ResBlockImpl::ResBlockImpl(int64_t width) {
  a = register_module("a", torch::nn::Conv2d(conv_opts(width, width, 3, 1, 1)));
  b = register_module("b", torch::nn::Conv2d(conv_opts(width, width, 3, 1, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  return x + b->forward(F::leaky_relu(a->forward(x), F::LeakyReLUFuncOptions().negative_slope(0.2)));
}

MixNetImpl::MixNetImpl(const NetConfig& c) : cfg(c) {
  cfg.validate();
  if (cfg.profile != NetProfile::conv) throw std::invalid_argument("the mixing network needs the conv profile");
  stem = register_module("stem", torch::nn::Conv2d(conv_opts(2 * cfg.channels + 2 * cfg.num_attrs, cfg.mix_width, 3, 1, 1)));
  blocks = register_module("blocks", torch::nn::Sequential());
  for (int64_t i = 0; i < cfg.mix_blocks; ++i) blocks->push_back(ResBlock(cfg.mix_width));
  out = register_module("out", torch::nn::Conv2d(conv_opts(cfg.mix_width, 1, 1, 1, 0)));
}

MixMap MixNetImpl::forward(const torch::Tensor& x, const torch::Tensor& x_bar, const torch::Tensor& c,
                           const torch::Tensor& c_bar) {
  check_input(cfg, x, "mix_predict");
  check_input(cfg, x_bar, "mix_predict");
  if (x.size(0) != x_bar.size(0)) throw std::invalid_argument("mix_predict: x and x_bar batch sizes differ");
  for (const auto* code : {&c, &c_bar})
    if (code->dim() != 2 || code->size(0) != x.size(0) || code->size(1) != cfg.num_attrs)
      throw std::invalid_argument("mix_predict: codes must be (B, N_A)");
  const auto h = x.size(2), w = x.size(3);
  auto in = torch::cat({x, x_bar, broadcast_code(c, h, w), broadcast_code(c_bar, h, w)}, 1);
  auto feat = F::leaky_relu(stem->forward(in), F::LeakyReLUFuncOptions().negative_slope(0.2));
  feat = blocks->is_empty() ? feat : blocks->forward(feat);
  return MixMap{torch::sigmoid(out->forward(feat))};
}

// ---------------------------------------------------------------------------
// Adversary
// ---------------------------------------------------------------------------

BasicBlockImpl::BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
  c1 = register_module("c1", torch::nn::Conv2d(conv_opts(in, out, 3, stride, 1).bias(false)));
  b1 = register_module("b1", torch::nn::BatchNorm2d(out));
  c2 = register_module("c2", torch::nn::Conv2d(conv_opts(out, out, 3, 1, 1).bias(false)));
  b2 = register_module("b2", torch::nn::BatchNorm2d(out));
  shortcut = register_module("shortcut", torch::nn::Sequential());
  if (stride != 1 || in != out) {
    shortcut->push_back(torch::nn::Conv2d(conv_opts(in, out, 1, stride, 0).bias(false)));
    shortcut->push_back(torch::nn::BatchNorm2d(out));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto h = torch::relu(b1->forward(c1->forward(x)));
  h = b2->forward(c2->forward(h));
  return torch::relu(h + (shortcut->is_empty() ? x : shortcut->forward(x)));
}

AdversaryImpl::AdversaryImpl(const NetConfig& c) : cfg(c) {
  cfg.validate();
  if (cfg.profile != NetProfile::conv) throw std::invalid_argument("the adversary needs the conv profile");
  const auto w = cfg.adversary_width;
  body = register_module("body", torch::nn::Sequential(
                                     torch::nn::Conv2d(conv_opts(cfg.channels, w, 3, 1, 1).bias(false)),
                                     torch::nn::BatchNorm2d(w), torch::nn::ReLU(),
                                     BasicBlock(w, w, 1), BasicBlock(w, w, 1),
                                     BasicBlock(w, 2 * w, 2), BasicBlock(2 * w, 2 * w, 1),
                                     BasicBlock(2 * w, 4 * w, 2), BasicBlock(4 * w, 4 * w, 1)));
  fc = register_module("fc", torch::nn::Linear(4 * w, cfg.num_attrs));
}

torch::Tensor AdversaryImpl::features(const torch::Tensor& x) {
  check_input(cfg, x, "adversary");
  return body->forward(x).mean({2, 3});
}

torch::Tensor AdversaryImpl::logits(const torch::Tensor& x) { return fc->forward(features(x)); }

torch::Tensor AdversaryImpl::predict(const torch::Tensor& x) {
  if (!trained_) throw StateError("adversary has not been trained");
  return torch::sigmoid(logits(x));
}

}  // namespace attrobf
