#include "attrobf/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "attrobf/errors.hpp"
#include "attrobf/kv.hpp"

namespace attrobf {

namespace fs = std::filesystem;

std::string to_string(DiscriminatorMode mode) {
  switch (mode) {
    case DiscriminatorMode::bidirectional: return "bidirectional";
    case DiscriminatorMode::d_attr: return "d_attr";
    case DiscriminatorMode::d_attr_plus_at: return "d_attr_plus_AT";
  }
  return "?";
}

DiscriminatorMode parse_discriminator_mode(const std::string& text) {
  if (text == "bidirectional") return DiscriminatorMode::bidirectional;
  if (text == "d_attr") return DiscriminatorMode::d_attr;
  if (text == "d_attr_plus_AT") return DiscriminatorMode::d_attr_plus_at;
  throw ParseError("unknown discriminator_mode '" + text + "'");
}

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

TrainConfig TrainConfig::desk_scale() {
  TrainConfig c;
  c.desk_scale_overrides = true;
  c.batch_size = 32;
  c.iters_stage1 = 5000;
  c.iters_stage2 = 2000;
  c.adversary_iters = 1500;
  c.adversary_batch = 64;
  c.log_every = 25;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr_generator > 0) || !(lr_discriminator > 0) || !(adversary_lr > 0))
    throw std::invalid_argument("learning rates must be positive");
  if (iters_stage1 < 1 || iters_stage2 < 1 || adversary_iters < 1) throw std::invalid_argument("iteration counts must be >= 1");
  if (batch_size < 1 || adversary_batch < 1) throw std::invalid_argument("batch sizes must be >= 1");
  if (decay != "linear_to_zero") throw std::invalid_argument("decay must be linear_to_zero");
  if (!(decay_start >= 0 && decay_start <= 1)) throw std::invalid_argument("decay_start must lie in [0, 1]");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
  if (d_steps < 1) throw std::invalid_argument("d_steps must be >= 1");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
    throw std::invalid_argument("adam betas must lie in [0, 1)");
  if (!(mixup_alpha > 0)) throw std::invalid_argument("mixup_alpha must be positive");
  if (log_every < 1) throw std::invalid_argument("log_every must be >= 1");
  weights.validate();
  margins.validate();
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  auto d = kv::format_double;
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"lr_generator", d(lr_generator)},
      {"lr_discriminator", d(lr_discriminator)},
      {"batch_size", std::to_string(batch_size)},
      {"iters_stage1", std::to_string(iters_stage1)},
      {"iters_stage2", std::to_string(iters_stage2)},
      {"decay", decay},
      {"decay_start", d(decay_start)},
      {"lambda1", d(weights.lambda1)},
      {"lambda2", d(weights.lambda2)},
      {"delta1", d(margins.delta1)},
      {"delta2", d(margins.delta2)},
      {"delta3", d(margins.delta3)},
      {"discriminator_mode", to_string(discriminator_mode)},
      {"seed", std::to_string(seed)},
      {"checkpoint_every", std::to_string(checkpoint_every)},
      {"desk_scale_overrides", b(desk_scale_overrides)},
      {"d_steps", std::to_string(d_steps)},
      {"stage2_update_discriminator", b(stage2_update_discriminator)},
      {"adam_beta1", d(adam_beta1)},
      {"adam_beta2", d(adam_beta2)},
      {"adversary_iters", std::to_string(adversary_iters)},
      {"adversary_lr", d(adversary_lr)},
      {"adversary_batch", std::to_string(adversary_batch)},
      {"mixup_alpha", d(mixup_alpha)},
      {"log_every", std::to_string(log_every)},
      {"debug_checks", b(debug_checks)},
      {"out_dir", out_dir},
      {"resume_from", resume_from},
  };
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv, TrainConfig base) {
  static const std::set<std::string> allowed = [] {
    std::set<std::string> keys;
    for (const auto& [k, v] : TrainConfig{}.to_map()) keys.insert(k);
    return keys;
  }();
  kv::reject_unknown(kv, allowed, "train config");

  TrainConfig c = std::move(base);
  // The desk preset goes underneath whatever else the map sets explicitly.
  if (auto it = kv.find("desk_scale_overrides"); it != kv.end() && kv::to_bool(it->first, it->second)) {
    const auto preset = desk_scale();
    c.desk_scale_overrides = true;
    c.batch_size = preset.batch_size;
    c.iters_stage1 = preset.iters_stage1;
    c.iters_stage2 = preset.iters_stage2;
    c.adversary_iters = preset.adversary_iters;
    c.adversary_batch = preset.adversary_batch;
    c.log_every = preset.log_every;
  }
  for (const auto& [k, v] : kv) {
    if (k == "lr_generator") c.lr_generator = kv::to_double(k, v);
    else if (k == "lr_discriminator") c.lr_discriminator = kv::to_double(k, v);
    else if (k == "batch_size") c.batch_size = kv::to_int(k, v);
    else if (k == "iters_stage1") c.iters_stage1 = kv::to_int(k, v);
    else if (k == "iters_stage2") c.iters_stage2 = kv::to_int(k, v);
    else if (k == "decay") c.decay = v;
    else if (k == "decay_start") c.decay_start = kv::to_double(k, v);
    else if (k == "lambda1") c.weights.lambda1 = kv::to_double(k, v);
    else if (k == "lambda2") c.weights.lambda2 = kv::to_double(k, v);
    else if (k == "delta1") c.margins.delta1 = kv::to_double(k, v);
    else if (k == "delta2") c.margins.delta2 = kv::to_double(k, v);
    else if (k == "delta3") c.margins.delta3 = kv::to_double(k, v);
    else if (k == "discriminator_mode") c.discriminator_mode = parse_discriminator_mode(v);
    else if (k == "seed") c.seed = static_cast<uint64_t>(kv::to_int(k, v));
    else if (k == "checkpoint_every") c.checkpoint_every = kv::to_int(k, v);
    else if (k == "desk_scale_overrides") c.desk_scale_overrides = kv::to_bool(k, v);
    else if (k == "d_steps") c.d_steps = kv::to_int(k, v);
    else if (k == "stage2_update_discriminator") c.stage2_update_discriminator = kv::to_bool(k, v);
    else if (k == "adam_beta1") c.adam_beta1 = kv::to_double(k, v);
    else if (k == "adam_beta2") c.adam_beta2 = kv::to_double(k, v);
    else if (k == "adversary_iters") c.adversary_iters = kv::to_int(k, v);
    else if (k == "adversary_lr") c.adversary_lr = kv::to_double(k, v);
    else if (k == "adversary_batch") c.adversary_batch = kv::to_int(k, v);
    else if (k == "mixup_alpha") c.mixup_alpha = kv::to_double(k, v);
    else if (k == "log_every") c.log_every = kv::to_int(k, v);
    else if (k == "debug_checks") c.debug_checks = kv::to_bool(k, v);
    else if (k == "out_dir") c.out_dir = v;
    else if (k == "resume_from") c.resume_from = v;
  }
  return c;
}

double scheduled_lr(double base, int64_t iteration, int64_t total, double decay_start) {
  if (total < 1) throw std::invalid_argument("scheduled_lr: total must be >= 1");
  const auto t = std::clamp<int64_t>(iteration, 0, total);
  const auto start = static_cast<int64_t>(std::floor(decay_start * static_cast<double>(total)));
  if (t <= start) return base;
  return base * static_cast<double>(total - t) / static_cast<double>(total - start);
}

// ---------------------------------------------------------------------------
// Loss curves
// ---------------------------------------------------------------------------

void LossCurves::add(int64_t iteration, const std::string& term, double value) {
  records_.push_back({iteration, term, value});
}

std::vector<double> LossCurves::series(const std::string& term) const {
  std::vector<double> out;
  for (const auto& r : records_)
    if (r.term == term) out.push_back(r.value);
  return out;
}

namespace {

constexpr const char* kCurveHeader = "iteration,term,value";

void write_record(std::ostream& out, const LossRecord& r) {
  out << r.iteration << ',' << r.term << ',' << kv::format_double(r.value) << '\n';
}

}  // namespace

std::string LossCurves::to_csv() const {
  std::ostringstream out;
  out << kCurveHeader << '\n';
  for (const auto& r : records_) write_record(out, r);
  return out.str();
}

LossCurves LossCurves::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  LossCurves curves;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == kCurveHeader) continue;
    const auto a = line.find(',');
    const auto b = line.rfind(',');
    if (a == std::string::npos || a == b) throw ParseError("malformed loss record", line_no);
    curves.add(kv::to_int("iteration", line.substr(0, a)), line.substr(a + 1, b - a - 1),
               kv::to_double("value", line.substr(b + 1)));
  }
  return curves;
}

void LossCurves::append_csv(const fs::path& path, size_t from) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot write " + path.string());
  if (fresh) out << kCurveHeader << '\n';
  for (size_t i = from; i < records_.size(); ++i) write_record(out, records_[i]);
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

namespace {

torch::Tensor sample_indices(std::mt19937_64& rng, int64_t n, int64_t batch) {
  std::uniform_int_distribution<int64_t> pick(0, n - 1);
  auto idx = torch::empty({batch}, torch::kInt64);
  auto a = idx.accessor<int64_t, 1>();
  for (int64_t i = 0; i < batch; ++i) a[i] = pick(rng);
  return idx;
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

std::unique_ptr<torch::optim::Adam> make_adam(const std::vector<torch::Tensor>& params, double lr,
                                              const TrainConfig& cfg) {
  return std::make_unique<torch::optim::Adam>(
      params, torch::optim::AdamOptions(lr).betas({cfg.adam_beta1, cfg.adam_beta2}));
}

void set_requires_grad(const std::vector<torch::Tensor>& params, bool on) {
  for (auto p : params) p.requires_grad_(on);
}

class RequiresGradOff {
 public:
  explicit RequiresGradOff(std::vector<torch::Tensor> params) : params_(std::move(params)) {
    set_requires_grad(params_, false);
  }
  ~RequiresGradOff() { set_requires_grad(params_, true); }
  RequiresGradOff(const RequiresGradOff&) = delete;
  RequiresGradOff& operator=(const RequiresGradOff&) = delete;

 private:
  std::vector<torch::Tensor> params_;
};

double checked(const torch::Tensor& term, const std::string& name, int64_t iteration) {
  const double v = term.item<double>();
  if (!std::isfinite(v)) throw NonFiniteLoss(name, iteration);
  return v;
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

void restore_rng(std::mt19937_64& rng, const std::string& state) {
  std::istringstream in(state);
  in >> rng;
  if (!in) throw IoError("corrupt RNG state in checkpoint");
}

std::string config_text(const TrainConfig& cfg) {
  std::ostringstream out;
  kv::write(out, cfg.to_map());
  return out.str();
}

/// Real-data term for the attribute heads. Bidirectional heads each learn the
/// full real-label classification (the second call routes every sample to the
/// other head); single-head modes train the one head on real labels.
torch::Tensor real_attr_term(const DiscOutput& d, const torch::Tensor& y, DiscriminatorMode mode) {
  if (mode == DiscriminatorMode::bidirectional) return loss_bi(d, y, y) + loss_bi(d, 1 - y, y);
  return loss_bi(d, y, y);
}

/// Pointwise check that no isolated parameter's gradient moved from its baseline.
void assert_isolated(const std::vector<torch::Tensor>& params, const std::vector<torch::Tensor>& baseline,
                     int64_t iteration) {
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& g = params[i].grad();
    const auto& b = baseline[i];
    const bool moved = g.defined() != b.defined() || (g.defined() && !g.equal(b));
    if (moved) throw StateError("isolated parameter received a gradient at iteration " + std::to_string(iteration));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage I
// ---------------------------------------------------------------------------

Stage1Trainer::Stage1Trainer(TrainConfig cfg, const NetConfig& net, const AttrImageDataset& ds)
    : Stage1Trainer(std::move(cfg), net, ds.images, ds.labels, ds.attr_names) {
  if (net.profile != NetProfile::conv || net.image_size != ds.image_size() || net.channels != ds.channels())
    throw std::invalid_argument("network config does not match the dataset");
}

Stage1Trainer::Stage1Trainer(TrainConfig cfg, const NetConfig& net, torch::Tensor inputs, torch::Tensor labels,
                             std::vector<std::string> attr_names)
    : cfg_(std::move(cfg)), inputs_(std::move(inputs)), labels_(std::move(labels)), rng_(cfg_.seed) {
  cfg_.validate();
  if (!inputs_.defined() || inputs_.size(0) == 0) throw std::invalid_argument("training data is empty");
  if (!labels_.defined() || labels_.dim() != 2 || labels_.size(0) != inputs_.size(0))
    throw std::invalid_argument("labels must be (N, N_A) and match the inputs");
  auto n = net;
  n.num_attrs = labels_.size(1);
  n.bidirectional = cfg_.discriminator_mode == DiscriminatorMode::bidirectional;
  torch::manual_seed(cfg_.seed);
  model_ = Stage1Model::create(n, attr_names);
  check_input(model_.net, inputs_.narrow(0, 0, 1), "training data");
  init_optimizers();
}

void Stage1Trainer::init_optimizers() {
  opt_g_ = make_adam(model_.generator_parameters(), cfg_.lr_generator, cfg_);
  opt_d_ = make_adam(model_.disc->parameters(), cfg_.lr_discriminator, cfg_);
}

Stage1Trainer Stage1Trainer::resume(const fs::path& checkpoint, TrainConfig cfg, const AttrImageDataset& ds) {
  CheckpointReader in(checkpoint);
  if (in.kind() != "stage1") throw IoError(checkpoint.string() + " is not a stage1 checkpoint");
  auto model = Stage1Model::read(in);
  if (model.attr_names != ds.attr_names) throw std::invalid_argument("checkpoint attributes do not match the dataset");
  std::istringstream saved_text(in.get_string("train_config"));
  const auto saved = TrainConfig::from_map(kv::parse(saved_text));
  if (saved.discriminator_mode != cfg.discriminator_mode)
    throw std::invalid_argument("discriminator_mode differs from the checkpoint");

  Stage1Trainer t(std::move(cfg), model.net, ds);
  t.model_ = std::move(model);
  t.init_optimizers();
  in.load_optimizer("opt_g", *t.opt_g_);
  in.load_optimizer("opt_d", *t.opt_d_);
  restore_rng(t.rng_, in.get_string("rng"));
  t.iter_ = in.get_int("iteration");
  t.curves_ = LossCurves::from_csv(in.get_string("curves"));
  t.flushed_ = t.curves_.records().size();
  return t;
}

std::map<std::string, double> Stage1Trainer::step() {
  const auto it = iter_ + 1;
  const auto mode = cfg_.discriminator_mode;
  set_lr(*opt_g_, scheduled_lr(cfg_.lr_generator, iter_, cfg_.iters_stage1, cfg_.decay_start));
  set_lr(*opt_d_, scheduled_lr(cfg_.lr_discriminator, iter_, cfg_.iters_stage1, cfg_.decay_start));
  model_.train(true);

  const auto idx = sample_indices(rng_, inputs_.size(0), cfg_.batch_size);
  const auto x = inputs_.index_select(0, idx);
  const auto y = labels_.index_select(0, idx);
  // One edit plan per iteration, shared by the discriminator and generator phases.
  const auto plan = edit_code(y, y, rng_);
  std::map<std::string, double> out;

  for (int64_t k = 0; k < cfg_.d_steps; ++k) {
    torch::Tensor x_bar;
    {
      torch::NoGradGuard guard;
      auto lat = model_.encoder->forward(x);
      x_bar = model_.decoder->forward(x, lat, edit_code(lat.code, y, plan.mask, plan.values).c_bar);
    }
    auto dx = model_.disc->forward(x);
    auto attr = real_attr_term(dx, y, mode);
    DiscOutput dxb;
    if (mode != DiscriminatorMode::d_attr || dx.realism.defined()) dxb = model_.disc->forward(x_bar);
    if (mode != DiscriminatorMode::d_attr) attr = attr + loss_attr_disc(dxb, y, plan.mask);
    auto total = attr;
    torch::Tensor adv;
    if (dx.realism.defined()) {
      adv = loss_adv(dx.realism, dxb.realism, AdvSide::discriminator);
      total = total + adv;
    }
    out["d_attr"] = checked(attr, "d_attr", it);
    if (adv.defined()) out["d_adv"] = checked(adv, "d_adv", it);
    out["d_total"] = checked(total, "d_total", it);
    opt_d_->zero_grad();
    total.backward();
    opt_d_->step();
  }

  {
    RequiresGradOff freeze_d(model_.disc->parameters());
    auto lat = model_.encoder->forward(x);
    const auto& c = lat.code;
    const auto edited = edit_code(c, y, plan.mask, plan.values);
    auto x_hat = model_.decoder->forward(x, lat, c);
    auto x_bar = model_.decoder->forward(x, lat, edited.c_bar);
    auto dxb = model_.disc->forward(x_bar);
    auto dxh = model_.disc->forward(x_hat);

    Stage1Parts parts;
    parts.rec = loss_rec(x_hat, x);
    parts.cclf = loss_cclf(c, y);
    parts.bi = loss_bi(dxb, y, edited.y_bar);
    if (dxb.realism.defined()) parts.adv = loss_adv({}, dxb.realism, AdvSide::generator);
    parts.util = loss_util(dxb, dxh, y, plan.mask, cfg_.margins.delta2, cfg_.margins.delta3);
    {
      // The encoder is a fixed measuring device here: the gradient reaches G only through x_bar.
      RequiresGradOff freeze_e(model_.encoder->parameters());
      parts.reg = loss_reg(model_.encoder->forward(x_bar).flat(), lat.flat().detach(), cfg_.margins.delta1);
    }
    auto total = loss_generator_total(parts, cfg_.weights);

    out["rec"] = checked(parts.rec, "rec", it);
    out["cclf"] = checked(parts.cclf, "cclf", it);
    out["bi"] = checked(parts.bi, "bi", it);
    if (parts.adv.defined()) out["adv"] = checked(parts.adv, "adv", it);
    out["util"] = checked(parts.util, "util", it);
    out["reg"] = checked(parts.reg, "reg", it);
    out["g_total"] = checked(total, "g_total", it);
    opt_g_->zero_grad();
    total.backward();
    opt_g_->step();
  }
  if (cfg_.debug_checks) assert_isolated(isolated_, isolated_grads_, it);

  iter_ = it;
  if (iter_ == 1 || iter_ % cfg_.log_every == 0)
    for (const auto& [term, v] : out) curves_.add(iter_, term, v);
  return out;
}

void Stage1Trainer::set_isolated_parameters(std::vector<torch::Tensor> params) {
  isolated_ = std::move(params);
  isolated_grads_.clear();
  for (const auto& p : isolated_) isolated_grads_.push_back(p.grad().defined() ? p.grad().clone() : torch::Tensor());
}

void Stage1Trainer::save(const fs::path& path) const {
  CheckpointWriter w("stage1");
  model_.write(w);
  w.put("iteration", iter_);
  w.put("rng", rng_state(rng_));
  w.put("train_config", config_text(cfg_));
  w.put("curves", curves_.to_csv());
  w.put_optimizer("opt_g", *opt_g_);
  w.put_optimizer("opt_d", *opt_d_);
  w.commit(path);
}

void Stage1Trainer::flush(const fs::path& checkpoint) {
  save(checkpoint);
  curves_.append_csv(fs::path(cfg_.out_dir) / "stage1_losses.csv", flushed_);
  flushed_ = curves_.records().size();
}

void Stage1Trainer::run() {
  const bool persist = !cfg_.out_dir.empty();
  while (iter_ < cfg_.iters_stage1) {
    step();
    if (persist && cfg_.checkpoint_every > 0 && iter_ % cfg_.checkpoint_every == 0 && iter_ < cfg_.iters_stage1) {
      char name[64];
      std::snprintf(name, sizeof name, "stage1_iter%07lld.ckpt", static_cast<long long>(iter_));
      flush(fs::path(cfg_.out_dir) / name);
    }
  }
  if (persist) flush(fs::path(cfg_.out_dir) / "stage1.ckpt");
  model_.train(false);
}

Stage1Outcome train_stage1(const TrainConfig& cfg, const NetConfig& net, const AttrImageDataset& ds) {
  if (ds.size() == 0) throw std::invalid_argument("dataset is empty");
  auto trainer = cfg.resume_from.empty() ? Stage1Trainer(cfg, net, ds) : Stage1Trainer::resume(cfg.resume_from, cfg, ds);
  trainer.run();
  Stage1Outcome outcome{trainer.model(), trainer.curves(), {}};
  if (!cfg.out_dir.empty()) outcome.checkpoint = fs::path(cfg.out_dir) / "stage1.ckpt";
  return outcome;
}

// ---------------------------------------------------------------------------
// Stage II
// ---------------------------------------------------------------------------

Stage2Trainer::Stage2Trainer(TrainConfig cfg, Stage1Model stage1, const AttrImageDataset& ds)
    : cfg_(std::move(cfg)), ds_(ds), rng_(cfg_.seed + 1) {
  cfg_.validate();
  if (ds_.size() == 0) throw std::invalid_argument("dataset is empty");
  if (stage1.attr_names != ds_.attr_names) throw std::invalid_argument("stage1 attributes do not match the dataset");
  if (stage1.net.profile != NetProfile::conv) throw std::invalid_argument("stage2 needs the conv profile");
  check_input(stage1.net, ds_.images.narrow(0, 0, 1), "training data");
  torch::manual_seed(cfg_.seed + 1);
  model_ = Stage2Model::create(std::move(stage1));
  set_requires_grad(model_.stage1.generator_parameters(), false);
  opt_f_ = make_adam(model_.mix->parameters(), cfg_.lr_generator, cfg_);
  if (cfg_.stage2_update_discriminator) opt_d_ = make_adam(model_.stage1.disc->parameters(), cfg_.lr_discriminator, cfg_);
}

std::map<std::string, double> Stage2Trainer::step() {
  const auto it = iter_ + 1;
  set_lr(*opt_f_, scheduled_lr(cfg_.lr_generator, iter_, cfg_.iters_stage2, cfg_.decay_start));
  model_.train(true);

  const auto idx = sample_indices(rng_, ds_.size(), cfg_.batch_size);
  const auto x = ds_.images.index_select(0, idx);
  const auto y = ds_.labels.index_select(0, idx);
  const auto target = std::uniform_int_distribution<int64_t>(0, ds_.num_attrs() - 1)(rng_);
  std::map<std::string, double> out;

  torch::Tensor x_bar, c, c_bar;
  {
    torch::NoGradGuard guard;
    auto lat = model_.stage1.encoder->forward(x);
    c = lat.code;
    auto mask = torch::zeros_like(c);
    mask.select(1, target).fill_(1);
    auto values = mask * (1 - c.select(1, target).gt(0.5).to(c.dtype())).unsqueeze(1);
    c_bar = edit_code(c, c, mask, values).c_bar;
    x_bar = model_.stage1.decoder->forward(x, lat, c_bar);
  }
  auto lam = model_.mix->forward(x, x_bar, c, c_bar).lam;
  auto x_prime = apply_mix(x, x_bar, MixMap{lam});
  torch::Tensor loss;
  {
    RequiresGradOff freeze_d(model_.stage1.disc->parameters());
    loss = loss_entropy_stage2(model_.stage1.disc->forward(x_prime), y, target);
  }
  out["ent"] = checked(loss, "ent", it);
  opt_f_->zero_grad();
  loss.backward();
  opt_f_->step();
  last_lambda_ = lam.detach();
  out["lambda_mean"] = last_lambda_.mean().item<double>();

  if (opt_d_) {
    set_lr(*opt_d_, scheduled_lr(cfg_.lr_discriminator, iter_, cfg_.iters_stage2, cfg_.decay_start));
    auto& disc = model_.stage1.disc;
    disc->train(true);
    auto dx = disc->forward(x);
    auto dxp = disc->forward(x_prime.detach());
    auto d_loss = loss_adv(dx.realism, dxp.realism, AdvSide::discriminator);
    out["d_adv"] = checked(d_loss, "d_adv", it);
    opt_d_->zero_grad();
    d_loss.backward();
    opt_d_->step();
    disc->train(false);
  }

  iter_ = it;
  if (iter_ == 1 || iter_ % cfg_.log_every == 0)
    for (const auto& [term, v] : out) curves_.add(iter_, term, v);
  return out;
}

void Stage2Trainer::save(const fs::path& path) const {
  CheckpointWriter w("stage2");
  model_.write(w);
  w.put("iteration", iter_);
  w.put("rng", rng_state(rng_));
  w.put("train_config", config_text(cfg_));
  w.put("curves", curves_.to_csv());
  w.commit(path);
}

void Stage2Trainer::run() {
  const bool persist = !cfg_.out_dir.empty();
  auto flush = [&](const fs::path& ckpt) {
    save(ckpt);
    curves_.append_csv(fs::path(cfg_.out_dir) / "stage2_losses.csv", flushed_);
    flushed_ = curves_.records().size();
  };
  while (iter_ < cfg_.iters_stage2) {
    step();
    if (persist && cfg_.checkpoint_every > 0 && iter_ % cfg_.checkpoint_every == 0 && iter_ < cfg_.iters_stage2) {
      char name[64];
      std::snprintf(name, sizeof name, "stage2_iter%07lld.ckpt", static_cast<long long>(iter_));
      flush(fs::path(cfg_.out_dir) / name);
    }
  }
  if (persist) flush(fs::path(cfg_.out_dir) / "stage2.ckpt");
  model_.train(false);
}

Stage2Outcome train_stage2(const TrainConfig& cfg, const AttrImageDataset& ds, const fs::path& stage1_checkpoint) {
  return train_stage2(cfg, ds, load_stage1(stage1_checkpoint));
}

Stage2Outcome train_stage2(const TrainConfig& cfg, const AttrImageDataset& ds, Stage1Model stage1) {
  Stage2Trainer trainer(cfg, std::move(stage1), ds);
  trainer.run();
  Stage2Outcome outcome{trainer.model(), trainer.curves(), {}};
  if (!cfg.out_dir.empty()) outcome.checkpoint = fs::path(cfg.out_dir) / "stage2.ckpt";
  return outcome;
}

// ---------------------------------------------------------------------------
// Adversary
// ---------------------------------------------------------------------------

AdversaryOutcome train_adversary(const AttrImageDataset& ds, bool mixup, const TrainConfig& cfg, const NetConfig& net) {
  cfg.validate();
  if (ds.size() == 0) throw std::invalid_argument("dataset is empty");
  auto n = net;
  n.profile = NetProfile::conv;
  n.image_size = ds.image_size();
  n.channels = ds.channels();
  n.num_attrs = ds.num_attrs();
  n.validate();

  std::mt19937_64 rng(cfg.seed + (mixup ? 3 : 2));
  torch::manual_seed(cfg.seed + (mixup ? 3 : 2));
  AdversaryModel model;
  model.net = n;
  model.attr_names = ds.attr_names;
  model.mixup = mixup;
  model.net_module = Adversary(n);
  model.net_module->train();
  torch::optim::Adam opt(model.net_module->parameters(), torch::optim::AdamOptions(cfg.adversary_lr));
  std::gamma_distribution<double> gamma(cfg.mixup_alpha, 1.0);

  LossCurves curves;
  const auto batch = cfg.adversary_batch;
  for (int64_t it = 1; it <= cfg.adversary_iters; ++it) {
    auto idx = sample_indices(rng, ds.size(), batch);
    auto x = ds.images.index_select(0, idx);
    auto y = ds.labels.index_select(0, idx);
    if (mixup) {
      // Beta(a, a) as g1 / (g1 + g2) with independent Gamma(a, 1) draws.
      auto lam = torch::empty({batch}, torch::kFloat32);
      auto la = lam.accessor<float, 1>();
      for (int64_t i = 0; i < batch; ++i) {
        const double g1 = gamma(rng), g2 = gamma(rng);
        la[i] = static_cast<float>(g1 / std::max(g1 + g2, 1e-12));
      }
      std::vector<int64_t> perm(static_cast<size_t>(batch));
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      auto p = torch::tensor(perm, torch::kInt64);
      auto l4 = lam.view({-1, 1, 1, 1});
      x = l4 * x + (1 - l4) * x.index_select(0, p);
      auto l2 = lam.view({-1, 1});
      y = l2 * y + (1 - l2) * y.index_select(0, p);
    }
    auto loss = torch::binary_cross_entropy_with_logits(model.net_module->logits(x), y);
    const auto v = checked(loss, "adversary", it);
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (it == 1 || it % cfg.log_every == 0) curves.add(it, "adversary", v);
  }
  model.net_module->set_trained(true);
  model.net_module->eval();

  AdversaryOutcome outcome{model, curves, {}};
  if (!cfg.out_dir.empty()) {
    outcome.checkpoint = fs::path(cfg.out_dir) / (mixup ? "adversary_mixup.ckpt" : "adversary.ckpt");
    save_adversary(outcome.checkpoint, model);
    curves.append_csv(fs::path(cfg.out_dir) / (mixup ? "adversary_mixup_losses.csv" : "adversary_losses.csv"), 0);
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// Toy
// ---------------------------------------------------------------------------

const ToyModeResult& ToyReport::get(DiscriminatorMode mode) const {
  for (const auto& m : modes)
    if (m.mode == mode) return m;
  throw std::out_of_range("toy report lacks mode " + to_string(mode));
}

ToyModeResult train_toy_mode(const TrainConfig& cfg, const LabeledPoints2D& toy, DiscriminatorMode mode,
                             const ToyOptions& options) {
  toy.validate();
  const auto pos = toy.labels.sum().item<double>();
  if (pos == 0 || pos == static_cast<double>(toy.size())) throw std::invalid_argument("toy data has a single class");

  NetConfig net;
  net.profile = NetProfile::mlp;
  net.point_dim = toy.points.size(1);
  net.num_attrs = 1;
  net.hidden = options.hidden;
  net.spectral_norm_on_discriminators = options.spectral_norm;
  auto c = cfg;
  c.discriminator_mode = mode;
  c.out_dir.clear();
  Stage1Trainer trainer(c, net, toy.points, toy.labels.reshape({-1, 1}).to(torch::kFloat32), {"class"});
  trainer.run();

  ToyModeResult r;
  r.mode = mode;
  r.source = toy.points;
  r.labels = toy.labels;
  r.curves = trainer.curves();
  auto& model = trainer.model();
  model.train(false);
  torch::NoGradGuard guard;
  r.translated = model.invert(toy.points, 0);

  const auto lo = std::get<0>(toy.points.min(0)) - options.grid_margin;
  const auto hi = std::get<0>(toy.points.max(0)) + options.grid_margin;
  auto gx = torch::linspace(lo[0].item<double>(), hi[0].item<double>(), options.grid_n);
  auto gy = torch::linspace(lo[1].item<double>(), hi[1].item<double>(), options.grid_n);
  auto mesh = torch::meshgrid({gx, gy}, "ij");
  r.grid = torch::stack({mesh[0].reshape(-1), mesh[1].reshape(-1)}, 1).to(torch::kFloat32);
  auto d = model.disc->forward(r.grid);
  r.conf_pos = d.p_pos.squeeze(1);
  r.conf_neg = d.p_neg.squeeze(1);
  return r;
}

ToyReport train_toy(const TrainConfig& cfg, const LabeledPoints2D& toy, const ToyOptions& options) {
  ToyReport report;
  for (auto mode : {DiscriminatorMode::bidirectional, DiscriminatorMode::d_attr, DiscriminatorMode::d_attr_plus_at})
    report.modes.push_back(train_toy_mode(cfg, toy, mode, options));
  return report;
}

void write_toy_report(const ToyReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    return out;
  };
  auto f = [](float v) { return kv::format_double(static_cast<double>(v)); };

  auto points = open("translated_points.csv");
  points << "mode,direction,src_x,src_y,out_x,out_y\n";
  for (const auto& m : report.modes) {
    auto s = m.source.accessor<float, 2>();
    auto o = m.translated.accessor<float, 2>();
    const auto labels = m.labels.to(torch::kFloat32).contiguous();
    auto l = labels.accessor<float, 1>();
    for (int64_t i = 0; i < m.source.size(0); ++i)
      points << to_string(m.mode) << ',' << (l[i] > 0.5f ? "pos_to_neg" : "neg_to_pos") << ',' << f(s[i][0]) << ','
             << f(s[i][1]) << ',' << f(o[i][0]) << ',' << f(o[i][1]) << '\n';
  }

  auto grid = [&](const char* name, const torch::Tensor& nodes, const torch::Tensor& p) {
    auto out = open(name);
    out << "x,y,p\n";
    auto g = nodes.accessor<float, 2>();
    auto a = p.accessor<float, 1>();
    for (int64_t i = 0; i < nodes.size(0); ++i) out << f(g[i][0]) << ',' << f(g[i][1]) << ',' << f(a[i]) << '\n';
  };
  const auto& single = report.get(DiscriminatorMode::d_attr);
  const auto& bi = report.get(DiscriminatorMode::bidirectional);
  grid("confidence_grid_dattr.csv", single.grid, single.conf_pos);
  grid("confidence_grid_dpos.csv", bi.grid, bi.conf_pos);
  grid("confidence_grid_dneg.csv", bi.grid, bi.conf_neg);
}

}  // namespace attrobf
