#include "attrobf/losses.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace attrobf {

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.defined() || !b.defined() || !a.sizes().equals(b.sizes()))
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

void require_binary(const torch::Tensor& t, const char* what) {
  if (!(t.eq(0) | t.eq(1)).all().item<bool>()) throw std::invalid_argument(std::string(what) + " must be binary");
}

}  // namespace

void Margins::validate() const {
  if (delta1 < 0 || delta2 < 0 || delta3 < 0) throw std::invalid_argument("margins must be non-negative");
}

void LossWeights::validate() const {
  if (lambda1 < 0 || lambda2 < 0) throw std::invalid_argument("loss weights must be non-negative");
}

torch::Tensor bce(const torch::Tensor& p, const torch::Tensor& target) {
  auto q = p.clamp(kProbEps, 1.0 - kProbEps);
  return -(target * torch::log(q) + (1 - target) * torch::log(1 - q));
}

torch::Tensor loss_rec(const torch::Tensor& x_hat, const torch::Tensor& x) {
  require_same_shape(x_hat, x, "loss_rec");
  return (x_hat - x).abs().mean();
}

torch::Tensor loss_cclf(const torch::Tensor& c, const torch::Tensor& y) {
  require_same_shape(c, y, "loss_cclf");
  return (c - y).pow(2).mean();
}

int64_t max_edits(int64_t num_attrs) { return std::max<int64_t>(1, num_attrs / 2); }

EditPlan edit_code(const torch::Tensor& c, const torch::Tensor& y, std::mt19937_64& rng) {
  require_same_shape(c, y, "edit_code");
  if (c.dim() != 2) throw std::invalid_argument("edit_code: expected (B, N_A) codes");
  const auto batch = c.size(0), n = c.size(1);
  auto mask = torch::zeros({batch, n}, torch::kFloat32);
  auto values = torch::zeros({batch, n}, torch::kFloat32);
  auto m = mask.accessor<float, 2>();
  auto s = values.accessor<float, 2>();

  std::uniform_int_distribution<int64_t> count(1, max_edits(n));
  std::bernoulli_distribution coin(0.5);
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t b = 0; b < batch; ++b) {
    const auto ns = count(rng);
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first ns entries are a uniform ns-subset.
    for (int64_t i = 0; i < ns; ++i) {
      std::uniform_int_distribution<int64_t> pick(i, n - 1);
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(pick(rng))]);
      const auto pos = order[static_cast<size_t>(i)];
      m[b][pos] = 1.0f;
      s[b][pos] = coin(rng) ? 1.0f : 0.0f;
    }
  }
  return edit_code(c, y, mask.to(c.dtype()), values.to(c.dtype()));
}

EditPlan edit_code(const torch::Tensor& c, const torch::Tensor& y, const torch::Tensor& mask,
                   const torch::Tensor& values) {
  require_same_shape(c, y, "edit_code");
  auto m = mask.expand_as(c).to(c.dtype());
  auto v = values.expand_as(c).to(c.dtype());
  require_binary(m, "edit mask");
  require_binary(v, "edit values");
  EditPlan plan;
  plan.mask = m;
  plan.values = v * m;
  plan.num_edited = m.sum(1).to(torch::kInt64);
  plan.c_bar = c * (1 - m) + plan.values;
  plan.y_bar = y * (1 - m) + plan.values;
  return plan;
}

torch::Tensor loss_bi(const DiscOutput& disc, const torch::Tensor& y_org, const torch::Tensor& y_tar,
                      const std::optional<torch::Tensor>& mask) {
  require_same_shape(disc.p_pos, disc.p_neg, "loss_bi");
  require_same_shape(disc.p_pos, y_org, "loss_bi");
  require_same_shape(disc.p_pos, y_tar, "loss_bi");
  if (y_tar.numel() > 0 && (y_tar.min().item<double>() < 0.0 || y_tar.max().item<double>() > 1.0))
    throw std::invalid_argument("loss_bi: targets must lie in [0, 1]");
  auto per = y_org * bce(disc.p_pos, y_tar) + (1 - y_org) * bce(disc.p_neg, y_tar);
  if (!mask) return per.mean();
  auto m = mask->expand_as(per).to(per.dtype());
  return (per * m).sum() / m.sum().clamp_min(1.0);
}

torch::Tensor loss_attr_disc(const DiscOutput& disc_on_generated, const torch::Tensor& y, const torch::Tensor& m) {
  return loss_bi(disc_on_generated, y, y, m);
}

torch::Tensor loss_adv(const torch::Tensor& realism_real, const torch::Tensor& realism_fake, AdvSide side) {
  if (!realism_fake.defined()) throw std::invalid_argument("loss_adv: missing generated-image scores");
  auto fake = realism_fake.clamp(kProbEps, 1.0 - kProbEps);
  if (side == AdvSide::generator) return -torch::log(fake).mean();
  if (!realism_real.defined()) throw std::invalid_argument("loss_adv: missing real-image scores");
  auto real = realism_real.clamp(kProbEps, 1.0 - kProbEps);
  return -(torch::log(real).mean() + torch::log(1 - fake).mean());
}

torch::Tensor loss_reg(const torch::Tensor& e_xbar, const torch::Tensor& e_x, double delta1) {
  require_same_shape(e_xbar, e_x, "loss_reg");
  if (delta1 < 0) throw std::invalid_argument("loss_reg: delta1 must be non-negative");
  const auto batch = e_x.dim() == 0 ? 1 : e_x.size(0);
  auto dist = (e_xbar - e_x).abs().reshape({batch, -1}).mean(1);
  return torch::relu(dist - delta1).mean();
}

torch::Tensor loss_util(const DiscOutput& disc_xbar, const DiscOutput& disc_xhat, const torch::Tensor& y,
                        const torch::Tensor& m, double delta2, double delta3) {
  if (delta2 < 0 || delta3 < 0) throw std::invalid_argument("loss_util: margins must be non-negative");
  auto keep = 1 - m.expand_as(y).to(y.dtype());
  auto inverted = torch::relu(loss_bi(disc_xbar, y, y, keep) - delta2);
  auto reconstructed = torch::relu(loss_bi(disc_xhat, y, y) - delta3);
  return inverted + reconstructed;
}

torch::Tensor loss_generator_total(const Stage1Parts& parts, const LossWeights& weights) {
  torch::Tensor total;
  auto add = [&](const torch::Tensor& term, double w) {
    if (!term.defined()) return;
    auto scaled = w == 1.0 ? term : term * w;
    total = total.defined() ? total + scaled : scaled;
  };
  add(parts.rec, 1.0);
  add(parts.cclf, 1.0);
  add(parts.bi, 1.0);
  add(parts.adv, 1.0);
  add(parts.util, weights.lambda1);
  add(parts.reg, weights.lambda2);
  return total.defined() ? total : torch::zeros({});
}

torch::Tensor loss_entropy_stage2(const DiscOutput& disc_xprime, const torch::Tensor& y_org, int64_t target_attr) {
  require_same_shape(disc_xprime.p_pos, y_org, "loss_entropy_stage2");
  const auto n = y_org.size(1);
  if (target_attr < 0 || target_attr >= n) throw std::invalid_argument("loss_entropy_stage2: target out of range");

  auto half = torch::full({y_org.size(0)}, 0.5, y_org.options());
  auto at_target = 0.5 * (bce(disc_xprime.p_pos.select(1, target_attr), half) +
                          bce(disc_xprime.p_neg.select(1, target_attr), half));
  auto total = at_target.mean();
  if (n > 1) {
    auto others = torch::ones_like(y_org);
    others.select(1, target_attr).fill_(0);
    total = total + loss_bi(disc_xprime, y_org, y_org, others);
  }
  if (disc_xprime.realism.defined()) total = total + loss_adv({}, disc_xprime.realism, AdvSide::generator);
  return total;
}

}  // namespace attrobf
