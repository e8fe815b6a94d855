#include <doctest.h>
#include <torch/torch.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <random>

#include "attrobf/losses.hpp"
#include "oracles.hpp"
#include "tensor_helpers.hpp"

using namespace attrobf;
using testutil::as_mat;
using testutil::as_vec;

namespace {

struct TinyBatch {
  torch::Tensor p_pos, p_neg, real, fake, y, y_tar, mask;
};

TinyBatch random_batch(std::mt19937_64& rng) {
  std::uniform_int_distribution<int64_t> bdist(1, 4), ndist(1, 5);
  const auto b = bdist(rng), n = ndist(rng);
  auto uni = [&](std::vector<int64_t> shape, double lo, double hi) { return testutil::uniform(rng, shape, lo, hi); };
  TinyBatch t;
  t.p_pos = uni({b, n}, 0.0, 1.0);
  t.p_neg = uni({b, n}, 0.0, 1.0);
  t.real = uni({b}, 0.0, 1.0);
  t.fake = uni({b}, 0.0, 1.0);
  t.y = uni({b, n}, 0.0, 1.0).gt(0.5).to(torch::kFloat64);
  t.y_tar = uni({b, n}, 0.0, 1.0);
  t.mask = uni({b, n}, 0.0, 1.0).gt(0.5).to(torch::kFloat64);
  return t;
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("bce matches the scalar formula, including clamped extremes") {
  auto p = torch::tensor({0.0, 1e-9, 0.3, 0.5, 1.0}, torch::kFloat64);
  auto t = torch::tensor({0.0, 1.0, 0.7, 0.5, 0.0}, torch::kFloat64);
  auto got = as_vec(bce(p, t));
  for (size_t i = 0; i < got.size(); ++i)
    CHECK(got[i] == doctest::Approx(oracle::bce(as_vec(p)[i], as_vec(t)[i])).epsilon(1e-12));
}

TEST_CASE("every loss agrees with its brute-force oracle on 100 random tiny batches") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_batch(rng);
    const auto pp = as_mat(t.p_pos), pn = as_mat(t.p_neg), y = as_mat(t.y), yt = as_mat(t.y_tar), m = as_mat(t.mask);
    DiscOutput d{t.p_pos, t.p_neg, t.real};
    DiscOutput dh{t.p_neg, t.p_pos, t.fake};

    CHECK(loss_rec(t.p_pos, t.p_neg).item<double>() == doctest::Approx(oracle::rec(as_vec(t.p_pos), as_vec(t.p_neg))).epsilon(kTol));
    CHECK(loss_cclf(t.p_pos, t.y).item<double>() == doctest::Approx(oracle::cclf(pp, y)).epsilon(kTol));
    CHECK(loss_bi(d, t.y, t.y_tar).item<double>() == doctest::Approx(oracle::bi(pp, pn, y, yt)).epsilon(kTol));
    CHECK(loss_bi(d, t.y, t.y_tar, t.mask).item<double>() == doctest::Approx(oracle::bi(pp, pn, y, yt, &m)).epsilon(kTol));
    CHECK(loss_attr_disc(d, t.y, t.mask).item<double>() == doctest::Approx(oracle::bi(pp, pn, y, y, &m)).epsilon(kTol));
    CHECK(loss_adv(t.real, t.fake, AdvSide::discriminator).item<double>() ==
          doctest::Approx(oracle::adv_discriminator(as_vec(t.real), as_vec(t.fake))).epsilon(kTol));
    CHECK(loss_adv({}, t.fake, AdvSide::generator).item<double>() ==
          doctest::Approx(oracle::adv_generator(as_vec(t.fake))).epsilon(kTol));
    const double d1 = std::uniform_real_distribution<double>(0.0, 0.3)(rng);
    CHECK(loss_reg(t.p_pos, t.p_neg, d1).item<double>() == doctest::Approx(oracle::reg(pp, pn, d1)).epsilon(kTol));
    const double d2 = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    const double d3 = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    CHECK(loss_util(d, dh, t.y, t.mask, d2, d3).item<double>() ==
          doctest::Approx(oracle::util(pp, pn, as_mat(t.p_neg), as_mat(t.p_pos), y, m, d2, d3)).epsilon(kTol));
    const auto target = std::uniform_int_distribution<int64_t>(0, t.y.size(1) - 1)(rng);
    CHECK(loss_entropy_stage2(d, t.y, target).item<double>() ==
          doctest::Approx(oracle::entropy_stage2(pp, pn, as_vec(t.real), y, static_cast<size_t>(target))).epsilon(kTol));
  }
}

TEST_CASE("generator total weighs util and reg and skips missing terms") {
  Stage1Parts parts;
  parts.rec = torch::tensor(1.0);
  parts.bi = torch::tensor(2.0);
  parts.util = torch::tensor(3.0);
  parts.reg = torch::tensor(4.0);
  LossWeights w{0.5, 0.25};
  CHECK(loss_generator_total(parts, w).item<double>() == doctest::Approx(1.0 + 2.0 + 1.5 + 1.0));
  CHECK(loss_generator_total(Stage1Parts{}, w).item<double>() == 0.0);
}

TEST_CASE("masked bi loss with an empty mask is zero") {
  auto p = torch::full({2, 3}, 0.3, torch::kFloat64);
  DiscOutput d{p, p, {}};
  CHECK(loss_bi(d, torch::ones_like(p), torch::zeros_like(p), torch::zeros_like(p)).item<double>() == 0.0);
}

TEST_CASE("loss preconditions") {
  auto p = torch::full({2, 3}, 0.3);
  DiscOutput d{p, p, {}};
  CHECK_THROWS_AS(loss_bi(d, torch::ones_like(p), torch::full_like(p, 1.5)), std::invalid_argument);
  CHECK_THROWS_AS(loss_bi(d, torch::ones({2, 2}), torch::ones({2, 2})), std::invalid_argument);
  CHECK_THROWS_AS(loss_reg(p, p, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(loss_rec(p, torch::ones({3, 2})), std::invalid_argument);
  CHECK_THROWS_AS(loss_entropy_stage2(d, torch::ones_like(p), 3), std::invalid_argument);
  CHECK_THROWS_AS(loss_adv({}, {}, AdvSide::generator), std::invalid_argument);
  const Margins negative{-1, 0, 0};
  CHECK_THROWS_AS(negative.validate(), std::invalid_argument);
}

TEST_CASE("loss gradients match central differences") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto t = random_batch(rng);
    // Keep probabilities away from the clamp so the loss is smooth where we probe it.
    auto pp = testutil::uniform(rng, {t.y.size(0), t.y.size(1)}, 0.05, 0.95);
    auto pn = testutil::uniform(rng, {t.y.size(0), t.y.size(1)}, 0.05, 0.95);
    auto fake = testutil::uniform(rng, {t.y.size(0)}, 0.05, 0.95);
    const auto target = std::uniform_int_distribution<int64_t>(0, t.y.size(1) - 1)(rng);

    auto fn_bi = [&](const torch::Tensor& p) { return loss_bi(DiscOutput{p, pn, {}}, t.y, t.y_tar, t.mask); };
    CHECK(testutil::gradcheck(fn_bi, pp).pass);
    auto fn_ent = [&](const torch::Tensor& p) { return loss_entropy_stage2(DiscOutput{p, pn, fake}, t.y, target); };
    CHECK(testutil::gradcheck(fn_ent, pp).pass);
    auto fn_adv = [&](const torch::Tensor& f) { return loss_adv(t.real, f, AdvSide::discriminator); };
    CHECK(testutil::gradcheck(fn_adv, fake).pass);
    auto fn_reg = [&](const torch::Tensor& e) { return loss_reg(e, pn, 0.0); };
    CHECK(testutil::gradcheck(fn_reg, pp).pass);
  }
}

// ---------------------------------------------------------------------------
// Label editing
// ---------------------------------------------------------------------------

TEST_CASE("max_edits") {
  CHECK(max_edits(1) == 1);
  CHECK(max_edits(3) == 1);
  CHECK(max_edits(10) == 5);
  CHECK(max_edits(40) == 20);
}

TEST_CASE("edit sampler: unedited positions kept, counts and positions uniform") {
  const int64_t draws = 100000, n = 10;
  std::mt19937_64 rng(3);
  auto c = testutil::uniform(rng, {draws, n}, 0.0, 1.0).to(torch::kFloat32);
  auto y = c.gt(0.5).to(torch::kFloat32);
  auto plan = edit_code(c, y, rng);

  auto keep = plan.mask.eq(0);
  CHECK(plan.c_bar.index({keep}).equal(c.index({keep})));
  CHECK(plan.y_bar.index({keep}).equal(y.index({keep})));
  CHECK(plan.c_bar.index({~keep}).equal(plan.values.index({~keep})));

  const auto ns = testutil::counts(plan.num_edited, 1, 5);
  CHECK(ns.size() == 5);
  CHECK(plan.num_edited.min().item<int64_t>() >= 1);
  CHECK(plan.num_edited.max().item<int64_t>() <= 5);
  std::vector<double> expected_ns(5, draws / 5.0);
  boost::math::chi_squared chi4(4);
  CHECK(boost::math::cdf(boost::math::complement(chi4, oracle::chi_square(ns, expected_ns))) > 0.01);

  auto per_pos = plan.mask.sum(0).to(torch::kFloat64);
  const auto pos = testutil::as_vec(per_pos);
  std::vector<double> expected_pos(n, per_pos.sum().item<double>() / n);
  boost::math::chi_squared chi9(9);
  CHECK(boost::math::cdf(boost::math::complement(chi9, oracle::chi_square(pos, expected_pos))) > 0.01);

  const double ones = plan.values.sum().item<double>(), total = plan.mask.sum().item<double>();
  boost::math::chi_squared chi1(1);
  CHECK(boost::math::cdf(boost::math::complement(chi1, oracle::chi_square({ones, total - ones}, {total / 2, total / 2}))) > 0.01);
}

TEST_CASE("explicit edits validate their inputs") {
  auto c = torch::rand({2, 3});
  auto y = torch::ones({2, 3});
  CHECK_THROWS_AS(edit_code(c, y, torch::full({2, 3}, 0.5), torch::zeros({2, 3})), std::invalid_argument);
  CHECK_THROWS_AS(edit_code(c, torch::ones({2, 2}), torch::zeros({2, 3}), torch::zeros({2, 3})), std::invalid_argument);
  auto mask = torch::tensor({{1.f, 0.f, 0.f}, {0.f, 0.f, 1.f}});
  auto plan = edit_code(c, y, mask, torch::zeros({2, 3}));
  CHECK(plan.c_bar[0][0].item<float>() == 0.f);
  CHECK(plan.c_bar[0][1].item<float>() == c[0][1].item<float>());
  CHECK(plan.num_edited.equal(torch::tensor({1, 1}, torch::kInt64)));
  CHECK(plan.y_bar.equal(torch::tensor({{0.f, 1.f, 1.f}, {1.f, 1.f, 0.f}})));
}

TEST_CASE("edit sampler is reproducible for a fixed seed") {
  auto c = torch::rand({64, 6});
  std::mt19937_64 a(9), b(9);
  CHECK(edit_code(c, c, a).mask.equal(edit_code(c, c, b).mask));
}
