#include "attrobf/evalkit.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "attrobf/errors.hpp"
#include "attrobf/kv.hpp"

namespace attrobf {

namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string num(double v) { return std::isnan(v) ? "nan" : kv::format_double(v); }

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

AttrImageDataset eval_subset(const AttrImageDataset& ds, int64_t attr, const EvalOptions& options) {
  if (options.max_per_attr > 0) return balanced_eval_split(ds, attr, options.max_per_attr);
  return ds;
}

torch::Tensor predict_all(AdversaryModel& adversary, const torch::Tensor& images, int64_t batch) {
  return batched(images, batch, [&](const torch::Tensor& x) { return adversary.predict(x); });
}

torch::Tensor transform_all(const AttrTransform& fn, const torch::Tensor& images, int64_t attr, int64_t batch) {
  return batched(images, batch, [&](const torch::Tensor& x) { return fn(x, attr); });
}

double mean_of(const torch::Tensor& t) { return t.numel() == 0 ? kNaN : t.to(torch::kFloat64).mean().item<double>(); }

struct Rates {
  double tpr, tnr, acc;
};

Rates rates(const torch::Tensor& p, const torch::Tensor& y) {
  auto pred = p.gt(0.5);
  auto pos = y.gt(0.5);
  auto correct = pred.eq(pos);
  return {mean_of(correct.index({pos})), mean_of(correct.index({~pos})), mean_of(correct)};
}

double mean_over(const std::vector<double>& v) {
  double s = 0;
  int64_t n = 0;
  for (double x : v)
    if (!std::isnan(x)) s += x, ++n;
  return n == 0 ? kNaN : s / static_cast<double>(n);
}

std::vector<int64_t> resolve(const AttrImageDataset& ds, const std::vector<std::string>& attrs) {
  std::vector<int64_t> idx;
  for (const auto& a : attrs) idx.push_back(ds.attr_index(a));
  return idx;
}

void require_adversary_matches(const AdversaryModel& adversary, const AttrImageDataset& ds) {
  if (adversary.attr_names != ds.attr_names) throw std::invalid_argument("adversary attributes do not match the dataset");
}

}  // namespace

double shannon_entropy(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("shannon_entropy: p must lie in [0, 1]");
  auto term = [](double q) { return q <= 0.0 ? 0.0 : -q * std::log2(q); };
  return term(p) + term(1.0 - p);
}

torch::Tensor shannon_entropy(const torch::Tensor& p) {
  if (p.numel() > 0 && (p.min().item<double>() < 0.0 || p.max().item<double>() > 1.0))
    throw std::invalid_argument("shannon_entropy: p must lie in [0, 1]");
  auto term = [](const torch::Tensor& q) { return torch::where(q > 0, -q * torch::log2(q.clamp_min(1e-300)), torch::zeros_like(q)); };
  auto d = p.to(torch::kFloat64);
  return (term(d) + term(1 - d)).clamp(0.0, 1.0);
}

AttrTransform identity_transform() {
  return [](const torch::Tensor& x, int64_t) { return x; };
}

AttrTransform inversion_transform(Stage1Model& model) {
  return [&model](const torch::Tensor& x, int64_t attr) { return model.invert(x, attr); };
}

AttrTransform obfuscation_transform(Stage2Model& model) {
  return [&model](const torch::Tensor& x, int64_t attr) { return model.obfuscate(x, attr).x_prime; };
}

// ---------------------------------------------------------------------------
// Inversion
// ---------------------------------------------------------------------------

double InversionReport::mean_real_acc() const {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.real_acc);
  return mean_over(v);
}

double InversionReport::mean_inv_acc() const {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.inv_acc);
  return mean_over(v);
}

double InversionReport::mean_other_acc() const {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.inv_other_acc);
  return mean_over(v);
}

InversionReport eval_inversion(const AttrTransform& invert, AdversaryModel& adversary, const AttrImageDataset& ds,
                               const std::vector<std::string>& attrs, const EvalOptions& options) {
  require_adversary_matches(adversary, ds);
  InversionReport report;
  for (auto a : resolve(ds, attrs)) {
    const auto sub = eval_subset(ds, a, options);
    InversionRow row;
    row.attribute = ds.attr_names[static_cast<size_t>(a)];
    const auto y = sub.labels;
    row.n_pos = y.select(1, a).gt(0.5).sum().item<int64_t>();
    row.n_neg = sub.size() - row.n_pos;
    if (row.n_pos == 0 || row.n_neg == 0) row.warning = "single-class split";
    else if (row.n_pos != row.n_neg) row.warning = "unbalanced split";

    const auto p_real = predict_all(adversary, sub.images, options.batch);
    const auto p_inv = predict_all(adversary, transform_all(invert, sub.images, a, options.batch), options.batch);
    const auto real = rates(p_real.select(1, a), y.select(1, a));
    const auto inv = rates(p_inv.select(1, a), y.select(1, a));
    row.real_tpr = real.tpr, row.real_tnr = real.tnr, row.real_acc = real.acc;
    row.inv_tpr = inv.tpr, row.inv_tnr = inv.tnr, row.inv_acc = inv.acc;
    if (ds.num_attrs() > 1) {
      auto others = torch::ones({ds.num_attrs()}, torch::kBool);
      others[a] = false;
      auto correct = p_inv.gt(0.5).eq(y.gt(0.5));
      row.inv_other_acc = mean_of(correct.index({torch::indexing::Slice(), others}));
    } else {
      row.inv_other_acc = kNaN;
    }
    report.rows.push_back(row);
  }
  return report;
}

void write_inversion_csv(const InversionReport& report, const fs::path& path) {
  auto out = open_out(path);
  out << kInversionHeader << '\n';
  for (const auto& r : report.rows)
    out << r.attribute << ',' << r.n_pos << ',' << r.n_neg << ',' << num(r.real_tpr) << ',' << num(r.real_tnr) << ','
        << num(r.real_acc) << ',' << num(r.inv_tpr) << ',' << num(r.inv_tnr) << ',' << num(r.inv_acc) << ','
        << num(r.inv_other_acc) << ',' << r.warning << '\n';
}

// ---------------------------------------------------------------------------
// Uncertainty
// ---------------------------------------------------------------------------

double UncertaintyReport::mean_real_entropy() const {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.real_entropy);
  return mean_over(v);
}

double UncertaintyReport::mean_ours_entropy() const {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.ours_entropy);
  return mean_over(v);
}

double UncertaintyReport::mean_prob_movement() const {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(std::abs(r.real_prob - 0.5) - std::abs(r.ours_prob - 0.5));
  return mean_over(v);
}

UncertaintyReport eval_uncertainty(const AttrTransform& obfuscate, AdversaryModel& mixup_adversary,
                                   const AttrImageDataset& ds, const std::vector<std::string>& attrs,
                                   const EvalOptions& options) {
  require_adversary_matches(mixup_adversary, ds);
  UncertaintyReport report;
  for (auto a : resolve(ds, attrs)) {
    const auto sub = eval_subset(ds, a, options);
    const auto y = sub.labels.select(1, a).gt(0.5);
    const auto p_real = predict_all(mixup_adversary, sub.images, options.batch).select(1, a);
    const auto p_ours =
        predict_all(mixup_adversary, transform_all(obfuscate, sub.images, a, options.batch), options.batch).select(1, a);
    for (bool positive : {true, false}) {
      const auto sel = positive ? y : ~y;
      // Probability of the original label.
      auto own = [&](const torch::Tensor& p) {
        auto q = p.index({sel});
        return positive ? q : 1 - q;
      };
      UncertaintyRow row;
      row.attribute = ds.attr_names[static_cast<size_t>(a)];
      row.direction = positive ? "pos_to_uncertain" : "neg_to_uncertain";
      row.n = sel.sum().item<int64_t>();
      row.real_entropy = mean_of(shannon_entropy(p_real.index({sel})));
      row.ours_entropy = mean_of(shannon_entropy(p_ours.index({sel})));
      row.gain_entropy = row.ours_entropy - row.real_entropy;
      row.real_prob = mean_of(own(p_real));
      row.ours_prob = mean_of(own(p_ours));
      row.gain_prob = row.real_prob - row.ours_prob;
      report.rows.push_back(row);
    }
  }
  return report;
}

void write_uncertainty_csv(const UncertaintyReport& report, const fs::path& path) {
  auto out = open_out(path);
  out << kUncertaintyHeader << '\n';
  for (const auto& r : report.rows)
    out << r.attribute << ',' << r.direction << ',' << r.n << ',' << num(r.real_entropy) << ','
        << num(r.ours_entropy) << ',' << num(r.gain_entropy) << ',' << num(r.real_prob) << ',' << num(r.ours_prob)
        << ',' << num(r.gain_prob) << '\n';
}

// ---------------------------------------------------------------------------
// Trade-off sweep
// ---------------------------------------------------------------------------

std::vector<TradeoffRow> tradeoff_sweep(const TrainConfig& cfg, const NetConfig& net,
                                        const std::vector<double>& delta2_values, const AttrImageDataset& train,
                                        const AttrImageDataset& eval, AdversaryModel& adversary,
                                        const EvalOptions& options) {
  if (delta2_values.empty()) throw std::invalid_argument("tradeoff_sweep: no delta2 values");
  std::vector<TradeoffRow> rows;
  for (double d2 : delta2_values) {
    if (!(d2 >= 0)) throw std::invalid_argument("tradeoff_sweep: delta2 must be non-negative");
    auto c = cfg;
    c.margins.delta2 = d2;
    c.resume_from.clear();
    Stage1Model model;
    if (!cfg.out_dir.empty()) {
      c.out_dir = (fs::path(cfg.out_dir) / ("delta2_" + kv::format_double(d2))).string();
      const auto ckpt = fs::path(c.out_dir) / "stage1.ckpt";
      model = fs::exists(ckpt) ? load_stage1(ckpt) : train_stage1(c, net, train).model;
    } else {
      model = train_stage1(c, net, train).model;
    }
    model.train(false);
    const auto report = eval_inversion(inversion_transform(model), adversary, eval, eval.attr_names, options);
    rows.push_back({d2, report.mean_inv_acc(), report.mean_other_acc()});
  }
  return rows;
}

void write_tradeoff_csv(const std::vector<TradeoffRow>& rows, const fs::path& path) {
  auto out = open_out(path);
  out << kTradeoffHeader << '\n';
  for (const auto& r : rows) out << num(r.delta2) << ',' << num(r.privacy) << ',' << num(r.utility) << '\n';
}

// ---------------------------------------------------------------------------
// FID
// ---------------------------------------------------------------------------

namespace {

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  auto d = t.to(torch::kFloat64).contiguous();
  Eigen::MatrixXd m(d.size(0), d.size(1));
  auto a = d.accessor<double, 2>();
  for (int64_t i = 0; i < d.size(0); ++i)
    for (int64_t j = 0; j < d.size(1); ++j) m(i, j) = a[i][j];
  return m;
}

/// Unbiased covariance of the rows.
Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, Eigen::VectorXd& mean) {
  mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

}  // namespace

FidResult compute_fid(const torch::Tensor& features_a, const torch::Tensor& features_b) {
  if (features_a.dim() != 2 || features_b.dim() != 2 || features_a.size(1) != features_b.size(1))
    throw std::invalid_argument("compute_fid: expected (N, F) feature sets of equal width");
  FidResult r;
  r.n_a = features_a.size(0);
  r.n_b = features_b.size(0);
  r.dim = features_a.size(1);
  if (r.n_a < r.dim + 1 || r.n_b < r.dim + 1)
    throw std::invalid_argument("compute_fid: each set needs at least feature_dim + 1 samples");

  Eigen::VectorXd mu_a, mu_b;
  const Eigen::MatrixXd sa = covariance(to_eigen(features_a), mu_a);
  const Eigen::MatrixXd sb = covariance(to_eigen(features_b), mu_b);

  // Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2); the inner matrix is symmetric PSD.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(sa);
  Eigen::VectorXd la = ea.eigenvalues();
  const double scale = std::max(1.0, std::abs(la.maxCoeff()));
  if (la.minCoeff() < 1e-10 * scale) r.warnings.push_back("covariance of set a is rank deficient; eigenvalues clipped");
  la = la.cwiseMax(0.0);
  const Eigen::MatrixXd root_a = ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd inner = root_a * sb * root_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(inner, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd li = ei.eigenvalues();
  if (li.minCoeff() < -1e-10 * std::max(1.0, std::abs(li.maxCoeff())))
    r.warnings.push_back("negative eigenvalues in the covariance product clipped to 0");
  const double tr_sqrt = li.cwiseMax(0.0).cwiseSqrt().sum();

  r.fid = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  if (r.fid < 0) r.fid = 0;  // rounding on identical sets
  return r;
}

FidResult compute_fid(const torch::Tensor& images_a, const torch::Tensor& images_b, AdversaryModel& extractor,
                      int64_t batch) {
  auto feats = [&](const torch::Tensor& x) { return batched(x, batch, [&](const torch::Tensor& c) { return extractor.features(c); }); };
  return compute_fid(feats(images_a), feats(images_b));
}

void write_fid(const FidResult& result, const fs::path& path) {
  auto out = open_out(path);
  out << "fid=" << num(result.fid) << '\n'
      << "n_a=" << result.n_a << '\n'
      << "n_b=" << result.n_b << '\n'
      << "feature_dim=" << result.dim << '\n';
  std::string joined;
  for (const auto& w : result.warnings) joined += (joined.empty() ? "" : "; ") + w;
  out << "warnings=" << joined << '\n';
}

// ---------------------------------------------------------------------------
// Figure exports
// ---------------------------------------------------------------------------

std::vector<int64_t> histogram01(const torch::Tensor& values, int bins) {
  if (bins < 1) throw std::invalid_argument("histogram01: bins must be positive");
  std::vector<int64_t> counts(static_cast<size_t>(bins), 0);
  auto v = values.to(torch::kFloat64).contiguous().reshape(-1);
  auto a = v.accessor<double, 1>();
  for (int64_t i = 0; i < v.size(0); ++i) {
    const double x = a[i];
    if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("histogram01: value outside [0, 1]");
    const auto b = std::min<int64_t>(static_cast<int64_t>(x * bins), bins - 1);
    ++counts[static_cast<size_t>(b)];
  }
  return counts;
}

std::vector<fs::path> export_scatter(const AttrTransform& obfuscate, AdversaryModel& mixup_adversary,
                                     const AttrImageDataset& ds, const std::vector<std::string>& attrs,
                                     const fs::path& dir, const EvalOptions& options) {
  require_adversary_matches(mixup_adversary, ds);
  std::vector<fs::path> written;
  for (auto a : resolve(ds, attrs)) {
    const auto sub = eval_subset(ds, a, options);
    const auto y = sub.labels.select(1, a).gt(0.5);
    const auto before = predict_all(mixup_adversary, sub.images, options.batch).select(1, a).to(torch::kFloat64);
    const auto after =
        predict_all(mixup_adversary, transform_all(obfuscate, sub.images, a, options.batch), options.batch)
            .select(1, a)
            .to(torch::kFloat64);
    for (bool positive : {true, false}) {
      const auto sel = positive ? y : ~y;
      const auto b = before.index({sel}).contiguous(), f = after.index({sel}).contiguous();
      const auto path = dir / ("scatter_" + ds.attr_names[static_cast<size_t>(a)] + (positive ? "_pos" : "_neg") + ".csv");
      auto out = open_out(path);
      out << "row,p_before,p_after\n";
      auto ba = b.accessor<double, 1>();
      auto fa = f.accessor<double, 1>();
      for (int64_t i = 0; i < b.size(0); ++i) out << "point," << num(ba[i]) << ',' << num(fa[i]) << '\n';
      auto sd = [](const torch::Tensor& t) { return t.numel() < 2 ? kNaN : t.std().item<double>(); };
      out << "mean," << num(mean_of(b)) << ',' << num(mean_of(f)) << '\n';
      out << "std," << num(sd(b)) << ',' << num(sd(f)) << '\n';
      written.push_back(path);
    }
  }
  return written;
}

std::vector<fs::path> export_histograms(const AttrTransform& invert, const AttrTransform& obfuscate,
                                        AdversaryModel& mixup_adversary, const AttrImageDataset& ds,
                                        const std::vector<std::string>& attrs, const fs::path& dir,
                                        const EvalOptions& options) {
  require_adversary_matches(mixup_adversary, ds);
  std::vector<fs::path> written;
  for (auto a : resolve(ds, attrs)) {
    const auto sub = eval_subset(ds, a, options);
    const auto y = sub.labels.select(1, a).gt(0.5);
    auto probs = [&](const torch::Tensor& images) {
      return predict_all(mixup_adversary, images, options.batch).select(1, a);
    };
    const std::array<torch::Tensor, 3> series = {
        probs(sub.images),
        probs(transform_all(invert, sub.images, a, options.batch)),
        probs(transform_all(obfuscate, sub.images, a, options.batch)),
    };
    for (bool positive : {true, false}) {
      const auto sel = positive ? y : ~y;
      for (bool entropy : {false, true}) {
        std::array<std::vector<int64_t>, 3> counts;
        for (size_t s = 0; s < 3; ++s) {
          auto v = series[s].index({sel});
          counts[s] = histogram01(entropy ? shannon_entropy(v) : v);
        }
        const auto path = dir / ("hist_" + ds.attr_names[static_cast<size_t>(a)] + (positive ? "_pos" : "_neg") +
                                 (entropy ? "_entropy" : "_prob") + ".csv");
        auto out = open_out(path);
        out << "bin_lo,bin_hi,original,inverted,obfuscated\n";
        for (int b = 0; b < kHistogramBins; ++b)
          out << num(static_cast<double>(b) / kHistogramBins) << ',' << num(static_cast<double>(b + 1) / kHistogramBins)
              << ',' << counts[0][static_cast<size_t>(b)] << ',' << counts[1][static_cast<size_t>(b)] << ','
              << counts[2][static_cast<size_t>(b)] << '\n';
        written.push_back(path);
      }
    }
  }
  return written;
}

}  // namespace attrobf
