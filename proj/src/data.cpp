#include "attrobf/data.hpp"

#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include "attrobf/errors.hpp"
#include "attrobf/image_io.hpp"

namespace attrobf {

void ValueRange::validate() const {
  if (!std::isfinite(lo) || !std::isfinite(hi) || !(lo < hi))
    throw std::invalid_argument("value range must be finite with lo < hi");
}

void LabeledPoints2D::validate() const {
  if (!points.defined() || !labels.defined() || points.dim() != 2 || points.size(1) != 2)
    throw std::invalid_argument("points must be an (N, 2) tensor");
  if (labels.dim() != 1 || labels.size(0) != points.size(0))
    throw std::invalid_argument("points and labels must have equal length");
  if (!(labels.eq(0) | labels.eq(1)).all().item<bool>())
    throw std::invalid_argument("labels must be exactly 0 or 1");
}

int64_t AttrImageDataset::attr_index(const std::string& name) const {
  auto it = std::find(attr_names.begin(), attr_names.end(), name);
  if (it == attr_names.end()) throw std::invalid_argument("unknown attribute '" + name + "'");
  return static_cast<int64_t>(it - attr_names.begin());
}

AttrImageDataset AttrImageDataset::subset(const torch::Tensor& indices) const {
  AttrImageDataset out = *this;
  out.images = images.index_select(0, indices).contiguous();
  out.labels = labels.index_select(0, indices).contiguous();
  return out;
}

AttrImageDataset AttrImageDataset::slice(int64_t first, int64_t count) const {
  if (first < 0 || count < 0 || first + count > size()) throw std::out_of_range("dataset slice out of range");
  AttrImageDataset out = *this;
  out.images = images.narrow(0, first, count).contiguous();
  out.labels = labels.narrow(0, first, count).contiguous();
  return out;
}

void AttrImageDataset::validate() const {
  value_range.validate();
  if (attr_names.empty()) throw std::invalid_argument("dataset needs at least one attribute");
  if (!images.defined() || images.dim() != 4) throw std::invalid_argument("images must be (N, C, H, W)");
  if (!labels.defined() || labels.dim() != 2 || labels.size(0) != images.size(0) ||
      labels.size(1) != num_attrs())
    throw std::invalid_argument("labels must be (N, N_A) and match the image count");
  if (size() == 0) return;
  if (!(labels.eq(0) | labels.eq(1)).all().item<bool>())
    throw std::invalid_argument("label entries must be 0 or 1");
  if (images.min().item<float>() < value_range.lo || images.max().item<float>() > value_range.hi)
    throw std::invalid_argument("pixel values outside the declared value range");
}

void PreprocessSpec::validate() const {
  if (crop <= 0 || resize <= 0) throw std::invalid_argument("crop and resize must be positive");
  value_range.validate();
}

LabeledPoints2D gen_two_gaussians(int64_t n_per_class, std::array<double, 2> mean_pos,
                                  std::array<double, 2> mean_neg, double std, uint64_t seed) {
  if (n_per_class <= 0) throw std::invalid_argument("n_per_class must be positive");
  if (!(std > 0.0)) throw std::invalid_argument("std must be positive");
  if (mean_pos == mean_neg) throw std::invalid_argument("cluster means must differ");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, std);
  auto points = torch::empty({2 * n_per_class, 2}, torch::kFloat32);
  auto labels = torch::empty({2 * n_per_class}, torch::kFloat32);
  auto p = points.accessor<float, 2>();
  auto l = labels.accessor<float, 1>();
  for (int64_t i = 0; i < 2 * n_per_class; ++i) {
    const bool positive = i < n_per_class;
    const auto& mean = positive ? mean_pos : mean_neg;
    p[i][0] = static_cast<float>(mean[0] + noise(rng));
    p[i][1] = static_cast<float>(mean[1] + noise(rng));
    l[i] = positive ? 1.0f : 0.0f;
  }
  return {points, labels};
}

// ---------------------------------------------------------------------------
// Procedural shape images
// ---------------------------------------------------------------------------

namespace {

struct Rgb {
  float r, g, b;
};

class Canvas {
 public:
  explicit Canvas(int size) : size_(size), px_(static_cast<size_t>(3 * size * size), 0.0f) {}

  int size() const { return size_; }

  void set(int y, int x, Rgb c) {
    if (y < 0 || x < 0 || y >= size_ || x >= size_) return;
    const size_t plane = static_cast<size_t>(size_) * size_;
    const size_t at = static_cast<size_t>(y) * size_ + x;
    px_[at] = c.r;
    px_[plane + at] = c.g;
    px_[2 * plane + at] = c.b;
  }

  void fill(Rgb c) {
    for (int y = 0; y < size_; ++y)
      for (int x = 0; x < size_; ++x) set(y, x, c);
  }

  void rect(int y0, int x0, int y1, int x1, Rgb c) {
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) set(y, x, c);
  }

  void disc(double cy, double cx, double r, Rgb c) {
    for (int y = 0; y < size_; ++y)
      for (int x = 0; x < size_; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        if (dy * dy + dx * dx <= r * r) set(y, x, c);
      }
  }

  std::vector<float>& pixels() { return px_; }

 private:
  int size_;
  std::vector<float> px_;
};

enum class ShapeAttr { red_fill, border, dark_background, stripe, vertical_bar, corner_dot };

const std::map<std::string, ShapeAttr>& shape_attr_map() {
  static const std::map<std::string, ShapeAttr> m = {
      {"red_fill", ShapeAttr::red_fill},         {"border", ShapeAttr::border},
      {"dark_background", ShapeAttr::dark_background}, {"stripe", ShapeAttr::stripe},
      {"vertical_bar", ShapeAttr::vertical_bar}, {"corner_dot", ShapeAttr::corner_dot},
  };
  return m;
}

}  // namespace

const std::vector<std::string>& shape_attr_catalog() {
  static const std::vector<std::string> names = {"red_fill", "border",       "dark_background",
                                                 "stripe",   "vertical_bar", "corner_dot"};
  return names;
}

AttrImageDataset gen_shape_attr(int64_t n, const std::vector<std::string>& attr_names, int size,
                                uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("n must be positive");
  if (size < 16) throw std::invalid_argument("image size must be at least 16");
  if (attr_names.size() < 2) throw std::invalid_argument("need at least two attributes");
  std::vector<ShapeAttr> kinds;
  for (const auto& name : attr_names) {
    auto it = shape_attr_map().find(name);
    if (it == shape_attr_map().end()) throw std::invalid_argument("unknown shape attribute '" + name + "'");
    if (std::find(kinds.begin(), kinds.end(), it->second) != kinds.end())
      throw std::invalid_argument("duplicate attribute '" + name + "'");
    kinds.push_back(it->second);
  }

  const auto n_attrs = static_cast<int64_t>(attr_names.size());
  auto images = torch::empty({n, 3, size, size}, torch::kFloat32);
  auto labels = torch::zeros({n, n_attrs}, torch::kFloat32);
  auto lab = labels.accessor<float, 2>();

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<float> pixel_noise(0.0f, 0.02f);
  const double s = size;

  for (int64_t i = 0; i < n; ++i) {
    std::map<ShapeAttr, bool> on;
    for (int64_t a = 0; a < n_attrs; ++a) {
      const bool v = coin(rng);
      on[kinds[static_cast<size_t>(a)]] = v;
      lab[i][a] = v ? 1.0f : 0.0f;
    }
    auto has = [&](ShapeAttr k) { return on.count(k) && on[k]; };

    Canvas canvas(size);
    const float tone = has(ShapeAttr::dark_background) ? static_cast<float>(0.10 + 0.15 * unit(rng))
                                                       : static_cast<float>(0.65 + 0.15 * unit(rng));
    canvas.fill({tone, tone, tone});
    if (has(ShapeAttr::stripe)) {
      canvas.rect(static_cast<int>(s * 7 / 16), 0, static_cast<int>(s * 9 / 16), size, {0.20f, 0.75f, 0.30f});
    }
    if (has(ShapeAttr::vertical_bar)) {
      canvas.rect(0, static_cast<int>(s * 3 / 16), size, static_cast<int>(s * 5 / 16), {0.75f, 0.30f, 0.75f});
    }

    const double cy = s * (0.3 + 0.4 * unit(rng));
    const double cx = s * (0.3 + 0.4 * unit(rng));
    const double r = s * (0.15 + 0.10 * unit(rng));
    const bool square = coin(rng);
    auto jitter = [&] { return static_cast<float>(0.1 * (unit(rng) - 0.5)); };
    Rgb fill = has(ShapeAttr::red_fill) ? Rgb{0.85f, 0.15f, 0.15f} : Rgb{0.15f, 0.30f, 0.85f};
    fill = {fill.r + jitter(), fill.g + jitter(), fill.b + jitter()};
    if (square) {
      canvas.rect(static_cast<int>(cy - r), static_cast<int>(cx - r), static_cast<int>(cy + r),
                  static_cast<int>(cx + r), fill);
    } else {
      canvas.disc(cy, cx, r, fill);
    }

    if (has(ShapeAttr::corner_dot)) canvas.disc(s * 0.18, s * 0.82, s / 10, {0.95f, 0.95f, 0.95f});
    if (has(ShapeAttr::border)) {
      const int w = std::max(1, size / 16);
      const Rgb c{0.95f, 0.85f, 0.20f};
      canvas.rect(0, 0, w, size, c);
      canvas.rect(size - w, 0, size, size, c);
      canvas.rect(0, 0, size, w, c);
      canvas.rect(0, size - w, size, size, c);
    }

    auto& px = canvas.pixels();
    for (auto& v : px) v = std::clamp(v + pixel_noise(rng), 0.0f, 1.0f);
    images[i].copy_(torch::from_blob(px.data(), {3, size, size}, torch::kFloat32));
  }

  AttrImageDataset ds;
  ds.images = images * 2.0f - 1.0f;
  ds.labels = labels;
  ds.attr_names = attr_names;
  ds.split = Split::train;
  ds.value_range = ValueRange{-1.0f, 1.0f};
  return ds;
}

// ---------------------------------------------------------------------------
// CelebA-format attribute lists
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> tokenize(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  for (std::string tok; ss >> tok;) out.push_back(tok);
  return out;
}

bool is_integer(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char ch) { return std::isdigit(ch); });
}

}  // namespace

AttrList parse_attr_list(std::istream& in) {
  AttrList out;
  std::string line;
  int line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto tokens = tokenize(line);
    if (tokens.empty()) continue;
    if (!have_header) {
      if (tokens.size() == 1 && is_integer(tokens[0]) && out.attr_names.empty()) continue;  // count line
      out.attr_names = tokens;
      have_header = true;
      continue;
    }
    if (tokens.size() != out.attr_names.size() + 1) {
      throw ParseError("expected " + std::to_string(out.attr_names.size() + 1) + " columns, found " +
                           std::to_string(tokens.size()),
                       line_no);
    }
    std::vector<int> row;
    row.reserve(out.attr_names.size());
    for (size_t k = 1; k < tokens.size(); ++k) {
      if (tokens[k] == "1" || tokens[k] == "+1") {
        row.push_back(1);
      } else if (tokens[k] == "-1") {
        row.push_back(0);
      } else {
        throw ParseError("attribute value '" + tokens[k] + "' is not -1 or 1", line_no);
      }
    }
    out.filenames.push_back(tokens[0]);
    out.labels.push_back(std::move(row));
  }
  if (!have_header) throw ParseError("attribute file has no header line");
  return out;
}

void write_attr_list(std::ostream& out, const AttrList& list) {
  out << list.filenames.size() << '\n';
  for (size_t k = 0; k < list.attr_names.size(); ++k) out << (k ? " " : "") << list.attr_names[k];
  out << '\n';
  for (size_t i = 0; i < list.filenames.size(); ++i) {
    out << list.filenames[i];
    for (int v : list.labels[i]) out << ' ' << (v ? "1" : "-1");
    out << '\n';
  }
}

AttrImageDataset load_attr_dataset(const std::filesystem::path& image_dir,
                                   const std::filesystem::path& attr_file, const PreprocessSpec& spec,
                                   const LoadOptions& options) {
  spec.validate();
  std::ifstream in(attr_file);
  if (!in) throw IoError("cannot open attribute file " + attr_file.string());
  const AttrList list = parse_attr_list(in);

  std::vector<size_t> columns;
  std::vector<std::string> names;
  if (options.attrs.empty()) {
    for (size_t k = 0; k < list.attr_names.size(); ++k) columns.push_back(k);
    names = list.attr_names;
  } else {
    for (const auto& want : options.attrs) {
      auto it = std::find(list.attr_names.begin(), list.attr_names.end(), want);
      if (it == list.attr_names.end()) throw ParseError("attribute '" + want + "' not in " + attr_file.string());
      columns.push_back(static_cast<size_t>(it - list.attr_names.begin()));
      names.push_back(want);
    }
  }

  const auto total = static_cast<int64_t>(list.filenames.size());
  if (options.first < 0 || options.first > total) throw std::out_of_range("load range starts past the end");
  const int64_t count = options.count < 0 ? total - options.first : std::min(options.count, total - options.first);

  auto images = torch::empty({count, 3, spec.resize, spec.resize}, torch::kFloat32);
  auto labels = torch::empty({count, static_cast<int64_t>(columns.size())}, torch::kFloat32);
  for (int64_t i = 0; i < count; ++i) {
    const auto row = static_cast<size_t>(options.first + i);
    const auto path = image_dir / list.filenames[row];
    if (!std::filesystem::exists(path)) throw IoError("missing image file " + path.string());
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (mat.empty()) throw IoError("cannot decode image file " + path.string());
    images[i].copy_(from_mat(center_crop_resize(mat, spec.crop, spec.resize), spec.value_range));
    for (size_t k = 0; k < columns.size(); ++k)
      labels[i][static_cast<int64_t>(k)] = static_cast<float>(list.labels[row][columns[k]]);
  }

  AttrImageDataset ds;
  ds.images = images;
  ds.labels = labels;
  ds.attr_names = names;
  ds.split = options.split;
  ds.value_range = spec.value_range;
  return ds;
}

void export_attr_dataset(const AttrImageDataset& ds, const std::filesystem::path& dir) {
  const auto image_dir = dir / "images";
  std::filesystem::create_directories(image_dir);
  AttrList list;
  list.attr_names = ds.attr_names;
  auto labels = ds.labels.to(torch::kInt32);
  for (int64_t i = 0; i < ds.size(); ++i) {
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << (i + 1) << ".png";
    write_png(image_dir / name.str(), ds.images[i], ds.value_range);
    list.filenames.push_back(name.str());
    std::vector<int> row(static_cast<size_t>(ds.num_attrs()));
    for (int64_t k = 0; k < ds.num_attrs(); ++k) row[static_cast<size_t>(k)] = labels[i][k].item<int>();
    list.labels.push_back(std::move(row));
  }
  std::ofstream out(dir / "list_attr.txt");
  if (!out) throw IoError("cannot write " + (dir / "list_attr.txt").string());
  write_attr_list(out, list);
}

AttrImageDataset balanced_eval_split(const AttrImageDataset& ds, int64_t attr_index, int64_t max_n) {
  if (attr_index < 0 || attr_index >= ds.num_attrs()) throw std::invalid_argument("attribute index out of range");
  if (max_n < 2) throw std::invalid_argument("max_n must allow at least one example per class");
  auto column = ds.labels.select(1, attr_index).contiguous();
  auto acc = column.accessor<float, 1>();
  std::vector<int64_t> pos, neg;
  for (int64_t i = 0; i < ds.size(); ++i) (acc[i] > 0.5f ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty())
    throw std::invalid_argument("attribute '" + ds.attr_names[static_cast<size_t>(attr_index)] +
                                "' has an empty class");
  const auto k = std::min({static_cast<int64_t>(pos.size()), static_cast<int64_t>(neg.size()), max_n / 2});
  std::vector<int64_t> keep(pos.begin(), pos.begin() + k);
  keep.insert(keep.end(), neg.begin(), neg.begin() + k);
  std::sort(keep.begin(), keep.end());
  auto out = ds.subset(torch::tensor(keep, torch::kInt64));
  out.split = Split::eval;
  return out;
}

}  // namespace attrobf
