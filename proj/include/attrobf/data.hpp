#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace attrobf {

/// Closed interval of normalized pixel values.
struct ValueRange {
  float lo = -1.0f;
  float hi = 1.0f;

  void validate() const;
  bool operator==(const ValueRange&) const = default;
};

/// Two-cluster toy world. points is (N, 2) float, labels is (N) float in {0, 1}.
struct LabeledPoints2D {
  torch::Tensor points;
  torch::Tensor labels;

  int64_t size() const { return points.defined() ? points.size(0) : 0; }
  void validate() const;
};

enum class Split { train, eval };

/// Images (N, C, H, W) float32 in value_range plus binary labels (N, N_A) float32.
/// Treated as immutable once built; subsets copy.
struct AttrImageDataset {
  torch::Tensor images;
  torch::Tensor labels;
  std::vector<std::string> attr_names;
  Split split = Split::train;
  ValueRange value_range;

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  int64_t num_attrs() const { return static_cast<int64_t>(attr_names.size()); }
  int64_t image_size() const { return images.size(-1); }
  int64_t channels() const { return images.size(1); }

  /// Index of a named attribute; throws std::invalid_argument when absent.
  int64_t attr_index(const std::string& name) const;

  AttrImageDataset subset(const torch::Tensor& indices) const;
  AttrImageDataset slice(int64_t first, int64_t count) const;

  /// Checks every invariant: label entries in {0,1}, pixels in range, consistent shapes.
  void validate() const;
};

struct PreprocessSpec {
  int crop = 178;
  int resize = 128;
  ValueRange value_range;

  void validate() const;
};

LabeledPoints2D gen_two_gaussians(int64_t n_per_class, std::array<double, 2> mean_pos,
                                  std::array<double, 2> mean_neg, double std, uint64_t seed);

/// Names accepted by gen_shape_attr, in catalog order.
const std::vector<std::string>& shape_attr_catalog();

/// Procedural desk-scale dataset. Every attribute is an independent fair coin
/// rendered as a visible property of the image (fill color, frame, tone, bands).
AttrImageDataset gen_shape_attr(int64_t n, const std::vector<std::string>& attr_names, int size,
                                uint64_t seed);

/// Parsed CelebA-style attribute list: optional count line, header of names,
/// then "filename v1 v2 ..." rows with values in {-1, 1}.
struct AttrList {
  std::vector<std::string> attr_names;
  std::vector<std::string> filenames;
  std::vector<std::vector<int>> labels;  // already mapped to {0, 1}
};

AttrList parse_attr_list(std::istream& in);
void write_attr_list(std::ostream& out, const AttrList& list);

struct LoadOptions {
  std::vector<std::string> attrs;  // empty = every column, in file order
  int64_t first = 0;
  int64_t count = -1;  // -1 = to the end
  Split split = Split::train;
};

AttrImageDataset load_attr_dataset(const std::filesystem::path& image_dir,
                                   const std::filesystem::path& attr_file, const PreprocessSpec& spec,
                                   const LoadOptions& options = {});

/// Writes images as PNG under dir/images and the labels to dir/list_attr.txt.
/// The result loads back through load_attr_dataset with crop = resize = image size.
void export_attr_dataset(const AttrImageDataset& ds, const std::filesystem::path& dir);

/// Equal numbers of positives and negatives for one attribute, first-come in
/// dataset order, total at most max_n.
AttrImageDataset balanced_eval_split(const AttrImageDataset& ds, int64_t attr_index, int64_t max_n);

}  // namespace attrobf
