#include "attrobf/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include "attrobf/errors.hpp"

namespace attrobf {

cv::Mat to_mat(const torch::Tensor& image, ValueRange range) {
  TORCH_CHECK(image.dim() == 3, "expected a (C, H, W) image");
  const auto channels = image.size(0);
  TORCH_CHECK(channels == 1 || channels == 3, "expected 1 or 3 channels");
  auto scaled = ((image.to(torch::kFloat32) - range.lo) / (range.hi - range.lo)).clamp(0.0, 1.0);
  auto bytes = (scaled * 255.0f).round().to(torch::kUInt8);
  if (channels == 3) bytes = bytes.flip(0);  // RGB -> BGR
  bytes = bytes.permute({1, 2, 0}).contiguous();
  const int h = static_cast<int>(image.size(1));
  const int w = static_cast<int>(image.size(2));
  cv::Mat mat(h, w, channels == 3 ? CV_8UC3 : CV_8UC1);
  std::memcpy(mat.data, bytes.data_ptr<uint8_t>(), static_cast<size_t>(bytes.numel()));
  return mat;
}

torch::Tensor from_mat(const cv::Mat& mat, ValueRange range) {
  cv::Mat bgr;
  if (mat.channels() == 1) {
    cv::cvtColor(mat, bgr, cv::COLOR_GRAY2BGR);
  } else if (mat.channels() == 4) {
    cv::cvtColor(mat, bgr, cv::COLOR_BGRA2BGR);
  } else {
    bgr = mat;
  }
  if (bgr.depth() != CV_8U) throw std::invalid_argument("only 8-bit images are supported");
  cv::Mat cont = bgr.isContinuous() ? bgr : bgr.clone();
  auto t = torch::from_blob(cont.data, {cont.rows, cont.cols, 3}, torch::kUInt8).clone();
  t = t.permute({2, 0, 1}).flip(0).to(torch::kFloat32) / 255.0f;
  return (t * (range.hi - range.lo) + range.lo).contiguous();
}

cv::Mat center_crop_resize(const cv::Mat& mat, int crop, int resize) {
  const int side_w = std::min(crop, mat.cols);
  const int side_h = std::min(crop, mat.rows);
  const cv::Rect roi((mat.cols - side_w) / 2, (mat.rows - side_h) / 2, side_w, side_h);
  cv::Mat cropped = mat(roi);
  if (cropped.cols == resize && cropped.rows == resize) return cropped.clone();
  cv::Mat out;
  const bool shrinking = resize < cropped.cols;
  cv::resize(cropped, out, cv::Size(resize, resize), 0, 0, shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
  return out;
}

std::vector<unsigned char> encode_png(const torch::Tensor& image, ValueRange range) {
  std::vector<unsigned char> buf;
  if (!cv::imencode(".png", to_mat(image, range), buf)) throw std::runtime_error("PNG encoding failed");
  return buf;
}

std::vector<unsigned char> encode_gray_png(const torch::Tensor& map01) {
  auto m = map01.dim() == 2 ? map01.unsqueeze(0) : map01;
  return encode_png(m, ValueRange{0.0f, 1.0f});
}

torch::Tensor decode_image(const std::vector<unsigned char>& bytes, ValueRange range) {
  if (bytes.empty()) throw std::invalid_argument("empty image payload");
  cv::Mat mat = cv::imdecode(bytes, cv::IMREAD_COLOR);
  if (mat.empty()) throw std::invalid_argument("image payload could not be decoded");
  return from_mat(mat, range);
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image, ValueRange range) {
  if (!cv::imwrite(path.string(), to_mat(image, range))) throw IoError("cannot write image " + path.string());
}

torch::Tensor read_image(const std::filesystem::path& path, ValueRange range) {
  if (!std::filesystem::exists(path)) throw IoError("missing image file " + path.string());
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (mat.empty()) throw IoError("cannot decode image file " + path.string());
  return from_mat(mat, range);
}

}  // namespace attrobf
