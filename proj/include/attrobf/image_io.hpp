#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

#include "attrobf/data.hpp"

namespace cv {
class Mat;
}

namespace attrobf {

/// (C, H, W) float tensor in range -> 8-bit BGR/gray Mat.
cv::Mat to_mat(const torch::Tensor& image, ValueRange range);

/// 8-bit Mat (gray or BGR) -> (3, H, W) float tensor in range, RGB order.
torch::Tensor from_mat(const cv::Mat& mat, ValueRange range);

/// Center crop to crop x crop (clamped to the image), then area-resize to resize x resize.
cv::Mat center_crop_resize(const cv::Mat& mat, int crop, int resize);

std::vector<unsigned char> encode_png(const torch::Tensor& image, ValueRange range);
torch::Tensor decode_image(const std::vector<unsigned char>& bytes, ValueRange range);

/// Map single-channel values in [0, 1] to a grayscale PNG.
std::vector<unsigned char> encode_gray_png(const torch::Tensor& map01);

void write_png(const std::filesystem::path& path, const torch::Tensor& image, ValueRange range);
torch::Tensor read_image(const std::filesystem::path& path, ValueRange range);

}  // namespace attrobf
