#pragma once

// PNG/PPM decoding and encoding. Images are float RGB in [-1, 1]:
// value = byte / 127.5 - 1.

#include "neuflow/errors.hpp"
#include "neuflow/tensor.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

namespace neuflow {

template <class T>
T normalize_byte(std::uint8_t b) {
  return static_cast<T>(b) / T(127.5) - T(1);
}

template <class T>
std::uint8_t denormalize_byte(T v) {
  const double b = std::round((static_cast<double>(v) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(b, 0.0, 255.0));
}

template <class T = float>
Tensor<T> read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("image not found: " + path.string());
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw FormatError("cannot decode image: " + path.string());
  Tensor<T> img(3, bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x)
      for (int c = 0; c < 3; ++c) img(c, y, x) = normalize_byte<T>(row[x][2 - c]);
  }
  return img;
}

/// Writes a 3-channel [-1, 1] image; the encoder follows the file extension.
template <class T>
void write_image(const Tensor<T>& img, const std::filesystem::path& path) {
  if (img.channels() != 3) throw ShapeError("write_image needs 3 channels, got " + to_string(img.shape()));
  cv::Mat bgr(img.height(), img.width(), CV_8UC3);
  for (int y = 0; y < img.height(); ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) row[x][2 - c] = denormalize_byte(img(c, y, x));
  }
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), bgr);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write image " + path.string() + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write image: " + path.string());
}

/// Single-channel mask image; nonzero pixels are true.
inline cv::Mat read_mask_image(const std::filesystem::path& path) {
  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw FormatError("cannot decode mask: " + path.string());
  return m;
}

}  // namespace neuflow
