#pragma once

#include "mmfuse/encoders.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>

namespace mmfuse::tools {

// Any format OpenCV decodes; grayscale and alpha are folded to RGB.
inline Image read_image(const std::filesystem::path& path) {
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot decode image '" + path.string() + "'");
  Image img(bgr.cols, bgr.rows, 3);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(row[x][2 - c]) / 255.0f;
    }
  }
  return img;
}

inline void write_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 3) throw std::runtime_error("write_png expects an RGB image");
  cv::Mat bgr(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(y, x, c), 0.0f, 1.0f);
        row[x][2 - c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
  }
  if (!cv::imwrite(path.string(), bgr)) throw std::runtime_error("cannot write image '" + path.string() + "'");
}

}  // namespace mmfuse::tools
