#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <string>

#include "uwf/common.hpp"
#include "uwf/tensor.hpp"

namespace uwf {

/// Pipeline image convention: CV_32FC3, RGB channel order, values in [0,1].
using Image = cv::Mat;

inline Image load_image(const std::string& path) {
  if (!std::filesystem::exists(path)) throw DataError("image file not found: " + path);
  cv::Mat raw = cv::imread(path, cv::IMREAD_COLOR);
  if (raw.empty() || raw.rows < 1 || raw.cols < 1)
    throw DataError("image does not decode to a 2D color image: " + path);
  cv::Mat rgb;
  cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB);
  Image out;
  rgb.convertTo(out, CV_32FC3, 1.0 / 255.0);
  return out;
}

inline void save_image_png(const std::string& path, const cv::Mat& img) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  cv::Mat u8;
  if (img.depth() == CV_8U) {
    u8 = img;
  } else {
    img.convertTo(u8, img.channels() == 1 ? CV_8UC1 : CV_8UC3, 255.0);
  }
  cv::Mat bgr;
  if (u8.channels() == 3) {
    cv::cvtColor(u8, bgr, cv::COLOR_RGB2BGR);
  } else {
    bgr = u8;
  }
  if (!cv::imwrite(path, bgr)) throw DataError("failed to write image: " + path);
}

/// Rec. 601 luminance of an RGB float image.
inline cv::Mat luminance(const Image& img) {
  CV_Assert(img.type() == CV_32FC3);
  cv::Mat gray(img.rows, img.cols, CV_64F);
  for (int y = 0; y < img.rows; ++y) {
    const cv::Vec3f* row = img.ptr<cv::Vec3f>(y);
    double* out = gray.ptr<double>(y);
    for (int x = 0; x < img.cols; ++x)
      out[x] = 0.299 * row[x][0] + 0.587 * row[x][1] + 0.114 * row[x][2];
  }
  return gray;
}

inline Tensor to_tensor_chw(const Image& img) {
  CV_Assert(img.type() == CV_32FC3);
  Tensor t({3, img.rows, img.cols});
  int64_t plane = static_cast<int64_t>(img.rows) * img.cols;
  for (int y = 0; y < img.rows; ++y) {
    const cv::Vec3f* row = img.ptr<cv::Vec3f>(y);
    for (int x = 0; x < img.cols; ++x) {
      int64_t i = static_cast<int64_t>(y) * img.cols + x;
      t[i] = row[x][0];
      t[plane + i] = row[x][1];
      t[2 * plane + i] = row[x][2];
    }
  }
  return t;
}

inline Image tensor_to_image(const Tensor& t) {
  int h = t.dim(1), w = t.dim(2);
  Image img(h, w, CV_32FC3);
  int64_t plane = static_cast<int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    cv::Vec3f* row = img.ptr<cv::Vec3f>(y);
    for (int x = 0; x < w; ++x) {
      int64_t i = static_cast<int64_t>(y) * w + x;
      row[x] = cv::Vec3f(t[i], t[plane + i], t[2 * plane + i]);
    }
  }
  return img;
}

/// Model-ready input plus the provenance needed to reject domain mixups.
struct PreprocessedImage {
  Tensor chw;
  std::string domain;  // "rgb" | "frequency"
  std::string image_id;
};

}  // namespace uwf
