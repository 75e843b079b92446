#pragma once

#include <opencv2/imgproc.hpp>

#include "uwf/imageio.hpp"

namespace uwf {

struct AugmentPolicy {
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double rotation_degrees_max = 15.0;
  double zoom_lo = 0.9;
  double zoom_hi = 1.1;
};

struct SpatialConfig {
  int crop_size = 800;
  int resize_target = 448;
  float neutral_offset = 0.5f;       // mid-range of the [0,1] intensity scale
  double blur_scale = 1.0 / 30.0;    // sigma as a fraction of image width
  bool pad_if_needed = false;
  AugmentPolicy augment;

  void validate() const {
    if (crop_size <= 0) throw ConfigError("crop_size must be positive");
    if (blur_scale <= 0.0 || blur_scale >= 1.0)
      throw ConfigError("blur_scale must be in (0, 1)");
    if (!(augment.zoom_lo > 0.0 && augment.zoom_lo <= 1.0 && augment.zoom_hi >= 1.0))
      throw ConfigError("zoom_range must satisfy 0 < lo <= 1 <= hi");
  }
};

/// Intensity centroid of the foreground mask (pixels at or above 5% of the
/// max luminance). Falls back to the geometric center for black frames.
inline cv::Point2d retina_centroid(const Image& img) {
  cv::Mat gray = luminance(img);
  double maxv = 0.0;
  cv::minMaxLoc(gray, nullptr, &maxv);
  if (maxv <= 0.0)
    return {0.5 * (img.cols - 1), 0.5 * (img.rows - 1)};
  double thresh = 0.05 * maxv;
  double mass = 0.0, mx = 0.0, my = 0.0;
  for (int y = 0; y < gray.rows; ++y) {
    const double* row = gray.ptr<double>(y);
    for (int x = 0; x < gray.cols; ++x) {
      if (row[x] >= thresh) {
        mass += row[x];
        mx += row[x] * x;
        my += row[x] * y;
      }
    }
  }
  if (mass <= 0.0) return {0.5 * (img.cols - 1), 0.5 * (img.rows - 1)};
  return {mx / mass, my / mass};
}

/// Square crop centered on the retina centroid, window clamped inside the
/// frame. Images smaller than the crop are rejected unless pad_if_needed.
inline Image crop_center(const Image& img, int crop_size, bool pad_if_needed = false) {
  Image src = img;
  if (src.rows < crop_size || src.cols < crop_size) {
    if (!pad_if_needed)
      throw DataError("image " + std::to_string(img.cols) + "x" + std::to_string(img.rows) +
                      " is smaller than crop size " + std::to_string(crop_size) +
                      "; enable pad_if_needed (--pad) for a pad-then-crop fallback");
    int pad_y = std::max(0, crop_size - src.rows);
    int pad_x = std::max(0, crop_size - src.cols);
    cv::copyMakeBorder(src, src, pad_y / 2, pad_y - pad_y / 2, pad_x / 2, pad_x - pad_x / 2,
                       cv::BORDER_CONSTANT, cv::Scalar(0, 0, 0));
  }
  cv::Point2d c = retina_centroid(src);
  int x0 = static_cast<int>(std::lround(c.x - crop_size / 2.0));
  int y0 = static_cast<int>(std::lround(c.y - crop_size / 2.0));
  x0 = std::clamp(x0, 0, src.cols - crop_size);
  y0 = std::clamp(y0, 0, src.rows - crop_size);
  return src(cv::Rect(x0, y0, crop_size, crop_size)).clone();
}

/// Color normalization: subtract a per-channel Gaussian local mean and
/// re-center on neutral_offset, clamped to the valid range.
inline Image local_mean_subtract(const Image& img, double blur_scale, float neutral_offset) {
  if (blur_scale <= 0.0) throw ConfigError("blur_scale must be positive");
  double sigma = blur_scale * img.cols;
  int ksize = 2 * static_cast<int>(std::ceil(3.0 * sigma)) + 1;
  Image blurred;
  cv::GaussianBlur(img, blurred, cv::Size(ksize, ksize), sigma, sigma, cv::BORDER_REFLECT_101);
  Image out(img.rows, img.cols, CV_32FC3);
  for (int y = 0; y < img.rows; ++y) {
    const cv::Vec3f* a = img.ptr<cv::Vec3f>(y);
    const cv::Vec3f* b = blurred.ptr<cv::Vec3f>(y);
    cv::Vec3f* o = out.ptr<cv::Vec3f>(y);
    for (int x = 0; x < img.cols; ++x)
      for (int c = 0; c < 3; ++c)
        o[x][c] = std::clamp(a[x][c] - b[x][c] + neutral_offset, 0.0f, 1.0f);
  }
  return out;
}

/// Training-time augmentation: flips, rotation, zoom. All draws come from the
/// passed-in generator state, so a replayed state reproduces the output
/// byte for byte.
inline Image augment(const Image& img, Rng rng, const AugmentPolicy& policy) {
  Image out = img.clone();
  if (rng.bernoulli(policy.hflip_prob)) cv::flip(out, out, 1);
  if (rng.bernoulli(policy.vflip_prob)) cv::flip(out, out, 0);
  double angle = policy.rotation_degrees_max > 0.0
                     ? rng.uniform(-policy.rotation_degrees_max, policy.rotation_degrees_max)
                     : 0.0;
  double zoom = policy.zoom_hi > policy.zoom_lo
                    ? rng.uniform(policy.zoom_lo, policy.zoom_hi)
                    : policy.zoom_lo;
  if (angle != 0.0 || zoom != 1.0) {
    cv::Point2f center(0.5f * (out.cols - 1), 0.5f * (out.rows - 1));
    cv::Mat m = cv::getRotationMatrix2D(center, angle, zoom);
    cv::warpAffine(out, out, m, out.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
  }
  return out;
}

inline Image resize_image(const Image& img, int size) {
  if (img.rows == size && img.cols == size) return img;
  Image out;
  cv::resize(img, out, cv::Size(size, size), 0, 0, cv::INTER_AREA);
  return out;
}

/// Full spatial pipeline for one image: crop, normalize, resize. Augmentation
/// is applied separately (training batches only).
inline Image preprocess_spatial(const Image& img, const SpatialConfig& cfg) {
  Image cropped = crop_center(img, cfg.crop_size, cfg.pad_if_needed);
  Image normalized = local_mean_subtract(cropped, cfg.blur_scale, cfg.neutral_offset);
  return resize_image(normalized, cfg.resize_target);
}

}  // namespace uwf
