#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "uwf/imageio.hpp"

namespace uwf {

/// Centered 2D DFT magnitude of one image (CV_64F, zero frequency at the
/// grid center). Values are non-negative; after clip + normalization they
/// live in [0,1].
struct SpectralImage {
  cv::Mat magnitude;  // CV_64F
  double clip_percentile = 0.99;
  std::string source_id;
};

struct FrequencyConfig {
  double clip_percentile = 0.99;
  int output_size = 224;
};

namespace detail {
/// Circular shift moving bin (0,0) to (rows/2, cols/2).
inline cv::Mat fftshift(const cv::Mat& m) {
  cv::Mat out(m.rows, m.cols, m.type());
  int sy = m.rows / 2, sx = m.cols / 2;
  for (int y = 0; y < m.rows; ++y) {
    const double* src = m.ptr<double>(y);
    double* dst = out.ptr<double>((y + sy) % m.rows);
    for (int x = 0; x < m.cols; ++x) dst[(x + sx) % m.cols] = src[x];
  }
  return out;
}
}  // namespace detail

/// |DFT| of a real single-channel image, unnormalized forward convention,
/// zero frequency shifted to the center bin.
inline SpectralImage dft_magnitude(const cv::Mat& gray) {
  if (gray.empty()) throw DataError("dft_magnitude: empty image");
  CV_Assert(gray.channels() == 1);
  cv::Mat input;
  gray.convertTo(input, CV_64F);
  cv::Mat complex;
  cv::dft(input, complex, cv::DFT_COMPLEX_OUTPUT);
  std::vector<cv::Mat> planes(2);
  cv::split(complex, planes);
  cv::Mat mag;
  cv::magnitude(planes[0], planes[1], mag);
  SpectralImage out;
  out.magnitude = detail::fftshift(mag);
  return out;
}

/// Quantile of the flattened spectrum values: the order statistic at rank
/// floor(p * (n - 1)). An order statistic (rather than an interpolated value)
/// keeps clipping idempotent.
inline double spectrum_quantile(const cv::Mat& mag, double p) {
  std::vector<double> vals;
  vals.reserve(static_cast<size_t>(mag.total()));
  for (int y = 0; y < mag.rows; ++y) {
    const double* row = mag.ptr<double>(y);
    vals.insert(vals.end(), row, row + mag.cols);
  }
  size_t idx = static_cast<size_t>(std::floor(p * (static_cast<double>(vals.size()) - 1.0) + 1e-12));
  idx = std::min(idx, vals.size() - 1);
  std::nth_element(vals.begin(), vals.begin() + static_cast<ptrdiff_t>(idx), vals.end());
  return vals[idx];
}

/// Cap values above the p-quantile of the spectrum's own values. A zero
/// quantile (degenerate spectra dominated by empty bins) leaves the spectrum
/// unchanged, so a pure-DC input survives normalization.
inline SpectralImage clip_at_percentile(const SpectralImage& s, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("clip percentile must be in (0, 1]");
  SpectralImage out;
  out.clip_percentile = p;
  out.source_id = s.source_id;
  double q = spectrum_quantile(s.magnitude, p);
  if (q <= 0.0) {
    out.magnitude = s.magnitude.clone();
    return out;
  }
  out.magnitude = cv::min(s.magnitude, q);
  return out;
}

/// Min-max normalization to [0,1]; a flat spectrum maps to all ones (all
/// zeros when it is identically zero).
inline cv::Mat minmax_normalize(const cv::Mat& mag) {
  double lo = 0.0, hi = 0.0;
  cv::minMaxLoc(mag, &lo, &hi);
  cv::Mat out;
  if (hi - lo <= 0.0) {
    out = cv::Mat(mag.rows, mag.cols, CV_64F, cv::Scalar(hi > 0.0 ? 1.0 : 0.0));
  } else {
    out = (mag - lo) / (hi - lo);
  }
  return out;
}

/// Fraction of spectral energy (squared magnitude) inside the centered disc
/// of radius radius_fraction * (min(dims)/2).
inline double low_frequency_energy_fraction(const cv::Mat& mag, double radius_fraction) {
  double cy = 0.5 * mag.rows, cx = 0.5 * mag.cols;
  double radius = radius_fraction * 0.5 * std::min(mag.rows, mag.cols);
  double inside = 0.0, total = 0.0;
  for (int y = 0; y < mag.rows; ++y) {
    const double* row = mag.ptr<double>(y);
    for (int x = 0; x < mag.cols; ++x) {
      double e = row[x] * row[x];
      total += e;
      double dy = (y + 0.5) - cy, dx = (x + 0.5) - cx;
      if (std::sqrt(dy * dy + dx * dx) <= radius) inside += e;
    }
  }
  return total > 0.0 ? inside / total : 0.0;
}

/// Backbone-ready frequency representation: luminance -> centered |DFT| ->
/// percentile clip -> min-max normalize -> resize -> replicate to 3 channels.
inline Image frequency_representation(const Image& color, const FrequencyConfig& cfg) {
  cv::Mat gray = luminance(color);
  SpectralImage spec = dft_magnitude(gray);
  spec = clip_at_percentile(spec, cfg.clip_percentile);
  cv::Mat norm = minmax_normalize(spec.magnitude);
  cv::Mat resized;
  if (norm.rows == cfg.output_size && norm.cols == cfg.output_size) {
    resized = norm;
  } else {
    cv::resize(norm, resized, cv::Size(cfg.output_size, cfg.output_size), 0, 0, cv::INTER_AREA);
  }
  cv::Mat f32;
  resized.convertTo(f32, CV_32F);
  Image out;
  cv::merge(std::vector<cv::Mat>{f32, f32, f32}, out);
  return out;
}

/// Grayscale rendering of the clipped spectrum for visual inspection.
inline cv::Mat render_spectrum(const Image& color, double clip_percentile = 0.99) {
  cv::Mat gray = luminance(color);
  SpectralImage spec = clip_at_percentile(dft_magnitude(gray), clip_percentile);
  cv::Mat norm = minmax_normalize(spec.magnitude);
  cv::Mat u8;
  norm.convertTo(u8, CV_8U, 255.0);
  return u8;
}

}  // namespace uwf
