#pragma once

#include <opencv2/imgproc.hpp>

#include "uwf/data.hpp"
#include "uwf/imageio.hpp"

namespace uwf {

struct SynthOptions {
  int image_size = 96;
  double blur_sigma_lo = 0.018;  // fraction of image size, ungradable images
  double blur_sigma_hi = 0.035;
  double p_blur = 0.5;    // task-1 negative rate
  double p_rdr = 0.5;     // task-2 positive rate
  double p_dme = 0.5;     // task-3 positive rate
};

/// Fundus-like test image: dark surround, warm retina disc with radial
/// falloff, vessels from the optic disc, speckle texture, optional planted
/// lesions, optional global blur. blur_sigma is in pixels (0 = sharp).
inline Image render_synthetic_fundus(Rng& rng, int size, double blur_sigma, bool rdr_lesions,
                                     bool dme_lesions) {
  cv::Mat img(size, size, CV_32FC3, cv::Scalar(0.02f, 0.02f, 0.02f));
  double cx = size * rng.uniform(0.47, 0.53);
  double cy = size * rng.uniform(0.47, 0.53);
  double radius = size * rng.uniform(0.38, 0.44);
  cv::Vec3f base(static_cast<float>(rng.uniform(0.65, 0.82)),
                 static_cast<float>(rng.uniform(0.28, 0.40)),
                 static_cast<float>(rng.uniform(0.08, 0.16)));
  for (int y = 0; y < size; ++y) {
    cv::Vec3f* row = img.ptr<cv::Vec3f>(y);
    for (int x = 0; x < size; ++x) {
      double d = std::hypot(x - cx, y - cy);
      if (d <= radius) {
        float fall = static_cast<float>(1.0 - 0.35 * (d / radius) * (d / radius));
        row[x] = base * fall;
      }
    }
  }
  // optic disc off-center, vessels radiating from it
  double ox = cx + radius * rng.uniform(0.35, 0.55) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
  double oy = cy + radius * rng.uniform(-0.2, 0.2);
  cv::circle(img, cv::Point2d(ox, oy), std::max(2, static_cast<int>(0.06 * size)),
             cv::Scalar(0.95, 0.85, 0.55), cv::FILLED, cv::LINE_AA);
  int vessels = 4 + static_cast<int>(rng.below(4));
  for (int v = 0; v < vessels; ++v) {
    double angle = rng.uniform(0.0, 2.0 * M_PI);
    double px = ox, py = oy;
    double step = size * 0.03;
    int segments = 8 + static_cast<int>(rng.below(8));
    for (int sgm = 0; sgm < segments; ++sgm) {
      angle += rng.uniform(-0.5, 0.5);
      double nx = px + step * std::cos(angle);
      double ny = py + step * std::sin(angle);
      cv::line(img, cv::Point2d(px, py), cv::Point2d(nx, ny), cv::Scalar(0.35, 0.08, 0.05),
               std::max(1, size / 96), cv::LINE_AA);
      px = nx;
      py = ny;
    }
  }
  auto plant_lesions = [&](int count, double max_offset_frac) {
    for (int i = 0; i < count; ++i) {
      double ang = rng.uniform(0.0, 2.0 * M_PI);
      double off = rng.uniform(0.0, max_offset_frac) * radius;
      cv::Point2d p(cx + off * std::cos(ang), cy + off * std::sin(ang));
      int r = std::max(1, static_cast<int>(size * rng.uniform(0.015, 0.03)));
      cv::circle(img, p, r, cv::Scalar(0.98, 0.92, 0.45), cv::FILLED, cv::LINE_AA);
    }
  };
  if (rdr_lesions) plant_lesions(3 + static_cast<int>(rng.below(4)), 0.85);
  if (dme_lesions) plant_lesions(2 + static_cast<int>(rng.below(3)), 0.18);

  // speckle keeps sharp images rich in high frequencies
  for (int y = 0; y < size; ++y) {
    cv::Vec3f* row = img.ptr<cv::Vec3f>(y);
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        row[x][c] = std::clamp(row[x][c] + static_cast<float>(rng.normal(0.0, 0.02)), 0.0f, 1.0f);
  }

  if (blur_sigma > 0.0) {
    int k = 2 * static_cast<int>(std::ceil(3.0 * blur_sigma)) + 1;
    cv::GaussianBlur(img, img, cv::Size(k, k), blur_sigma, blur_sigma, cv::BORDER_REFLECT_101);
  }
  return img;
}

/// Generate n labeled synthetic images plus a manifest. Task 1 labels sharp
/// (1) vs blurred (0); tasks 2-3 label planted lesions (anywhere vs macular).
/// Byte-deterministic for a fixed seed.
inline std::vector<ImageRecord> make_synthetic_dataset(const std::filesystem::path& out_dir,
                                                       uint64_t seed, int n,
                                                       const SynthOptions& opt = {}) {
  std::filesystem::create_directories(out_dir);
  std::vector<ImageRecord> records;
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::child(seed, static_cast<uint64_t>(i));
    bool blurred = rng.bernoulli(opt.p_blur);
    bool rdr = rng.bernoulli(opt.p_rdr);
    bool dme = rng.bernoulli(opt.p_dme);
    double sigma = blurred
                       ? opt.image_size * rng.uniform(opt.blur_sigma_lo, opt.blur_sigma_hi)
                       : 0.0;
    Image img = render_synthetic_fundus(rng, opt.image_size, sigma, rdr, dme);
    char name[32];
    std::snprintf(name, sizeof(name), "synth_%05d", i);
    ImageRecord rec;
    rec.image_id = name;
    rec.image_path = (out_dir / (std::string(name) + ".png")).string();
    rec.task_labels[1] = blurred ? 0 : 1;
    rec.task_labels[2] = rdr ? 1 : 0;
    rec.task_labels[3] = dme ? 1 : 0;
    save_image_png(rec.image_path, img);
    records.push_back(std::move(rec));
  }
  write_manifest(out_dir / "manifest.csv", records);
  return records;
}

}  // namespace uwf
