#pragma once

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "uwf/train.hpp"

namespace uwf {

/// Relevance heatmap for one (model, image, class): non-negative values
/// normalized to [0,1], upsampled to the model input size.
struct Heatmap {
  cv::Mat map;  // CV_32F, input_size x input_size, values in [0,1]
  Tensor raw;   // pre-upsample rectified grid [grid_h, grid_w]
  int target_class = 1;
  std::string layer;
  std::string image_id;
  int grid_h = 0, grid_w = 0;
};

namespace detail {

inline cv::Mat upsample_bilinear(const Tensor& grid, int out_h, int out_w) {
  cv::Mat src(grid.dim(0), grid.dim(1), CV_32F);
  for (int y = 0; y < src.rows; ++y)
    for (int x = 0; x < src.cols; ++x)
      src.at<float>(y, x) = grid[static_cast<int64_t>(y) * grid.dim(1) + x];
  cv::Mat out;
  cv::resize(src, out, cv::Size(out_w, out_h), 0, 0, cv::INTER_LINEAR);
  return out;
}

inline void minmax_normalize_inplace(cv::Mat& m) {
  double lo = 0.0, hi = 0.0;
  cv::minMaxLoc(m, &lo, &hi);
  if (hi <= 0.0) {
    m.setTo(0.0f);
  } else if (hi - lo <= 0.0) {
    m.setTo(1.0f);
  } else {
    m = (m - lo) / (hi - lo);
  }
}

struct FlagGuard {
  std::vector<std::pair<nn::Parameter*, bool>> saved;
  explicit FlagGuard(const std::vector<nn::Parameter*>& params) {
    for (auto* p : params) {
      saved.emplace_back(p, p->trainable);
      p->var->requires_grad = false;
    }
  }
  ~FlagGuard() {
    for (auto& [p, t] : saved) p->var->requires_grad = t;
  }
};

}  // namespace detail

/// Grad-CAM: channel weights are the spatially averaged gradients of the
/// target-class logit, the map is the rectified weighted activation sum,
/// bilinearly upsampled and min-max normalized.
inline Heatmap gradcam(Classifier& model, const PreprocessedImage& image, int target_class) {
  if (!model.meta().domain.empty() && !image.domain.empty() &&
      model.meta().domain != image.domain)
    throw DataError("gradcam domain mismatch: model '" + model.meta().domain + "' vs image '" +
                    image.domain + "'");
  auto all = model.all_params();
  detail::FlagGuard guard(all);  // gradients flow through activations only

  const auto& s = image.chw.shape();
  Tensor x({1, s[0], s[1], s[2]}, std::vector<float>(image.chw.data(),
                                                     image.chw.data() + image.chw.numel()));
  auto xv = ag::make_var(std::move(x), true);
  nn::Ctx ctx;  // eval
  auto out = model.forward(xv, ctx);
  auto target = ag::narrow(out.logits, 1, target_class, 1);
  ag::backward(target);

  const ag::Var& cap = out.backbone.explanation;
  if (cap->grad.empty()) throw DataError("gradcam: no gradient reached the explanation layer");

  Heatmap h;
  h.target_class = target_class;
  h.layer = out.backbone.layer_name;
  h.image_id = image.image_id;
  h.grid_h = out.backbone.grid_h;
  h.grid_w = out.backbone.grid_w;

  if (!out.backbone.token_based) {
    int C = cap->value.dim(1), gh = cap->value.dim(2), gw = cap->value.dim(3);
    int64_t plane = static_cast<int64_t>(gh) * gw;
    h.raw = Tensor({gh, gw});
    for (int c = 0; c < C; ++c) {
      const float* g = cap->grad.data() + c * plane;
      const float* a = cap->value.data() + c * plane;
      float w = 0.0f;
      for (int64_t i = 0; i < plane; ++i) w += g[i];
      w /= static_cast<float>(plane);
      for (int64_t i = 0; i < plane; ++i) h.raw[i] += w * a[i];
    }
  } else {
    int T1 = cap->value.dim(1), D = cap->value.dim(2);
    int tokens = T1 - 1;  // class token excluded
    int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(tokens))));
    if (grid * grid != tokens)
      throw DataError("gradcam: non-square token count (" + std::to_string(tokens) +
                      ") after excluding the class token");
    h.grid_h = h.grid_w = grid;
    std::vector<float> w(static_cast<size_t>(D), 0.0f);
    for (int t = 1; t < T1; ++t) {
      const float* g = cap->grad.data() + static_cast<int64_t>(t) * D;
      for (int d = 0; d < D; ++d) w[static_cast<size_t>(d)] += g[d];
    }
    for (auto& v : w) v /= static_cast<float>(tokens);
    h.raw = Tensor({grid, grid});
    for (int t = 1; t < T1; ++t) {
      const float* a = cap->value.data() + static_cast<int64_t>(t) * D;
      float acc = 0.0f;
      for (int d = 0; d < D; ++d) acc += w[static_cast<size_t>(d)] * a[d];
      h.raw[t - 1] = acc;
    }
  }
  for (int64_t i = 0; i < h.raw.numel(); ++i) h.raw[i] = std::max(0.0f, h.raw[i]);

  h.map = detail::upsample_bilinear(h.raw, s[1], s[2]);
  detail::minmax_normalize_inplace(h.map);
  return h;
}

/// Token-grid Grad-CAM entry point; rejects non-transformer models.
inline Heatmap gradcam_transformer(Classifier& model, const PreprocessedImage& image,
                                   int target_class) {
  bool transformer = model.spec().architecture_id == Arch::patch_transformer ||
                     model.spec().architecture_id == Arch::retinal_foundation;
  if (!transformer)
    throw DataError("gradcam_transformer requires a token-based backbone, got " +
                    std::string(arch_name(model.spec().architecture_id)));
  return gradcam(model, image, target_class);
}

/// Colorize the heatmap and alpha-blend it over the image (both RGB float).
inline Image overlay(const Image& image, const Heatmap& heat, int colormap = cv::COLORMAP_VIRIDIS,
                     double alpha = 0.4) {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("overlay alpha must be in [0, 1]");
  cv::Mat m = heat.map;
  if (m.rows != image.rows || m.cols != image.cols)
    cv::resize(m, m, cv::Size(image.cols, image.rows), 0, 0, cv::INTER_LINEAR);
  cv::Mat heat_u8;
  m.convertTo(heat_u8, CV_8U, 255.0);
  cv::Mat color_bgr;
  cv::applyColorMap(heat_u8, color_bgr, colormap);
  cv::Mat color_rgb;
  cv::cvtColor(color_bgr, color_rgb, cv::COLOR_BGR2RGB);
  cv::Mat color_f;
  color_rgb.convertTo(color_f, CV_32FC3, 1.0 / 255.0);
  Image out(image.rows, image.cols, CV_32FC3);
  float a = static_cast<float>(alpha);
  for (int y = 0; y < image.rows; ++y) {
    const cv::Vec3f* src = image.ptr<cv::Vec3f>(y);
    const cv::Vec3f* hc = color_f.ptr<cv::Vec3f>(y);
    cv::Vec3f* dst = out.ptr<cv::Vec3f>(y);
    for (int x = 0; x < image.cols; ++x)
      for (int c = 0; c < 3; ++c) dst[x][c] = (1.0f - a) * src[x][c] + a * hc[x][c];
  }
  return out;
}

/// Fraction of total heatmap mass in the left half of the map.
inline double left_half_mass_fraction(const cv::Mat& map) {
  double left = 0.0, total = 0.0;
  for (int y = 0; y < map.rows; ++y) {
    const float* row = map.ptr<float>(y);
    for (int x = 0; x < map.cols; ++x) {
      total += row[x];
      if (x < map.cols / 2) left += row[x];
    }
  }
  return total > 0.0 ? left / total : 0.0;
}

/// Sidecar metadata: peak location plus the area fractions holding 25/50/75/90
/// percent of the total mass.
inline nlohmann::json heatmap_sidecar(const Heatmap& h) {
  cv::Point peak(0, 0);
  double maxv = 0.0;
  cv::minMaxLoc(h.map, nullptr, &maxv, nullptr, &peak);
  std::vector<float> vals;
  vals.reserve(static_cast<size_t>(h.map.total()));
  double total = 0.0;
  for (int y = 0; y < h.map.rows; ++y) {
    const float* row = h.map.ptr<float>(y);
    for (int x = 0; x < h.map.cols; ++x) {
      vals.push_back(row[x]);
      total += row[x];
    }
  }
  std::sort(vals.rbegin(), vals.rend());
  nlohmann::json quantiles;
  for (double q : {0.25, 0.5, 0.75, 0.9}) {
    double acc = 0.0;
    size_t k = 0;
    while (k < vals.size() && (total <= 0.0 || acc < q * total)) acc += vals[k++];
    quantiles["q" + std::to_string(static_cast<int>(q * 100))] =
        static_cast<double>(k) / static_cast<double>(vals.size());
  }
  return {{"image_id", h.image_id},
          {"target_class", h.target_class},
          {"layer", h.layer},
          {"grid", {h.grid_h, h.grid_w}},
          {"peak", {{"x", peak.x}, {"y", peak.y}}},
          {"peak_value", maxv},
          {"mass_quantiles", quantiles}};
}

struct ExplanationPanel {
  std::string image_id;
  int task_id = 0;
  std::string png_path;   // side-by-side original | overlay
  std::string json_path;  // sidecar
  int predicted_class = -1;
  double score = 0.0;
};

/// Writes {id}_panel.png and {id}.json, returns the panel record.
inline ExplanationPanel write_explanation_panel(const std::filesystem::path& dir,
                                                const Image& original, const Heatmap& heat,
                                                int task_id, int predicted_class, double score,
                                                double alpha = 0.4) {
  Image blended = overlay(original, heat, cv::COLORMAP_VIRIDIS, alpha);
  cv::Mat panel;
  cv::hconcat(std::vector<cv::Mat>{original, blended}, panel);
  ExplanationPanel p;
  p.image_id = heat.image_id;
  p.task_id = task_id;
  p.predicted_class = predicted_class;
  p.score = score;
  p.png_path = (dir / (heat.image_id + "_panel.png")).string();
  p.json_path = (dir / (heat.image_id + ".json")).string();
  save_image_png(p.png_path, panel);
  nlohmann::json sidecar = heatmap_sidecar(heat);
  sidecar["predicted_class"] = predicted_class;
  sidecar["score"] = score;
  write_text_file(p.json_path, sidecar.dump(2) + "\n");
  return p;
}

/// HTML report grouping panels by task with letter labels.
inline std::string write_explanation_report(const std::filesystem::path& dir,
                                            const std::vector<ExplanationPanel>& panels) {
  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
       << "<title>Grad-CAM report</title>\n"
       << "<style>body{font-family:sans-serif;margin:24px;}figure{display:inline-block;"
       << "margin:8px;}img{max-width:480px;}figcaption{font-size:13px;}</style>\n"
       << "</head><body>\n<h1>Grad-CAM report</h1>\n";
  char label = 'A';
  int last_task = -1;
  for (const auto& p : panels) {
    if (p.task_id != last_task) {
      if (last_task != -1) html << "</div>\n";
      html << "<h2>Task " << p.task_id << "</h2>\n<div>\n";
      last_task = p.task_id;
    }
    std::string rel = std::filesystem::path(p.png_path).filename().string();
    html << "<figure><img src=\"" << rel << "\" alt=\"" << p.image_id << "\">"
         << "<figcaption>(" << label << ") " << p.image_id << " &mdash; predicted class "
         << p.predicted_class << " (p=" << std::fixed << std::setprecision(3) << p.score
         << ")</figcaption></figure>\n";
    if (label < 'Z') ++label;
  }
  if (last_task != -1) html << "</div>\n";
  html << "</body></html>\n";
  auto path = dir / "report.html";
  write_text_file(path, html.str());
  return path.string();
}

}  // namespace uwf
