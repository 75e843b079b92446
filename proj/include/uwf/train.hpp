#pragma once

#include <functional>
#include <optional>

#include "uwf/backbones.hpp"
#include "uwf/imageio.hpp"
#include "uwf/metrics.hpp"

namespace uwf {

enum class Stage { head_only, finetune, foundation_adapt };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::head_only: return "head_only";
    case Stage::finetune: return "finetune";
    default: return "foundation_adapt";
  }
}

inline Stage stage_from_name(const std::string& s) {
  if (s == "head_only") return Stage::head_only;
  if (s == "finetune") return Stage::finetune;
  if (s == "foundation_adapt") return Stage::foundation_adapt;
  throw ConfigError("unknown training stage: " + s);
}

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  int batch_size = 16;
  int max_epochs = 100;
  int early_stop_patience = 10;
  Stage stage = Stage::head_only;
  double cutmix_alpha = 1.0;
  std::optional<bool> use_cutmix;  // default: on for foundation_adapt only
  uint64_t seed = 42;

  bool cutmix_enabled() const { return use_cutmix.value_or(stage == Stage::foundation_adapt); }

  void validate() const {
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
    if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be at least 1");
    if (cutmix_alpha <= 0.0) throw ConfigError("cutmix_alpha must be positive");
  }

  nlohmann::json to_json() const {
    return {{"learning_rate", learning_rate},
            {"weight_decay", weight_decay},
            {"batch_size", batch_size},
            {"max_epochs", max_epochs},
            {"early_stop_patience", early_stop_patience},
            {"stage", stage_name(stage)},
            {"cutmix_alpha", cutmix_alpha},
            {"use_cutmix", cutmix_enabled()},
            {"seed", seed}};
  }
};

// ---- datasets ---------------------------------------------------------------

struct Dataset {
  std::vector<Tensor> images;  // [C,H,W]
  std::vector<int> labels;     // 0/1
  std::vector<std::string> ids;

  size_t size() const { return images.size(); }
  bool has_both_classes() const {
    bool pos = false, neg = false;
    for (int l : labels) (l == 1 ? pos : neg) = true;
    return pos && neg;
  }
};

/// Training batches pull images through this seam so augmentation can be
/// re-drawn per epoch deterministically.
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual size_t size() const = 0;
  virtual Tensor image(size_t index, int epoch) const = 0;
  virtual int label(size_t index) const = 0;
};

class DatasetSource : public BatchSource {
 public:
  explicit DatasetSource(const Dataset& ds) : ds_(&ds) {}
  size_t size() const override { return ds_->size(); }
  Tensor image(size_t i, int) const override { return ds_->images[i]; }
  int label(size_t i) const override { return ds_->labels[i]; }

 private:
  const Dataset* ds_;
};

// ---- cutmix -----------------------------------------------------------------

struct CutMixBox {
  int x0 = 0, y0 = 0, w = 0, h = 0;
};

struct CutMixResult {
  Tensor images;  // [B,C,H,W]
  Tensor labels;  // [B,K] soft
  std::vector<int> partner;
  CutMixBox box;
  double lambda_sampled = 1.0;
  double lambda_adjusted = 1.0;
};

/// Paste one shared box from a permuted partner into every image; label
/// weights come from the realized (integer) box area, not the sampled lambda.
inline CutMixResult cutmix_with_lambda(const Tensor& images, const Tensor& labels, double lambda,
                                       Rng& rng) {
  const auto& s = images.shape();
  int B = s[0], C = s[1], H = s[2], W = s[3];
  if (B < 2) throw std::invalid_argument("cutmix requires batch size >= 2");
  lambda = std::clamp(lambda, 0.0, 1.0);

  CutMixResult out;
  out.lambda_sampled = lambda;
  out.images = images;
  out.labels = labels;
  out.partner.resize(static_cast<size_t>(B));
  for (int i = 0; i < B; ++i) out.partner[static_cast<size_t>(i)] = i;
  rng.shuffle(out.partner);

  double cut = std::sqrt(1.0 - lambda);
  int bw = std::clamp(static_cast<int>(std::lround(cut * W)), 0, W);
  int bh = std::clamp(static_cast<int>(std::lround(cut * H)), 0, H);
  out.box.w = bw;
  out.box.h = bh;
  out.box.x0 = bw < W ? static_cast<int>(rng.below(static_cast<uint64_t>(W - bw + 1))) : 0;
  out.box.y0 = bh < H ? static_cast<int>(rng.below(static_cast<uint64_t>(H - bh + 1))) : 0;
  out.lambda_adjusted =
      1.0 - static_cast<double>(bw) * bh / (static_cast<double>(W) * H);

  if (bw > 0 && bh > 0) {
    int64_t plane = static_cast<int64_t>(H) * W;
    for (int i = 0; i < B; ++i) {
      int j = out.partner[static_cast<size_t>(i)];
      for (int c = 0; c < C; ++c) {
        const float* src = images.data() + (static_cast<int64_t>(j) * C + c) * plane;
        float* dst = out.images.data() + (static_cast<int64_t>(i) * C + c) * plane;
        for (int y = out.box.y0; y < out.box.y0 + bh; ++y)
          std::copy_n(src + static_cast<int64_t>(y) * W + out.box.x0, bw,
                      dst + static_cast<int64_t>(y) * W + out.box.x0);
      }
    }
  }
  int K = labels.dim(1);
  float lam = static_cast<float>(out.lambda_adjusted);
  for (int i = 0; i < B; ++i) {
    int j = out.partner[static_cast<size_t>(i)];
    for (int k = 0; k < K; ++k)
      out.labels.at(i, k) = lam * labels.at(i, k) + (1.0f - lam) * labels.at(j, k);
  }
  return out;
}

inline CutMixResult cutmix(const Tensor& images, const Tensor& labels, double alpha, Rng& rng) {
  if (alpha <= 0.0) throw std::invalid_argument("cutmix alpha must be positive");
  double lambda = rng.beta(alpha, alpha);
  return cutmix_with_lambda(images, labels, lambda, rng);
}

/// Mean over rows of -sum(label * log(prob + eps)).
inline double cross_entropy(const Tensor& probs, const Tensor& soft_labels, double eps = 1e-12) {
  if (!(probs.shape() == soft_labels.shape()))
    throw std::invalid_argument("cross_entropy: shape mismatch");
  int m = probs.dim(0);
  double total = 0.0;
  for (int64_t i = 0; i < probs.numel(); ++i)
    if (soft_labels[i] != 0.0f)
      total -= static_cast<double>(soft_labels[i]) *
               std::log(static_cast<double>(probs[i]) + eps);
  return total / m;
}

// ---- early stopping ------------------------------------------------------------

/// Maximized-metric early stopping: halt at the first epoch t with
/// t - argmax(metric[..t]) >= patience; best weights belong to the argmax.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("early-stop patience must be at least 1");
  }

  /// Record one epoch's metric; true when this epoch is a new best.
  bool observe(double metric) {
    ++epoch_;
    if (metric > best_metric_) {
      best_metric_ = metric;
      best_epoch_ = epoch_;
      return true;
    }
    return false;
  }

  bool should_stop() const { return epoch_ - best_epoch_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_metric() const { return best_metric_; }
  int epochs_seen() const { return epoch_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  double best_metric_ = -std::numeric_limits<double>::infinity();
};

// ---- prediction -----------------------------------------------------------------

/// Inference runs strictly per sample so scores are bit-identical whatever
/// batching the caller uses (GEMM blocking depends on the batch dimension).
inline std::vector<double> predict_scores(Classifier& model, const std::vector<Tensor>& images,
                                          int = 16) {
  std::vector<double> out;
  out.reserve(images.size());
  nn::Ctx ctx;  // eval
  for (const auto& img : images) {
    const auto& shape = img.shape();
    Tensor x({1, shape[0], shape[1], shape[2]});
    std::copy_n(img.data(), img.numel(), x.data());
    auto xv = ag::make_var(std::move(x), false);
    auto y = model.forward(xv, ctx);
    out.push_back(static_cast<double>(y.probs->value.at(0, 1)));
  }
  return out;
}

/// Positive-class probability for one preprocessed image. The image's domain
/// tag must match the domain the model was trained in.
inline double predict_proba(Classifier& model, const PreprocessedImage& image) {
  if (!model.meta().domain.empty() && !image.domain.empty() &&
      model.meta().domain != image.domain)
    throw DataError("domain mismatch: model trained on '" + model.meta().domain +
                    "' but input is '" + image.domain + "' (" + image.image_id + ")");
  return predict_scores(model, {image.chw}, 1)[0];
}

// ---- training loop ---------------------------------------------------------------

struct WeightSnapshot {
  std::vector<Tensor> params;
  std::vector<Tensor> buffers;
};

inline WeightSnapshot take_snapshot(Classifier& model) {
  WeightSnapshot s;
  for (auto* p : model.all_params()) s.params.push_back(p->value());
  for (auto& [_, b] : model.buffers()) s.buffers.push_back(*b);
  return s;
}

inline void restore_snapshot(Classifier& model, const WeightSnapshot& s) {
  auto params = model.all_params();
  for (size_t i = 0; i < params.size(); ++i) params[i]->value() = s.params[i];
  auto buffers = model.buffers();
  for (size_t i = 0; i < buffers.size(); ++i) *buffers[i].second = s.buffers[i];
}

struct TrainHooks {
  /// Replaces the validation-AUROC computation (scripted-metric tests).
  std::function<double(int epoch, Classifier& model)> val_metric;
  std::function<void(const EpochRecord&)> on_epoch;
};

inline std::vector<EpochRecord> train_model(Classifier& model, const BatchSource& train,
                                            const Dataset& val, const TrainConfig& cfg,
                                            const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train.size() == 0) throw TrainError("empty training data");
  if (!hooks.val_metric) {
    if (val.size() == 0) throw TrainError("empty validation data");
    if (!val.has_both_classes())
      throw TrainError(
          "validation set contains a single class; AUROC monitoring is undefined. "
          "Provide a validation split with both classes.");
  }

  switch (cfg.stage) {
    case Stage::head_only:
      model.set_trainable_head_only();
      break;
    case Stage::finetune: {
      const auto& done = model.meta().completed_stages;
      if (std::find(done.begin(), done.end(), std::string("head_only")) == done.end())
        throw TrainError("finetune stage requires a completed head_only stage on this model");
      model.set_trainable_finetune(model.spec().unfreeze_fraction);
      break;
    }
    case Stage::foundation_adapt:
      model.set_trainable_all();
      break;
  }

  auto params = model.all_params();
  nn::AdamW opt(cfg.learning_rate, cfg.weight_decay);
  EarlyStopper stopper(cfg.early_stop_patience);
  WeightSnapshot best;
  std::vector<EpochRecord> history;
  const bool mix = cfg.cutmix_enabled();

  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng = Rng::child(cfg.seed, 100000u + static_cast<uint64_t>(epoch));
    Rng drop_rng = Rng::child(cfg.seed, 200000u + static_cast<uint64_t>(epoch));
    Rng mix_rng = Rng::child(cfg.seed, 300000u + static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    int64_t seen = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      size_t b = std::min(static_cast<size_t>(cfg.batch_size), order.size() - start);
      Tensor first = train.image(order[start], epoch);
      const auto& shape = first.shape();
      Tensor x({static_cast<int>(b), shape[0], shape[1], shape[2]});
      Tensor y({static_cast<int>(b), 2});
      int64_t n = first.numel();
      for (size_t i = 0; i < b; ++i) {
        Tensor img = i == 0 ? std::move(first) : train.image(order[start + i], epoch);
        std::copy_n(img.data(), n, x.data() + static_cast<int64_t>(i) * n);
        int lbl = train.label(order[start + i]);
        y.at(static_cast<int>(i), 0) = lbl == 0 ? 1.0f : 0.0f;
        y.at(static_cast<int>(i), 1) = lbl == 1 ? 1.0f : 0.0f;
      }
      if (mix && b >= 2) {
        auto cm = cutmix(x, y, cfg.cutmix_alpha, mix_rng);
        x = std::move(cm.images);
        y = std::move(cm.labels);
      }
      auto xv = ag::make_var(std::move(x), false);
      nn::Ctx ctx{true, &drop_rng};
      auto out = model.forward(xv, ctx);
      auto loss = ag::cross_entropy_logits(out.logits, y);
      double lv = static_cast<double>(loss->value[0]);
      if (!std::isfinite(lv))
        throw TrainError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
      loss_sum += lv * static_cast<double>(b);
      seen += static_cast<int64_t>(b);
      nn::AdamW::zero_grad(params);
      ag::backward(loss);
      opt.step(params);
    }

    double metric = hooks.val_metric ? hooks.val_metric(epoch, model) : [&] {
      ScoredSet s;
      auto scores = predict_scores(model, val.images, cfg.batch_size);
      for (size_t i = 0; i < val.size(); ++i)
        s.push(val.ids.empty() ? std::to_string(i) : val.ids[i], scores[i], val.labels[i]);
      return auroc(s);
    }();

    EpochRecord rec{epoch, loss_sum / static_cast<double>(seen), metric};
    history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (stopper.observe(metric)) best = take_snapshot(model);
    if (stopper.should_stop()) break;
  }

  if (!best.params.empty()) restore_snapshot(model, best);
  model.meta().best_epoch = stopper.best_epoch();
  model.meta().history.insert(model.meta().history.end(), history.begin(), history.end());
  model.meta().completed_stages.push_back(stage_name(cfg.stage));
  model.meta().train_config = cfg.to_json();
  return history;
}

inline std::vector<EpochRecord> train_stage1(Classifier& model, const BatchSource& train,
                                             const Dataset& val, TrainConfig cfg,
                                             const TrainHooks& hooks = {}) {
  if (cfg.stage != Stage::head_only)
    throw ConfigError("train_stage1 requires stage = head_only");
  return train_model(model, train, val, cfg, hooks);
}

inline std::vector<EpochRecord> train_stage2(Classifier& model, const BatchSource& train,
                                             const Dataset& val, TrainConfig cfg,
                                             const TrainHooks& hooks = {}) {
  if (cfg.stage != Stage::finetune)
    throw ConfigError("train_stage2 requires stage = finetune");
  return train_model(model, train, val, cfg, hooks);
}

inline std::vector<EpochRecord> train_foundation_adapt(Classifier& model, const BatchSource& train,
                                                       const Dataset& val, TrainConfig cfg,
                                                       const TrainHooks& hooks = {}) {
  if (cfg.stage != Stage::foundation_adapt)
    throw ConfigError("train_foundation_adapt requires stage = foundation_adapt");
  return train_model(model, train, val, cfg, hooks);
}

}  // namespace uwf
