#pragma once

#include "uwf/model_io.hpp"

namespace uwf {

/// Per-model embedding matrix, one row per image in image_id order.
struct FeatureMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;  // row-major
  std::vector<std::string> image_ids;
  std::string source_model;  // checkpoint id
  std::string domain;        // "rgb" | "frequency"
  std::string layer;         // extraction point

  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

/// Pooled pre-head embeddings for a batch of preprocessed images.
inline FeatureMatrix extract_features(Classifier& model,
                                      const std::vector<PreprocessedImage>& images,
                                      int batch_size = 16) {
  FeatureMatrix fm;
  fm.cols = model.spec().feature_dim;
  fm.rows = static_cast<int>(images.size());
  fm.data.resize(static_cast<size_t>(fm.rows) * fm.cols);
  fm.domain = model.meta().domain;
  fm.layer = model.backbone().explanation_layer() + ".pooled";
  fm.source_model = std::string(arch_name(model.spec().architecture_id));
  nn::Ctx ctx;  // eval
  // per-sample forwards keep rows independent of the caller's batching
  for (size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    if (!model.meta().domain.empty() && !img.domain.empty() && img.domain != model.meta().domain)
      throw DataError("domain mismatch extracting features: model '" + model.meta().domain +
                      "' vs image '" + img.domain + "' (" + img.image_id + ")");
    const auto& shape = img.chw.shape();
    Tensor x({1, shape[0], shape[1], shape[2]});
    std::copy_n(img.chw.data(), img.chw.numel(), x.data());
    auto feats = model.features(ag::make_var(std::move(x), false), ctx);
    std::copy_n(feats->value.data(), fm.cols, fm.data.data() + i * static_cast<size_t>(fm.cols));
  }
  for (const auto& img : images) fm.image_ids.push_back(img.image_id);
  return fm;
}

/// Column means and population standard deviations fitted on training rows
/// only. Columns with std below epsilon are flagged and floored at epsilon.
struct StandardizerStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<int> degenerate_columns;
  double epsilon = 1e-6;
  std::string source_model;
  std::string convention = "population";  // divide by N
};

inline StandardizerStats fit_standardizer(const FeatureMatrix& train, double epsilon = 1e-6) {
  if (train.rows < 2)
    throw DataError("fit_standardizer needs at least 2 rows, got " + std::to_string(train.rows));
  StandardizerStats s;
  s.epsilon = epsilon;
  s.source_model = train.source_model;
  s.mean.assign(static_cast<size_t>(train.cols), 0.0);
  s.std.assign(static_cast<size_t>(train.cols), 0.0);
  for (int r = 0; r < train.rows; ++r)
    for (int c = 0; c < train.cols; ++c) s.mean[static_cast<size_t>(c)] += train.at(r, c);
  for (auto& m : s.mean) m /= train.rows;
  for (int r = 0; r < train.rows; ++r)
    for (int c = 0; c < train.cols; ++c) {
      double d = train.at(r, c) - s.mean[static_cast<size_t>(c)];
      s.std[static_cast<size_t>(c)] += d * d;
    }
  for (int c = 0; c < train.cols; ++c) {
    double v = std::sqrt(s.std[static_cast<size_t>(c)] / train.rows);
    if (v < epsilon) {
      s.degenerate_columns.push_back(c);
      v = epsilon;
    }
    s.std[static_cast<size_t>(c)] = v;
  }
  return s;
}

inline FeatureMatrix apply_standardizer(const FeatureMatrix& fm, const StandardizerStats& s) {
  if (static_cast<int>(s.mean.size()) != fm.cols)
    throw DataError("standardizer width " + std::to_string(s.mean.size()) +
                    " does not match feature width " + std::to_string(fm.cols));
  FeatureMatrix out = fm;
  for (int r = 0; r < fm.rows; ++r)
    for (int c = 0; c < fm.cols; ++c)
      out.at(r, c) = static_cast<float>((fm.at(r, c) - s.mean[static_cast<size_t>(c)]) /
                                        s.std[static_cast<size_t>(c)]);
  return out;
}

/// Standardize each matrix with its stats and concatenate column blocks in
/// the given order. Row identity must agree across inputs.
inline FeatureMatrix concat_standardized(const std::vector<FeatureMatrix>& mats,
                                         const std::vector<StandardizerStats>& stats) {
  if (mats.empty()) throw DataError("concat_standardized: no feature matrices");
  if (stats.size() != mats.size())
    throw DataError("concat_standardized: stats count does not match matrix count");
  for (size_t m = 1; m < mats.size(); ++m) {
    if (mats[m].rows != mats[0].rows)
      throw DataError("concat_standardized: row count mismatch between blocks");
    for (int r = 0; r < mats[0].rows; ++r)
      if (mats[m].image_ids[static_cast<size_t>(r)] != mats[0].image_ids[static_cast<size_t>(r)])
        throw DataError("concat_standardized: row order mismatch at image_id '" +
                        mats[m].image_ids[static_cast<size_t>(r)] + "' vs '" +
                        mats[0].image_ids[static_cast<size_t>(r)] + "' (block " +
                        std::to_string(m) + ")");
  }
  FeatureMatrix out;
  out.rows = mats[0].rows;
  out.image_ids = mats[0].image_ids;
  out.domain = mats[0].domain;
  out.source_model = "fusion";
  out.layer = "concat";
  for (const auto& m : mats) out.cols += m.cols;
  out.data.resize(static_cast<size_t>(out.rows) * out.cols);
  int col0 = 0;
  for (size_t m = 0; m < mats.size(); ++m) {
    FeatureMatrix z = apply_standardizer(mats[m], stats[m]);
    for (int r = 0; r < z.rows; ++r)
      std::copy_n(z.data.data() + static_cast<size_t>(r) * z.cols, z.cols,
                  out.data.data() + static_cast<size_t>(r) * out.cols + col0);
    col0 += z.cols;
  }
  return out;
}

// ---- fusion head -----------------------------------------------------------------

class FusionHead {
 public:
  FusionHead(int in_dim, uint64_t seed) : in_dim_(in_dim) {
    Rng rng = Rng::child(seed, 3);
    fc1_.emplace("fusion.fc1", in_dim, kHeadHiddenWidth, rng);
    fc2_.emplace("fusion.fc2", kHeadHiddenWidth, 2, rng);
  }

  ag::Var forward_logits(const ag::Var& x, nn::Ctx& ctx) {
    ag::Var h = ag::relu(fc1_->forward(x));
    h = ag::dropout(h, kHeadDropout, ctx.training, ctx.rng_ref());
    return fc2_->forward(h);
  }

  ag::Var forward_probs(const ag::Var& x, nn::Ctx& ctx) {
    return ag::softmax_rows(forward_logits(x, ctx));
  }

  std::vector<nn::Parameter*> params() {
    std::vector<nn::Parameter*> out;
    fc1_->collect(out);
    fc2_->collect(out);
    return out;
  }

  int in_dim() const { return in_dim_; }

 private:
  int in_dim_;
  std::optional<nn::Linear> fc1_, fc2_;
};

/// Feature-level fusion ensemble for one (task, domain): ordered source
/// checkpoints, their training-set standardizers, and an MLP over the
/// concatenated embedding.
struct FusionModel {
  std::vector<std::string> sources;  // checkpoint paths, recorded order
  std::vector<StandardizerStats> stats;
  std::string domain;
  int task_id = 0;
  std::shared_ptr<FusionHead> head;
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  uint64_t seed = 0;
  nlohmann::json train_config;
};

inline std::vector<double> fusion_scores(FusionHead& head, const FeatureMatrix& x, int = 64) {
  std::vector<double> out;
  nn::Ctx ctx;  // eval
  for (int r = 0; r < x.rows; ++r) {
    Tensor t({1, x.cols});
    std::copy_n(x.data.data() + static_cast<size_t>(r) * x.cols, x.cols, t.data());
    auto probs = head.forward_probs(ag::make_var(std::move(t), false), ctx);
    out.push_back(static_cast<double>(probs->value.at(0, 1)));
  }
  return out;
}

/// Train the fusion MLP on standardized concatenated features with the same
/// optimizer / loss / early-stopping contract as the per-model training.
inline std::shared_ptr<FusionHead> train_fusion_head(const FeatureMatrix& train_x,
                                                     const std::vector<int>& train_y,
                                                     const FeatureMatrix& val_x,
                                                     const std::vector<int>& val_y,
                                                     const TrainConfig& cfg,
                                                     std::vector<EpochRecord>* history_out = nullptr,
                                                     int* best_epoch_out = nullptr) {
  cfg.validate();
  if (train_x.rows == 0) throw TrainError("empty fusion training features");
  if (static_cast<int>(train_y.size()) != train_x.rows)
    throw TrainError("fusion labels do not match feature rows");
  bool pos = false, neg = false;
  for (int l : val_y) (l == 1 ? pos : neg) = true;
  if (!pos || !neg)
    throw TrainError("fusion validation set contains a single class; AUROC is undefined");

  auto head = std::make_shared<FusionHead>(train_x.cols, cfg.seed);
  auto params = head->params();
  nn::AdamW opt(cfg.learning_rate, cfg.weight_decay);
  EarlyStopper stopper(cfg.early_stop_patience);
  std::vector<Tensor> best;
  std::vector<EpochRecord> history;

  std::vector<size_t> order(static_cast<size_t>(train_x.rows));
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng = Rng::child(cfg.seed, 400000u + static_cast<uint64_t>(epoch));
    Rng drop_rng = Rng::child(cfg.seed, 500000u + static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int seen = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      size_t b = std::min(static_cast<size_t>(cfg.batch_size), order.size() - start);
      Tensor x({static_cast<int>(b), train_x.cols});
      Tensor y({static_cast<int>(b), 2});
      for (size_t i = 0; i < b; ++i) {
        size_t r = order[start + i];
        std::copy_n(train_x.data.data() + r * static_cast<size_t>(train_x.cols), train_x.cols,
                    x.data() + static_cast<int64_t>(i) * train_x.cols);
        int lbl = train_y[r];
        y.at(static_cast<int>(i), 0) = lbl == 0 ? 1.0f : 0.0f;
        y.at(static_cast<int>(i), 1) = lbl == 1 ? 1.0f : 0.0f;
      }
      nn::Ctx ctx{true, &drop_rng};
      auto logits = head->forward_logits(ag::make_var(std::move(x), false), ctx);
      auto loss = ag::cross_entropy_logits(logits, y);
      double lv = static_cast<double>(loss->value[0]);
      if (!std::isfinite(lv))
        throw TrainError("fusion training diverged at epoch " + std::to_string(epoch));
      loss_sum += lv * static_cast<double>(b);
      seen += static_cast<int>(b);
      nn::AdamW::zero_grad(params);
      ag::backward(loss);
      opt.step(params);
    }
    ScoredSet s;
    auto scores = fusion_scores(*head, val_x);
    for (size_t i = 0; i < scores.size(); ++i)
      s.push(val_x.image_ids.empty() ? std::to_string(i) : val_x.image_ids[i], scores[i],
             val_y[i]);
    double metric = auroc(s);
    history.push_back({epoch, loss_sum / seen, metric});
    if (stopper.observe(metric)) {
      best.clear();
      for (auto* p : params) best.push_back(p->value());
    }
    if (stopper.should_stop()) break;
  }
  if (!best.empty())
    for (size_t i = 0; i < params.size(); ++i) params[i]->value() = best[i];
  if (history_out) *history_out = history;
  if (best_epoch_out) *best_epoch_out = stopper.best_epoch();
  return head;
}

/// End-to-end fusion inference on one image preprocessed in the fusion
/// model's domain: per-source extraction, standardization, concatenation,
/// MLP. `sources` must be the recorded checkpoints in recorded order.
inline double fusion_predict(FusionModel& fusion,
                             const std::vector<std::shared_ptr<Classifier>>& sources,
                             const PreprocessedImage& image) {
  if (sources.size() != fusion.stats.size())
    throw DataError("fusion_predict: expected " + std::to_string(fusion.stats.size()) +
                    " source models, got " + std::to_string(sources.size()));
  std::vector<FeatureMatrix> mats;
  for (auto& model : sources) {
    if (!fusion.domain.empty() && !image.domain.empty() && image.domain != fusion.domain)
      throw DataError("fusion domain mismatch: model '" + fusion.domain + "' vs image '" +
                      image.domain + "'");
    mats.push_back(extract_features(*model, {image}, 1));
  }
  FeatureMatrix joint = concat_standardized(mats, fusion.stats);
  return fusion_scores(*fusion.head, joint, 1)[0];
}

// ---- fusion model persistence ------------------------------------------------------

inline void save_fusion_model(const std::filesystem::path& path, FusionModel& fusion) {
  CheckpointFile ckpt;
  auto stats_json = nlohmann::json::array();
  for (const auto& s : fusion.stats)
    stats_json.push_back({{"mean", s.mean},
                          {"std", s.std},
                          {"degenerate_columns", s.degenerate_columns},
                          {"epsilon", s.epsilon},
                          {"source_model", s.source_model},
                          {"convention", s.convention}});
  ckpt.meta = {{"kind", "fusion"},
               {"sources", fusion.sources},
               {"stats", stats_json},
               {"domain", fusion.domain},
               {"task_id", fusion.task_id},
               {"in_dim", fusion.head->in_dim()},
               {"history", detail::history_to_json(fusion.history)},
               {"best_epoch", fusion.best_epoch},
               {"seed", fusion.seed},
               {"train_config", fusion.train_config}};
  for (auto* p : fusion.head->params()) ckpt.tensors.emplace_back(p->name, p->value());
  save_checkpoint_file(path, ckpt);
}

inline FusionModel load_fusion_model(const std::filesystem::path& path) {
  CheckpointFile ckpt = load_checkpoint_file(path);
  if (ckpt.meta.value("kind", "") != "fusion")
    throw DataError("not a fusion checkpoint: " + path.string());
  FusionModel f;
  f.sources = ckpt.meta.at("sources").get<std::vector<std::string>>();
  for (const auto& j : ckpt.meta.at("stats")) {
    StandardizerStats s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    s.degenerate_columns = j.value("degenerate_columns", std::vector<int>{});
    s.epsilon = j.value("epsilon", 1e-6);
    s.source_model = j.value("source_model", "");
    s.convention = j.value("convention", "population");
    f.stats.push_back(std::move(s));
  }
  f.domain = ckpt.meta.value("domain", "");
  f.task_id = ckpt.meta.value("task_id", 0);
  f.seed = ckpt.meta.value("seed", 0ull);
  f.best_epoch = ckpt.meta.value("best_epoch", -1);
  if (ckpt.meta.contains("history")) f.history = detail::history_from_json(ckpt.meta["history"]);
  if (ckpt.meta.contains("train_config")) f.train_config = ckpt.meta["train_config"];
  f.head = std::make_shared<FusionHead>(ckpt.meta.at("in_dim").get<int>(), f.seed);
  for (auto* p : f.head->params()) {
    const Tensor* t = ckpt.find(p->name);
    if (!t) throw DataError("fusion checkpoint missing tensor '" + p->name + "'");
    p->value() = *t;
  }
  return f;
}

// ---- feature matrix file (columnar binary) -----------------------------------------
//
// Layout, little-endian:
//   bytes 0-7    magic "UWFFEAT1"
//   u32          version (1)
//   u32 rows, u32 cols
//   str          source_model   (u32 length + bytes, 3x for the three strings)
//   str          domain
//   str          layer
//   rows x str   image_ids
//   f32[cols*rows] data, column-major (column j occupies rows consecutive floats)

inline constexpr char kFeatMagic[8] = {'U', 'W', 'F', 'F', 'E', 'A', 'T', '1'};

namespace detail {
inline void write_str(std::ofstream& f, const std::string& s) {
  uint32_t n = static_cast<uint32_t>(s.size());
  f.write(reinterpret_cast<const char*>(&n), sizeof(n));
  f.write(s.data(), n);
}
inline std::string read_str(std::ifstream& f) {
  uint32_t n = 0;
  f.read(reinterpret_cast<char*>(&n), sizeof(n));
  std::string s(n, '\0');
  f.read(s.data(), n);
  return s;
}
}  // namespace detail

inline void save_feature_matrix(const std::filesystem::path& path, const FeatureMatrix& fm) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write feature matrix: " + path.string());
  f.write(kFeatMagic, 8);
  uint32_t version = 1, rows = static_cast<uint32_t>(fm.rows), cols = static_cast<uint32_t>(fm.cols);
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  f.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
  f.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
  detail::write_str(f, fm.source_model);
  detail::write_str(f, fm.domain);
  detail::write_str(f, fm.layer);
  for (const auto& id : fm.image_ids) detail::write_str(f, id);
  std::vector<float> col(fm.rows);
  for (int c = 0; c < fm.cols; ++c) {
    for (int r = 0; r < fm.rows; ++r) col[static_cast<size_t>(r)] = fm.at(r, c);
    f.write(reinterpret_cast<const char*>(col.data()),
            static_cast<std::streamsize>(col.size() * sizeof(float)));
  }
  if (!f) throw DataError("short write on feature matrix: " + path.string());
}

inline FeatureMatrix load_feature_matrix(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("feature matrix not found: " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kFeatMagic, 8) != 0)
    throw DataError("not a feature matrix file: " + path.string());
  uint32_t version = 0, rows = 0, cols = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != 1) throw DataError("unsupported feature matrix version in " + path.string());
  f.read(reinterpret_cast<char*>(&rows), sizeof(rows));
  f.read(reinterpret_cast<char*>(&cols), sizeof(cols));
  FeatureMatrix fm;
  fm.rows = static_cast<int>(rows);
  fm.cols = static_cast<int>(cols);
  fm.source_model = detail::read_str(f);
  fm.domain = detail::read_str(f);
  fm.layer = detail::read_str(f);
  for (uint32_t r = 0; r < rows; ++r) fm.image_ids.push_back(detail::read_str(f));
  fm.data.resize(static_cast<size_t>(rows) * cols);
  std::vector<float> col(rows);
  for (uint32_t c = 0; c < cols; ++c) {
    f.read(reinterpret_cast<char*>(col.data()),
           static_cast<std::streamsize>(col.size() * sizeof(float)));
    for (uint32_t r = 0; r < rows; ++r) fm.at(static_cast<int>(r), static_cast<int>(c)) = col[r];
  }
  if (!f) throw DataError("truncated feature matrix: " + path.string());
  return fm;
}

}  // namespace uwf
