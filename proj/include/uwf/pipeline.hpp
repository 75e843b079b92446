#pragma once

#include <future>
#include <iostream>
#include <thread>

#include "uwf/frequency.hpp"
#include "uwf/fusion.hpp"
#include "uwf/gradcam.hpp"
#include "uwf/runconfig.hpp"
#include "uwf/spatial.hpp"
#include "uwf/synth.hpp"

namespace uwf {

namespace detail {
template <typename Fn>
void parallel_for(size_t n, Fn&& fn) {
  unsigned workers = std::max(1u, std::thread::hardware_concurrency());
  if (n < 2 || workers < 2) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  auto run = [&] {
    for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
  };
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
}
}  // namespace detail

inline std::string checkpoint_filename(int task, const std::string& domain,
                                       const std::string& model, uint64_t seed) {
  return "task" + std::to_string(task) + "_" + domain + "_" + model + "_" +
         std::to_string(seed) + ".ckpt";
}

/// Per-split model-ready data. RGB training keeps the normalized images so
/// augmentation can be redrawn every epoch.
struct PreparedSplit {
  Dataset data;
  std::vector<Image> normalized;  // rgb train only
};

/// Training-time augmentation source: deterministic per (seed, image, epoch).
class AugmentedSource : public BatchSource {
 public:
  AugmentedSource(const PreparedSplit& split, AugmentPolicy policy, uint64_t seed)
      : split_(&split), policy_(policy), seed_(seed) {}

  size_t size() const override { return split_->data.size(); }
  int label(size_t i) const override { return split_->data.labels[i]; }

  Tensor image(size_t i, int epoch) const override {
    if (split_->normalized.empty()) return split_->data.images[i];
    uint64_t stream = fnv1a64(split_->data.ids[i].data(), split_->data.ids[i].size()) ^
                      (0x51ull * static_cast<uint64_t>(epoch));
    Rng rng = Rng::child(seed_, stream);
    return to_tensor_chw(augment(split_->normalized[i], rng, policy_));
  }

 private:
  const PreparedSplit* split_;
  AugmentPolicy policy_;
  uint64_t seed_;
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    out_ = std::filesystem::path(cfg_.output_dir);
  }

  const RunConfig& config() const { return cfg_; }

  int effective_input_size() const {
    if (cfg_.resize_target > 0) return cfg_.resize_target;
    if (cfg_.task_id == 1) return task_definition(1).input_resolution;
    return cfg_.input_size;
  }

  std::filesystem::path split_path() const {
    return out_ / ("task" + std::to_string(cfg_.task_id) + "_split.csv");
  }
  std::filesystem::path checkpoint_path(const std::string& model,
                                        const std::string& domain) const {
    return out_ / checkpoint_filename(cfg_.task_id, domain, model, cfg_.seed);
  }
  std::filesystem::path stage1_path(const std::string& arch, const std::string& domain) const {
    return out_ / ("task" + std::to_string(cfg_.task_id) + "_" + domain + "_" + arch + "_" +
                   std::to_string(cfg_.seed) + "_stage1.ckpt");
  }

  void write_effective_config() const {
    write_text_file(out_ / "effective_config.toml", cfg_.to_toml());
  }

  // ---- split ------------------------------------------------------------------

  std::filesystem::path cmd_split() {
    write_effective_config();
    auto path = split_path();
    if (std::filesystem::exists(path) && !cfg_.force) {
      std::cout << "split exists, skipping: " << path << "\n";
      return path;
    }
    auto records = labeled_records();
    auto assignment = stratified_split(records, cfg_.split_ratios, cfg_.split_seed, cfg_.task_id);
    write_split_csv(path, assignment);
    auto sizes = assignment.sizes();
    std::cout << "split task " << cfg_.task_id << ": train=" << sizes[0] << " val=" << sizes[1]
              << " test=" << sizes[2] << " -> " << path << "\n";
    return path;
  }

  // ---- preprocessing -----------------------------------------------------------

  SpatialConfig spatial_config() const {
    SpatialConfig sc;
    sc.crop_size = cfg_.crop_size;
    sc.resize_target = effective_input_size();
    sc.neutral_offset = static_cast<float>(cfg_.neutral_offset);
    sc.blur_scale = cfg_.blur_scale;
    sc.pad_if_needed = cfg_.pad_if_needed;
    sc.augment = {cfg_.hflip_prob, cfg_.vflip_prob, cfg_.rotation_degrees_max, cfg_.zoom_lo,
                  cfg_.zoom_hi};
    sc.validate();
    return sc;
  }

  FrequencyConfig frequency_config() const {
    FrequencyConfig fc;
    fc.clip_percentile = cfg_.clip_percentile;
    fc.output_size = effective_input_size();
    return fc;
  }

  PreprocessedImage preprocess_one(const ImageRecord& rec, const std::string& domain) const {
    Image raw = load_image(rec.image_path);
    Image cropped = crop_center(raw, cfg_.crop_size, cfg_.pad_if_needed);
    PreprocessedImage out;
    out.image_id = rec.image_id;
    out.domain = domain;
    if (domain == "rgb") {
      SpatialConfig sc = spatial_config();
      Image norm = local_mean_subtract(cropped, sc.blur_scale, sc.neutral_offset);
      out.chw = to_tensor_chw(resize_image(norm, sc.resize_target));
    } else {
      out.chw = to_tensor_chw(frequency_representation(cropped, frequency_config()));
    }
    return out;
  }

  PreparedSplit prepare_split(const std::vector<ImageRecord>& records, Split split,
                              const std::string& domain, bool keep_normalized) const {
    std::vector<const ImageRecord*> sel;
    for (const auto& r : records)
      if (r.has_label(cfg_.task_id) && r.split && *r.split == split) sel.push_back(&r);

    PreparedSplit out;
    out.data.images.resize(sel.size());
    out.data.labels.resize(sel.size());
    out.data.ids.resize(sel.size());
    if (keep_normalized && domain == "rgb") out.normalized.resize(sel.size());

    SpatialConfig sc = spatial_config();
    FrequencyConfig fc = frequency_config();
    std::exception_ptr error;
    std::mutex error_mu;
    detail::parallel_for(sel.size(), [&](size_t i) {
      try {
        const ImageRecord& rec = *sel[i];
        Image raw = load_image(rec.image_path);
        Image cropped = crop_center(raw, sc.crop_size, sc.pad_if_needed);
        if (domain == "rgb") {
          Image norm = resize_image(local_mean_subtract(cropped, sc.blur_scale, sc.neutral_offset),
                                    sc.resize_target);
          if (!out.normalized.empty()) out.normalized[i] = norm;
          out.data.images[i] = to_tensor_chw(norm);
        } else {
          out.data.images[i] = to_tensor_chw(frequency_representation(cropped, fc));
        }
        out.data.labels[i] = rec.label(cfg_.task_id);
        out.data.ids[i] = rec.image_id;
      } catch (...) {
        std::lock_guard<std::mutex> lk(error_mu);
        if (!error) error = std::current_exception();
      }
    });
    if (error) std::rethrow_exception(error);

    if (cfg_.dump_stages && domain == "rgb") dump_stage_images(sel, sc);
    if (cfg_.dump_spectrum && domain == "frequency") dump_spectra(sel);
    return out;
  }

  // ---- train ---------------------------------------------------------------------

  BackboneSpec build_spec(const std::string& arch_str) const {
    BackboneSpec spec;
    spec.architecture_id = arch_from_name(arch_str);
    spec.input_size = effective_input_size();
    spec.unfreeze_fraction = cfg_.unfreeze_fraction;
    if (spec.architecture_id == Arch::patch_transformer) spec.transformer_depth = cfg_.vit_depth;
    if (spec.architecture_id == Arch::retinal_foundation) {
      spec.transformer_depth = cfg_.foundation_depth;
      spec.foundation_checkpoint = foundation_checkpoint_path();
    }
    return spec;
  }

  std::string foundation_checkpoint_path() const {
    std::string path = cfg_.foundation_checkpoint;
    if (path.empty() && cfg_.allow_substitute_encoder)
      path = (out_ / "foundation_encoder.ckpt").string();
    return path;
  }

  void ensure_foundation_encoder() const {
    std::string path = foundation_checkpoint_path();
    if (path.empty() || std::filesystem::exists(path)) return;
    if (!cfg_.allow_substitute_encoder)
      throw ConfigError("foundation encoder checkpoint not found: " + path +
                        " (set model.allow_substitute_encoder = true to generate a substitute)");
    std::cout << "writing substitute foundation encoder: " << path << "\n";
    write_substitute_foundation_encoder(path, cfg_.foundation_depth, effective_input_size(),
                                        cfg_.seed);
  }

  TrainConfig train_config(Stage stage) const {
    TrainConfig tc;
    tc.learning_rate = cfg_.learning_rate;
    tc.weight_decay = cfg_.weight_decay;
    tc.batch_size = cfg_.batch_size;
    tc.max_epochs = cfg_.max_epochs;
    tc.early_stop_patience = cfg_.early_stop_patience;
    tc.stage = stage;
    tc.cutmix_alpha = cfg_.cutmix_alpha;
    if (cfg_.use_cutmix >= 0) tc.use_cutmix = cfg_.use_cutmix == 1;
    tc.seed = cfg_.seed;
    return tc;
  }

  std::vector<std::filesystem::path> cmd_train() {
    require_single_domain("train");
    write_effective_config();
    if (!std::filesystem::exists(split_path()))
      throw DataError("split file not found: " + split_path().string() +
                      " (run the split command first)");
    auto records = labeled_records();
    auto assignment = load_split_csv(split_path(), cfg_.task_id);
    apply_split(records, assignment);

    PreparedSplit train = prepare_split(records, Split::train, cfg_.domain, true);
    PreparedSplit val = prepare_split(records, Split::val, cfg_.domain, false);
    AugmentedSource train_source(train, spatial_config().augment, cfg_.seed);
    DatasetSource plain_source(train.data);
    const BatchSource& source = cfg_.domain == "rgb"
                                    ? static_cast<const BatchSource&>(train_source)
                                    : static_cast<const BatchSource&>(plain_source);

    std::vector<std::filesystem::path> outputs;
    for (const auto& arch : cfg_.architectures) {
      auto final_path = checkpoint_path(arch, cfg_.domain);
      if (std::filesystem::exists(final_path) && !cfg_.force) {
        std::cout << "checkpoint exists, skipping: " << final_path << "\n";
        outputs.push_back(final_path);
        continue;
      }
      std::cout << "training " << arch << " (" << cfg_.domain << ", task " << cfg_.task_id
                << ")\n";
      BackboneSpec spec = build_spec(arch);
      std::shared_ptr<Classifier> model;
      if (spec.architecture_id == Arch::retinal_foundation) {
        ensure_foundation_encoder();
        model = build_classifier(spec, cfg_.seed);
        model->meta().domain = cfg_.domain;
        model->meta().task_id = cfg_.task_id;
        model->meta().split_seed = cfg_.split_seed;
        train_foundation_adapt(*model, source, val.data, train_config(Stage::foundation_adapt));
      } else {
        auto s1_path = stage1_path(arch, cfg_.domain);
        if (std::filesystem::exists(s1_path) && !cfg_.force) {
          std::cout << "resuming from stage-1 checkpoint: " << s1_path << "\n";
          model = load_classifier(s1_path);
        } else {
          model = build_classifier(spec, cfg_.seed);
          model->meta().domain = cfg_.domain;
          model->meta().task_id = cfg_.task_id;
          model->meta().split_seed = cfg_.split_seed;
          train_stage1(*model, source, val.data, train_config(Stage::head_only));
          save_classifier(s1_path, *model);
        }
        train_stage2(*model, source, val.data, train_config(Stage::finetune));
      }
      save_classifier(final_path, *model);
      write_history_json(arch, *model);
      outputs.push_back(final_path);
      std::cout << "  best epoch " << model->meta().best_epoch << ", wrote " << final_path
                << "\n";
    }
    return outputs;
  }

  // ---- fuse -----------------------------------------------------------------------

  std::filesystem::path fusion_path() const { return checkpoint_path("fusion", cfg_.domain); }

  std::filesystem::path feature_cache_path(const std::string& arch, Split split) const {
    return out_ / "features" /
           ("task" + std::to_string(cfg_.task_id) + "_" + cfg_.domain + "_" + arch + "_" +
            split_name(split) + ".feat");
  }

  std::filesystem::path cmd_fuse() {
    require_single_domain("fuse");
    write_effective_config();
    auto fpath = fusion_path();
    if (std::filesystem::exists(fpath) && !cfg_.force) {
      std::cout << "fusion checkpoint exists, skipping: " << fpath << "\n";
      return fpath;
    }
    std::vector<std::string> missing;
    for (const auto& arch : cfg_.architectures)
      if (!std::filesystem::exists(checkpoint_path(arch, cfg_.domain)))
        missing.push_back(checkpoint_path(arch, cfg_.domain).string());
    if (!missing.empty()) {
      std::string msg = "fuse requires all per-model checkpoints; missing:";
      for (const auto& m : missing) msg += " " + m;
      throw DataError(msg);
    }

    auto records = labeled_records();
    auto assignment = load_split_csv(split_path(), cfg_.task_id);
    apply_split(records, assignment);
    PreparedSplit train = prepare_split(records, Split::train, cfg_.domain, false);
    PreparedSplit val = prepare_split(records, Split::val, cfg_.domain, false);

    FusionModel fusion;
    fusion.domain = cfg_.domain;
    fusion.task_id = cfg_.task_id;
    fusion.seed = cfg_.seed;
    std::vector<FeatureMatrix> train_feats, val_feats;
    for (const auto& arch : cfg_.architectures) {
      auto ckpt = checkpoint_path(arch, cfg_.domain);
      auto model = load_classifier(ckpt);
      fusion.sources.push_back(ckpt.string());
      train_feats.push_back(cached_features(*model, arch, Split::train, train.data));
      val_feats.push_back(cached_features(*model, arch, Split::val, val.data));
    }
    for (const auto& fm : train_feats) fusion.stats.push_back(fit_standardizer(fm));

    FeatureMatrix train_x = concat_standardized(train_feats, fusion.stats);
    FeatureMatrix val_x = concat_standardized(val_feats, fusion.stats);
    TrainConfig tc = train_config(Stage::head_only);
    fusion.train_config = tc.to_json();
    fusion.head = train_fusion_head(train_x, train.data.labels, val_x, val.data.labels, tc,
                                    &fusion.history, &fusion.best_epoch);
    save_fusion_model(fpath, fusion);
    std::cout << "fusion (" << cfg_.domain << ", " << train_x.cols << " dims) -> " << fpath
              << "\n";
    return fpath;
  }

  // ---- evaluate ---------------------------------------------------------------------

  EvalReport cmd_evaluate() {
    write_effective_config();
    std::vector<std::string> domains =
        cfg_.domain == "both" ? std::vector<std::string>{"rgb", "frequency"}
                              : std::vector<std::string>{cfg_.domain};
    auto records = labeled_records();
    auto assignment = load_split_csv(split_path(), cfg_.task_id);
    apply_split(records, assignment);

    std::vector<RunKey> declared;
    std::map<RunKey, ScoredSet> predictions;
    double threshold = cfg_.threshold;

    for (const auto& domain : domains) {
      RunConfig dc = cfg_;
      dc.domain = domain;
      Pipeline sub(dc);
      PreparedSplit test = sub.prepare_split(records, Split::test, domain, false);
      PreparedSplit val;
      if (cfg_.threshold_rule == "youden-validation")
        val = sub.prepare_split(records, Split::val, domain, false);

      std::vector<std::string> models = cfg_.architectures;
      models.push_back("fusion");
      std::vector<std::string> missing;
      for (const auto& model_name : models)
        if (!std::filesystem::exists(sub.checkpoint_path(model_name, domain)))
          missing.push_back(sub.checkpoint_path(model_name, domain).string());
      if (!missing.empty()) {
        std::string msg = "evaluate: missing checkpoints for declared rows:";
        for (const auto& m : missing) msg += " " + m;
        throw DataError(msg);
      }

      for (const auto& model_name : models) {
        declared.push_back({cfg_.task_id, domain, model_name});
        ScoredSet scored;
        std::vector<double> scores, val_scores;
        if (model_name == "fusion") {
          FusionModel fusion = load_fusion_model(sub.checkpoint_path("fusion", domain));
          std::vector<std::shared_ptr<Classifier>> sources;
          for (const auto& src : fusion.sources) sources.push_back(load_classifier(src));
          scores = fusion_batch_scores(fusion, sources, test.data);
          if (cfg_.threshold_rule == "youden-validation")
            val_scores = fusion_batch_scores(fusion, sources, val.data);
        } else {
          auto model = load_classifier(sub.checkpoint_path(model_name, domain));
          scores = predict_scores(*model, test.data.images, cfg_.batch_size);
          if (cfg_.threshold_rule == "youden-validation")
            val_scores = predict_scores(*model, val.data.images, cfg_.batch_size);
        }
        for (size_t i = 0; i < test.data.size(); ++i)
          scored.push(test.data.ids[i], scores[i], test.data.labels[i]);
        if (cfg_.threshold_rule == "youden-validation") {
          ScoredSet vs;
          for (size_t i = 0; i < val.data.size(); ++i)
            vs.push(val.data.ids[i], val_scores[i], val.data.labels[i]);
          threshold = youden_threshold(vs);
        }
        predictions[{cfg_.task_id, domain, model_name}] = std::move(scored);
      }
    }

    EvalReport report =
        evaluate_run(predictions, declared, threshold, cfg_.threshold_rule,
                     split_path().filename().string(), cfg_.seed);
    write_text_file(out_ / "eval_report.csv", eval_report_csv(report));
    write_text_file(out_ / "eval_report.txt", eval_report_table(report));
    std::cout << eval_report_table(report);
    return report;
  }

  // ---- explain ----------------------------------------------------------------------

  std::filesystem::path cmd_explain() {
    require_single_domain("explain");
    write_effective_config();
    auto ckpt = checkpoint_path(cfg_.explain_model, cfg_.domain);
    if (!std::filesystem::exists(ckpt))
      throw DataError("explain: checkpoint not found: " + ckpt.string());
    auto model = load_classifier(ckpt);

    auto records = labeled_records();
    auto assignment = load_split_csv(split_path(), cfg_.task_id);
    apply_split(records, assignment);

    std::vector<const ImageRecord*> chosen;
    if (!cfg_.explain_images.empty()) {
      for (const auto& id : cfg_.explain_images) {
        auto it = std::find_if(records.begin(), records.end(),
                               [&](const ImageRecord& r) { return r.image_id == id; });
        if (it == records.end()) throw DataError("explain: image_id not in manifest: " + id);
        chosen.push_back(&*it);
      }
    } else {
      for (const auto& r : records) {
        if (r.split && *r.split == Split::test) chosen.push_back(&r);
        if (static_cast<int>(chosen.size()) >= cfg_.explain_count) break;
      }
    }
    if (chosen.empty()) throw DataError("explain: no images selected");

    auto dir = out_ / "explain";
    std::filesystem::create_directories(dir);
    std::vector<ExplanationPanel> panels;
    for (const auto* rec : chosen) {
      PreprocessedImage input = preprocess_one(*rec, cfg_.domain);
      double score = predict_proba(*model, input);
      int predicted = score >= 0.5 ? 1 : 0;
      Heatmap heat = gradcam(*model, input, predicted);
      Image raw = load_image(rec->image_path);
      Image display =
          resize_image(crop_center(raw, cfg_.crop_size, cfg_.pad_if_needed),
                       effective_input_size());
      panels.push_back(write_explanation_panel(dir, display, heat, cfg_.task_id, predicted, score,
                                               cfg_.overlay_alpha));
    }
    auto report = write_explanation_report(dir, panels);
    std::cout << "explain: " << panels.size() << " panel(s) -> " << report << "\n";
    return dir;
  }

  // ---- synth ------------------------------------------------------------------------

  std::filesystem::path cmd_synth() {
    auto dir = cfg_.synth_dir.empty() ? (out_ / "synth") : std::filesystem::path(cfg_.synth_dir);
    auto manifest = dir / "manifest.csv";
    if (std::filesystem::exists(manifest) && !cfg_.force) {
      std::cout << "synthetic dataset exists, skipping: " << manifest << "\n";
      return manifest;
    }
    SynthOptions opt;
    opt.image_size = cfg_.synth_image_size;
    auto records = make_synthetic_dataset(dir, cfg_.seed, cfg_.synth_n, opt);
    write_text_file(out_ / "effective_config.toml", cfg_.to_toml());
    std::cout << "synth: " << records.size() << " images -> " << manifest << "\n";
    return manifest;
  }

  // ---- helpers ----------------------------------------------------------------------

  std::vector<double> fusion_batch_scores(FusionModel& fusion,
                                          const std::vector<std::shared_ptr<Classifier>>& sources,
                                          const Dataset& data) const {
    std::vector<FeatureMatrix> mats;
    for (auto& model : sources) {
      std::vector<PreprocessedImage> imgs;
      for (size_t i = 0; i < data.size(); ++i)
        imgs.push_back({data.images[i], fusion.domain, data.ids[i]});
      mats.push_back(extract_features(*model, imgs, cfg_.batch_size));
    }
    FeatureMatrix joint = concat_standardized(mats, fusion.stats);
    return fusion_scores(*fusion.head, joint);
  }

 private:
  std::vector<ImageRecord> labeled_records() const {
    if (cfg_.manifest.empty()) throw ConfigError("run.manifest is not set");
    auto records = load_manifest(cfg_.manifest);
    std::vector<ImageRecord> out;
    for (auto& r : records)
      if (r.has_label(cfg_.task_id)) out.push_back(std::move(r));
    if (out.empty())
      throw DataError("manifest has no records labeled for task " + std::to_string(cfg_.task_id));
    return out;
  }

  void require_single_domain(const char* cmd) const {
    if (cfg_.domain != "rgb" && cfg_.domain != "frequency")
      throw ConfigError(std::string(cmd) + " requires run.domain = rgb or frequency");
  }

  void write_history_json(const std::string& arch, const Classifier& model) const {
    nlohmann::json j = {{"model", arch},
                        {"task", cfg_.task_id},
                        {"domain", cfg_.domain},
                        {"seed", cfg_.seed},
                        {"best_epoch", model.meta().best_epoch},
                        {"history", detail::history_to_json(model.meta().history)}};
    auto path = out_ / ("task" + std::to_string(cfg_.task_id) + "_" + cfg_.domain + "_" + arch +
                        "_" + std::to_string(cfg_.seed) + "_history.json");
    write_text_file(path, j.dump(2) + "\n");
  }

  FeatureMatrix cached_features(Classifier& model, const std::string& arch, Split split,
                                const Dataset& data) const {
    auto path = feature_cache_path(arch, split);
    if (std::filesystem::exists(path) && !cfg_.force) {
      FeatureMatrix fm = load_feature_matrix(path);
      if (fm.rows == static_cast<int>(data.size())) return fm;
    }
    std::vector<PreprocessedImage> imgs;
    for (size_t i = 0; i < data.size(); ++i)
      imgs.push_back({data.images[i], cfg_.domain, data.ids[i]});
    FeatureMatrix fm = extract_features(model, imgs, cfg_.batch_size);
    save_feature_matrix(path, fm);
    return fm;
  }

  void dump_stage_images(const std::vector<const ImageRecord*>& sel,
                         const SpatialConfig& sc) const {
    auto dir = out_ / "stages";
    size_t limit = std::min<size_t>(sel.size(), 8);
    for (size_t i = 0; i < limit; ++i) {
      Image raw = load_image(sel[i]->image_path);
      Image cropped = crop_center(raw, sc.crop_size, sc.pad_if_needed);
      Image norm = local_mean_subtract(cropped, sc.blur_scale, sc.neutral_offset);
      save_image_png((dir / (sel[i]->image_id + "_1_crop.png")).string(), cropped);
      save_image_png((dir / (sel[i]->image_id + "_2_norm.png")).string(), norm);
      save_image_png((dir / (sel[i]->image_id + "_3_resized.png")).string(),
                     resize_image(norm, sc.resize_target));
    }
  }

  void dump_spectra(const std::vector<const ImageRecord*>& sel) const {
    auto dir = out_ / "spectra";
    size_t limit = std::min<size_t>(sel.size(), 8);
    for (size_t i = 0; i < limit; ++i) {
      Image raw = load_image(sel[i]->image_path);
      Image cropped = crop_center(raw, cfg_.crop_size, cfg_.pad_if_needed);
      cv::Mat spec = render_spectrum(cropped, cfg_.clip_percentile);
      cv::Mat rgb;
      cv::cvtColor(spec, rgb, cv::COLOR_GRAY2RGB);
      save_image_png((dir / (sel[i]->image_id + "_spectrum.png")).string(), rgb);
    }
  }

  RunConfig cfg_;
  std::filesystem::path out_;
};

}  // namespace uwf
