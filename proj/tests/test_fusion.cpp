#include <catch2/catch_amalgamated.hpp>

#include "uwf/fusion.hpp"

using namespace uwf;

namespace {

FeatureMatrix make_matrix(int rows, int cols, const std::string& source,
                          std::function<float(int, int)> fill) {
  FeatureMatrix fm;
  fm.rows = rows;
  fm.cols = cols;
  fm.source_model = source;
  fm.domain = "rgb";
  fm.layer = "test";
  fm.data.resize(static_cast<size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    fm.image_ids.push_back("img" + std::to_string(r));
    for (int c = 0; c < cols; ++c) fm.at(r, c) = fill(r, c);
  }
  return fm;
}

std::vector<PreprocessedImage> random_images(Rng& rng, int n, int size,
                                             const std::string& domain) {
  std::vector<PreprocessedImage> out;
  for (int i = 0; i < n; ++i) {
    Tensor t = Tensor::randn({3, size, size}, rng, 0.3f);
    for (int64_t k = 0; k < t.numel(); ++k) t[k] = std::clamp(t[k] + 0.5f, 0.0f, 1.0f);
    out.push_back({std::move(t), domain, "img" + std::to_string(i)});
  }
  return out;
}

}  // namespace

TEST_CASE("fit_standardizer computes population statistics") {
  auto fm = make_matrix(3, 1, "m", [](int r, int) { return static_cast<float>(r + 1); });
  auto stats = fit_standardizer(fm);
  REQUIRE(stats.mean[0] == Catch::Approx(2.0));
  REQUIRE(stats.std[0] == Catch::Approx(std::sqrt(2.0 / 3.0)));
  REQUIRE(stats.degenerate_columns.empty());
  REQUIRE(stats.convention == "population");
}

TEST_CASE("fit_standardizer flags and floors constant columns") {
  auto fm = make_matrix(5, 2, "m", [](int r, int c) { return c == 0 ? 7.5f : static_cast<float>(r); });
  auto stats = fit_standardizer(fm, 1e-6);
  REQUIRE(stats.degenerate_columns == std::vector<int>{0});
  REQUIRE(stats.std[0] == 1e-6);
  REQUIRE(stats.std[1] > 1e-3);

  auto single = make_matrix(1, 2, "m", [](int, int) { return 1.0f; });
  REQUIRE_THROWS_AS(fit_standardizer(single), DataError);
}

TEST_CASE("standardized training rows have mean 0 and std 1") {
  Rng rng(19);
  auto fm = make_matrix(64, 7, "m", [&](int, int) { return static_cast<float>(rng.normal(3.0, 2.5)); });
  auto stats = fit_standardizer(fm);
  auto z = apply_standardizer(fm, stats);
  for (int c = 0; c < z.cols; ++c) {
    double mean = 0.0, var = 0.0;
    for (int r = 0; r < z.rows; ++r) mean += z.at(r, c);
    mean /= z.rows;
    for (int r = 0; r < z.rows; ++r) var += (z.at(r, c) - mean) * (z.at(r, c) - mean);
    var /= z.rows;
    REQUIRE(mean == Catch::Approx(0.0).margin(1e-6));
    REQUIRE(std::sqrt(var) == Catch::Approx(1.0).margin(1e-5));
  }
}

TEST_CASE("standardizer fitted on train leaves held-out columns off-center") {
  Rng rng(20);
  auto train = make_matrix(40, 3, "m", [&](int, int) { return static_cast<float>(rng.normal(0.0, 1.0)); });
  auto test = make_matrix(40, 3, "m", [&](int, int) { return static_cast<float>(rng.normal(2.0, 1.0)); });
  auto stats = fit_standardizer(train);
  auto z = apply_standardizer(test, stats);
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (int r = 0; r < z.rows; ++r) mean += z.at(r, c);
    mean /= z.rows;
    REQUIRE(std::abs(mean) > 0.5);  // shifted population stays shifted
  }
}

TEST_CASE("concat_standardized stacks blocks in order and checks row identity") {
  auto a = make_matrix(4, 2, "a", [](int r, int c) { return static_cast<float>(r * 2 + c); });
  auto b = make_matrix(4, 3, "b", [](int r, int c) { return static_cast<float>(10 + r + c); });
  auto sa = fit_standardizer(a);
  auto sb = fit_standardizer(b);
  auto joint = concat_standardized({a, b}, {sa, sb});
  REQUIRE(joint.cols == 5);
  REQUIRE(joint.rows == 4);
  // block slices reproduce the standardized inputs exactly
  auto za = apply_standardizer(a, sa);
  auto zb = apply_standardizer(b, sb);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 2; ++c) REQUIRE(joint.at(r, c) == za.at(r, c));
    for (int c = 0; c < 3; ++c) REQUIRE(joint.at(r, 2 + c) == zb.at(r, c));
  }

  auto shuffled = b;
  std::swap(shuffled.image_ids[0], shuffled.image_ids[1]);
  REQUIRE_THROWS_WITH(concat_standardized({a, shuffled}, {sa, sb}),
                      Catch::Matchers::ContainsSubstring("img"));
}

TEST_CASE("the four backbone widths concatenate to 3584") {
  Rng rng(5);
  auto dir = std::filesystem::temp_directory_path() / "uwf_fusion";
  std::filesystem::create_directories(dir);
  auto enc = dir / "enc16.ckpt";
  write_substitute_foundation_encoder(enc, 1, 32, 3);

  std::vector<std::shared_ptr<Classifier>> models;
  for (Arch arch : {Arch::lightweight_cnn, Arch::residual_cnn, Arch::patch_transformer,
                    Arch::retinal_foundation}) {
    BackboneSpec spec;
    spec.architecture_id = arch;
    spec.input_size = 32;
    if (arch == Arch::patch_transformer) spec.transformer_depth = 1;
    if (arch == Arch::retinal_foundation) spec.foundation_checkpoint = enc.string();
    models.push_back(build_classifier(spec, 9));
  }
  auto images = random_images(rng, 3, 32, "");
  std::vector<FeatureMatrix> mats;
  std::vector<StandardizerStats> stats;
  std::vector<int> expected = {1280, 512, 768, 1024};
  for (size_t i = 0; i < models.size(); ++i) {
    mats.push_back(extract_features(*models[i], images, 2));
    REQUIRE(mats.back().cols == expected[i]);
    REQUIRE(mats.back().all_finite());
    stats.push_back(fit_standardizer(mats.back()));
  }
  auto joint = concat_standardized(mats, stats);
  REQUIRE(joint.cols == 3584);
}

TEST_CASE("extract_features is deterministic and row-aligned") {
  Rng rng(6);
  BackboneSpec spec;
  spec.architecture_id = Arch::residual_cnn;
  spec.input_size = 32;
  auto model = build_classifier(spec, 2);
  auto images = random_images(rng, 4, 32, "");
  images.push_back(images[1]);  // duplicate row
  images.back().image_id = "img_dup";
  auto fm = extract_features(*model, images, 3);
  REQUIRE(fm.rows == 5);
  REQUIRE(fm.cols == 512);
  for (int c = 0; c < fm.cols; ++c) REQUIRE(fm.at(4, c) == fm.at(1, c));
  auto fm2 = extract_features(*model, images, 5);
  REQUIRE(fm.data == fm2.data);  // per-sample evaluation: exact batch invariance

  auto empty = extract_features(*model, {}, 4);
  REQUIRE(empty.rows == 0);
  REQUIRE(empty.cols == 512);

  model->meta().domain = "rgb";
  auto bad = random_images(rng, 1, 32, "frequency");
  REQUIRE_THROWS_WITH(extract_features(*model, bad, 1),
                      Catch::Matchers::ContainsSubstring("domain"));
}

TEST_CASE("fusion head solves XOR features where a linear model cannot") {
  Rng rng(33);
  auto gen = [&](int n, const char* prefix) {
    FeatureMatrix x;
    x.rows = n;
    x.cols = 2;
    x.data.resize(static_cast<size_t>(n) * 2);
    std::vector<int> y;
    for (int i = 0; i < n; ++i) {
      int a = static_cast<int>(rng.below(2)), b = static_cast<int>(rng.below(2));
      x.at(i, 0) = a + static_cast<float>(rng.normal(0.0, 0.08));
      x.at(i, 1) = b + static_cast<float>(rng.normal(0.0, 0.08));
      y.push_back(a ^ b);
      x.image_ids.push_back(std::string(prefix) + std::to_string(i));
    }
    return std::make_pair(x, y);
  };
  auto [train_x, train_y] = gen(96, "t");
  auto [val_x, val_y] = gen(48, "v");
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.max_epochs = 120;
  cfg.early_stop_patience = 120;
  cfg.batch_size = 16;
  cfg.seed = 7;
  std::vector<EpochRecord> history;
  auto head = train_fusion_head(train_x, train_y, val_x, val_y, cfg, &history);
  double best = 0.0;
  for (const auto& r : history) best = std::max(best, r.val_metric);
  REQUIRE(best > 0.9);
}

TEST_CASE("fusion head on a constant column stays at chance") {
  FeatureMatrix train_x, val_x;
  train_x.rows = 32;
  train_x.cols = 1;
  train_x.data.assign(32, 1.0f);
  std::vector<int> train_y;
  for (int i = 0; i < 32; ++i) {
    train_x.image_ids.push_back("t" + std::to_string(i));
    train_y.push_back(i % 2);
  }
  val_x.rows = 16;
  val_x.cols = 1;
  val_x.data.assign(16, 1.0f);
  std::vector<int> val_y;
  for (int i = 0; i < 16; ++i) {
    val_x.image_ids.push_back("v" + std::to_string(i));
    val_y.push_back(i % 2);
  }
  TrainConfig cfg;
  cfg.max_epochs = 10;
  cfg.batch_size = 8;
  std::vector<EpochRecord> history;
  train_fusion_head(train_x, train_y, val_x, val_y, cfg, &history);
  for (const auto& r : history) REQUIRE(r.val_metric == Catch::Approx(0.5).margin(1e-9));
}

TEST_CASE("fusion head training is deterministic in the seed") {
  Rng rng(44);
  auto x = make_matrix(24, 4, "m", [&](int, int) { return static_cast<float>(rng.normal()); });
  std::vector<int> y;
  for (int i = 0; i < 24; ++i) y.push_back(i % 2);
  TrainConfig cfg;
  cfg.max_epochs = 5;
  cfg.batch_size = 8;
  cfg.seed = 123;
  auto h1 = train_fusion_head(x, y, x, y, cfg);
  auto h2 = train_fusion_head(x, y, x, y, cfg);
  REQUIRE(nn::params_hash(h1->params()) == nn::params_hash(h2->params()));
}

TEST_CASE("fusion_predict equals the offline feature-matrix path") {
  Rng rng(55);
  auto dir = std::filesystem::temp_directory_path() / "uwf_fusion";
  std::filesystem::create_directories(dir);
  auto enc = dir / "enc_pred.ckpt";
  write_substitute_foundation_encoder(enc, 1, 32, 5);

  std::vector<std::shared_ptr<Classifier>> sources;
  for (Arch arch : {Arch::lightweight_cnn, Arch::residual_cnn, Arch::patch_transformer,
                    Arch::retinal_foundation}) {
    BackboneSpec spec;
    spec.architecture_id = arch;
    spec.input_size = 32;
    if (arch == Arch::patch_transformer) spec.transformer_depth = 1;
    if (arch == Arch::retinal_foundation) spec.foundation_checkpoint = enc.string();
    auto m = build_classifier(spec, 11);
    m->meta().domain = "rgb";
    sources.push_back(m);
  }

  auto fit_images = random_images(rng, 12, 32, "rgb");
  FusionModel fusion;
  fusion.domain = "rgb";
  fusion.task_id = 1;
  fusion.seed = 3;
  std::vector<FeatureMatrix> mats;
  for (auto& m : sources) {
    mats.push_back(extract_features(*m, fit_images, 4));
    fusion.stats.push_back(fit_standardizer(mats.back()));
    fusion.sources.push_back(mats.back().source_model);
  }
  fusion.head = std::make_shared<FusionHead>(3584, 3);

  auto probe_images = random_images(rng, 5, 32, "rgb");
  // offline path: batch feature matrices -> standardize -> concat -> head
  std::vector<FeatureMatrix> probe_mats;
  for (auto& m : sources) probe_mats.push_back(extract_features(*m, probe_images, 5));
  auto joint = concat_standardized(probe_mats, fusion.stats);
  auto offline = fusion_scores(*fusion.head, joint);
  for (size_t i = 0; i < probe_images.size(); ++i) {
    double online = fusion_predict(fusion, sources, probe_images[i]);
    REQUIRE(std::abs(online - offline[i]) < 1e-6);
    REQUIRE(online >= 0.0);
    REQUIRE(online <= 1.0);
    REQUIRE(fusion_predict(fusion, sources, probe_images[i]) == Catch::Approx(online));
  }

  // feature extraction batch size must not matter
  for (auto& m : sources) {
    auto big = extract_features(*m, probe_images, 5);
    auto small = extract_features(*m, probe_images, 1);
    REQUIRE(big.data == small.data);
  }
}

TEST_CASE("fusion model checkpoint round trip") {
  Rng rng(66);
  auto x = make_matrix(20, 3, "m", [&](int, int) { return static_cast<float>(rng.normal()); });
  std::vector<int> y;
  for (int i = 0; i < 20; ++i) y.push_back(i % 2);
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.batch_size = 8;
  FusionModel fusion;
  fusion.sources = {"a.ckpt", "b.ckpt"};
  fusion.stats.push_back(fit_standardizer(x));
  fusion.domain = "frequency";
  fusion.task_id = 2;
  fusion.seed = cfg.seed;
  fusion.head = train_fusion_head(x, y, x, y, cfg, &fusion.history, &fusion.best_epoch);
  fusion.train_config = cfg.to_json();

  auto path = std::filesystem::temp_directory_path() / "uwf_fusion" / "fusion.ckpt";
  save_fusion_model(path, fusion);
  auto loaded = load_fusion_model(path);
  REQUIRE(loaded.sources == fusion.sources);
  REQUIRE(loaded.domain == "frequency");
  REQUIRE(loaded.task_id == 2);
  REQUIRE(loaded.stats.size() == 1);
  REQUIRE(loaded.stats[0].mean == fusion.stats[0].mean);
  REQUIRE(loaded.stats[0].std == fusion.stats[0].std);
  REQUIRE(nn::params_hash(loaded.head->params()) == nn::params_hash(fusion.head->params()));
  REQUIRE(loaded.history.size() == fusion.history.size());
}

TEST_CASE("feature matrix file round trip preserves layout and metadata") {
  Rng rng(77);
  auto fm = make_matrix(9, 5, "residual_cnn", [&](int, int) { return static_cast<float>(rng.normal()); });
  fm.domain = "frequency";
  fm.layer = "layer4.1.relu.pooled";
  auto path = std::filesystem::temp_directory_path() / "uwf_fusion" / "mat.feat";
  save_feature_matrix(path, fm);
  auto loaded = load_feature_matrix(path);
  REQUIRE(loaded.rows == fm.rows);
  REQUIRE(loaded.cols == fm.cols);
  REQUIRE(loaded.source_model == fm.source_model);
  REQUIRE(loaded.domain == fm.domain);
  REQUIRE(loaded.layer == fm.layer);
  REQUIRE(loaded.image_ids == fm.image_ids);
  REQUIRE(loaded.data == fm.data);
  REQUIRE_THROWS_AS(load_feature_matrix("/nonexistent.feat"), DataError);
}
