#include <catch2/catch_amalgamated.hpp>

#include "uwf/model_io.hpp"

using namespace uwf;

namespace {

BackboneSpec resnet_spec(int input = 32) {
  BackboneSpec s;
  s.architecture_id = Arch::residual_cnn;
  s.input_size = input;
  return s;
}

Tensor class_image(Rng& rng, int size, int label) {
  float base = label == 1 ? 0.8f : 0.2f;
  Tensor t({3, size, size});
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = std::clamp(base + static_cast<float>(rng.normal(0.0, 0.05)), 0.0f, 1.0f);
  return t;
}

Dataset two_tone_dataset(uint64_t seed, int n, int size) {
  Rng rng(seed);
  Dataset d;
  for (int i = 0; i < n; ++i) {
    int label = i % 2;
    d.images.push_back(class_image(rng, size, label));
    d.labels.push_back(label);
    d.ids.push_back("img" + std::to_string(i));
  }
  return d;
}

uint64_t hash_params(const std::vector<nn::Parameter*>& params) { return nn::params_hash(params); }

}  // namespace

TEST_CASE("classifier probabilities sum to one on random input") {
  auto model = build_classifier(resnet_spec(), 1);
  Rng rng(5);
  Tensor x = Tensor::randn({3, 3, 32, 32}, rng, 0.5f);
  nn::Ctx ctx;
  auto xv = ag::make_var(std::move(x), false);
  auto out = model->forward(xv, ctx);
  for (int i = 0; i < 3; ++i) {
    double sum = out.probs->value.at(i, 0) + out.probs->value.at(i, 1);
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("retinal_foundation without an encoder checkpoint is rejected") {
  BackboneSpec spec;
  spec.architecture_id = Arch::retinal_foundation;
  spec.input_size = 32;
  REQUIRE_THROWS_WITH(build_classifier(spec, 1),
                      Catch::Matchers::ContainsSubstring("encoder checkpoint"));
}

TEST_CASE("foundation encoder checkpoint round trip and input-size check") {
  auto dir = std::filesystem::temp_directory_path() / "uwf_model_core";
  std::filesystem::create_directories(dir);
  auto enc_path = dir / "encoder32.ckpt";
  write_substitute_foundation_encoder(enc_path, 2, 32, 7);

  BackboneSpec spec;
  spec.architecture_id = Arch::retinal_foundation;
  spec.input_size = 32;
  spec.foundation_checkpoint = enc_path.string();
  auto model = build_classifier(spec, 7);
  REQUIRE(model->spec().transformer_depth == 2);
  REQUIRE(model->spec().feature_dim == 1024);
  REQUIRE(model->meta().pretrained_origin.rfind("encoder:", 0) == 0);

  spec.input_size = 64;
  REQUIRE_THROWS_WITH(build_classifier(spec, 7),
                      Catch::Matchers::ContainsSubstring("input_size"));
}

TEST_CASE("builds with the same seed share initial head weights") {
  auto a = build_classifier(resnet_spec(), 42);
  auto b = build_classifier(resnet_spec(), 42);
  REQUIRE(hash_params(a->head_params()) == hash_params(b->head_params()));
  REQUIRE(hash_params(a->backbone_params()) == hash_params(b->backbone_params()));
  auto c = build_classifier(resnet_spec(), 43);
  REQUIRE(hash_params(a->head_params()) != hash_params(c->head_params()));
}

TEST_CASE("stage 1 trains the head and leaves the backbone bit-identical") {
  auto model = build_classifier(resnet_spec(), 3);
  Dataset train = two_tone_dataset(1, 12, 32);
  Dataset val = two_tone_dataset(2, 6, 32);
  DatasetSource source(train);
  uint64_t backbone_before = hash_params(model->backbone_params());
  uint64_t head_before = hash_params(model->head_params());

  TrainConfig cfg;
  cfg.stage = Stage::head_only;
  cfg.max_epochs = 3;
  cfg.early_stop_patience = 10;
  cfg.batch_size = 4;
  train_stage1(*model, source, val, cfg);

  REQUIRE(hash_params(model->backbone_params()) == backbone_before);
  REQUIRE(hash_params(model->head_params()) != head_before);
  REQUIRE(model->meta().completed_stages == std::vector<std::string>{"head_only"});
  REQUIRE(model->meta().history.size() == 3);
}

TEST_CASE("stage 1 reaches AUROC 1.0 on a separable set") {
  auto model = build_classifier(resnet_spec(), 4);
  Dataset train = two_tone_dataset(10, 16, 32);
  Dataset val = two_tone_dataset(11, 8, 32);
  DatasetSource source(train);
  TrainConfig cfg;
  cfg.stage = Stage::head_only;
  cfg.learning_rate = 1e-2;
  cfg.max_epochs = 40;
  cfg.early_stop_patience = 40;
  cfg.batch_size = 8;
  auto history = train_stage1(*model, source, val, cfg);
  double best = 0.0;
  for (const auto& r : history) best = std::max(best, r.val_metric);
  REQUIRE(best == 1.0);
}

TEST_CASE("stage 2 releases the deepest quarter of backbone parameters") {
  auto model = build_classifier(resnet_spec(), 5);
  model->set_trainable_finetune(0.25);
  int64_t total = model->backbone_param_count();
  int64_t trainable = model->trainable_backbone_count();
  int64_t largest = 0;
  for (auto* p : model->backbone_params()) largest = std::max(largest, p->numel());
  REQUIRE(std::abs(trainable - static_cast<int64_t>(0.25 * total)) <= largest);

  // the released set is a suffix in registration (shallow-to-deep) order
  bool seen_trainable = false;
  for (auto* p : model->backbone_params()) {
    if (p->trainable) seen_trainable = true;
    else REQUIRE_FALSE(seen_trainable);
  }

  model->set_trainable_finetune(0.0);
  REQUIRE(model->trainable_backbone_count() == 0);
  model->set_trainable_finetune(1.0);
  REQUIRE(model->trainable_backbone_count() == total);
}

TEST_CASE("stage 2 keeps shallow parameters bit-identical while deep ones move") {
  auto model = build_classifier(resnet_spec(), 6);
  Dataset train = two_tone_dataset(20, 12, 32);
  Dataset val = two_tone_dataset(21, 6, 32);
  DatasetSource source(train);

  TrainConfig cfg1;
  cfg1.stage = Stage::head_only;
  cfg1.max_epochs = 2;
  cfg1.batch_size = 4;
  train_stage1(*model, source, val, cfg1);

  model->set_trainable_finetune(0.25);
  std::vector<nn::Parameter*> shallow, deep;
  for (auto* p : model->backbone_params()) (p->trainable ? deep : shallow).push_back(p);
  uint64_t shallow_before = hash_params(shallow);
  uint64_t deep_before = hash_params(deep);

  TrainConfig cfg2;
  cfg2.stage = Stage::finetune;
  cfg2.max_epochs = 2;
  cfg2.batch_size = 4;
  cfg2.learning_rate = 1e-3;
  train_stage2(*model, source, val, cfg2);

  std::vector<nn::Parameter*> shallow_after, deep_after;
  for (auto* p : model->backbone_params()) (p->trainable ? deep_after : shallow_after).push_back(p);
  REQUIRE(hash_params(shallow_after) == shallow_before);
  REQUIRE(hash_params(deep_after) != deep_before);
}

TEST_CASE("stage 2 requires a completed stage 1") {
  auto model = build_classifier(resnet_spec(), 7);
  Dataset train = two_tone_dataset(30, 8, 32);
  Dataset val = two_tone_dataset(31, 6, 32);
  DatasetSource source(train);
  TrainConfig cfg;
  cfg.stage = Stage::finetune;
  REQUIRE_THROWS_AS(train_stage2(*model, source, val, cfg), TrainError);
}

TEST_CASE("training rejects empty data and single-class validation") {
  auto model = build_classifier(resnet_spec(), 8);
  Dataset empty;
  Dataset val = two_tone_dataset(40, 6, 32);
  DatasetSource empty_source(empty);
  TrainConfig cfg;
  cfg.stage = Stage::head_only;
  REQUIRE_THROWS_AS(train_stage1(*model, empty_source, val, cfg), TrainError);

  Dataset train = two_tone_dataset(41, 8, 32);
  DatasetSource source(train);
  Dataset single;
  single.images.push_back(class_image(*(new Rng(1)), 32, 1));
  single.labels.push_back(1);
  single.ids.push_back("only");
  REQUIRE_THROWS_WITH(train_stage1(*model, source, single, cfg),
                      Catch::Matchers::ContainsSubstring("single class"));
}

TEST_CASE("early stopper follows the patience arithmetic") {
  EarlyStopper stopper(2);
  REQUIRE(stopper.observe(0.6));
  REQUIRE_FALSE(stopper.should_stop());
  REQUIRE(stopper.observe(0.9));
  REQUIRE_FALSE(stopper.should_stop());
  REQUIRE_FALSE(stopper.observe(0.85));
  REQUIRE_FALSE(stopper.should_stop());
  REQUIRE_FALSE(stopper.observe(0.88));
  REQUIRE(stopper.should_stop());
  REQUIRE(stopper.best_epoch() == 2);
  REQUIRE(stopper.best_metric() == 0.9);
  REQUIRE_THROWS_AS(EarlyStopper(0), ConfigError);
}

TEST_CASE("scripted metric sequence stops at epoch 4 and restores epoch-2 weights") {
  auto model = build_classifier(resnet_spec(), 9);
  Dataset train = two_tone_dataset(50, 8, 32);
  Dataset val = two_tone_dataset(51, 6, 32);
  DatasetSource source(train);

  const std::vector<double> scripted = {0.6, 0.9, 0.85, 0.88};
  std::vector<uint64_t> hash_at_epoch;
  TrainHooks hooks;
  hooks.val_metric = [&](int epoch, Classifier& m) {
    hash_at_epoch.push_back(hash_params(m.all_params()));
    return scripted[static_cast<size_t>(epoch - 1)];
  };

  TrainConfig cfg;
  cfg.stage = Stage::head_only;
  cfg.max_epochs = 10;
  cfg.early_stop_patience = 2;
  cfg.batch_size = 4;
  auto history = train_stage1(*model, source, val, cfg, hooks);

  REQUIRE(history.size() == 4);  // stopped after epoch 4
  REQUIRE(model->meta().best_epoch == 2);
  REQUIRE(hash_params(model->all_params()) == hash_at_epoch[1]);  // epoch-2 weights
}

TEST_CASE("cross entropy closed-form values") {
  Tensor exact({1, 2}, {0.0f, 1.0f});
  Tensor label({1, 2}, {0.0f, 1.0f});
  REQUIRE(cross_entropy(exact, label) == Catch::Approx(0.0).margin(1e-9));

  Tensor uniform({1, 2}, {0.5f, 0.5f});
  REQUIRE(cross_entropy(uniform, label) == Catch::Approx(std::log(2.0)).margin(1e-7));

  Tensor pred({1, 2}, {0.6f, 0.4f});
  Tensor soft({1, 2}, {0.75f, 0.25f});
  double expected = -(0.75 * std::log(0.6) + 0.25 * std::log(0.4));
  REQUIRE(cross_entropy(pred, soft) == Catch::Approx(expected).epsilon(1e-6));
}

TEST_CASE("head gradient matches double-precision finite differences to 1e-4") {
  Rng rng(2024);
  const int m = 4, d = 8, c = 2;
  Tensor f = Tensor::randn({m, d}, rng);
  Tensor w = Tensor::randn({c, d}, rng, 0.5f);
  Tensor b = Tensor::randn({c}, rng, 0.1f);
  Tensor y({m, c});
  for (int i = 0; i < m; ++i) {
    y.at(i, i % 2) = 0.75f;
    y.at(i, 1 - i % 2) = 0.25f;
  }

  auto xv = ag::make_var(f, false);
  auto wv = ag::make_var(w, true);
  auto bv = ag::make_var(b, true);
  auto loss = ag::cross_entropy_probs(ag::softmax_rows(ag::linear(xv, wv, bv)), y);
  ag::backward(loss);

  // independent double-precision forward for the finite differences
  auto loss_double = [&](const std::vector<double>& wd, const std::vector<double>& bd) {
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
      std::vector<double> logits(c, 0.0);
      for (int k = 0; k < c; ++k) {
        logits[static_cast<size_t>(k)] = bd[static_cast<size_t>(k)];
        for (int j = 0; j < d; ++j)
          logits[static_cast<size_t>(k)] += static_cast<double>(f.at(i, j)) *
                                            wd[static_cast<size_t>(k * d + j)];
      }
      double mx = std::max(logits[0], logits[1]);
      double z = std::exp(logits[0] - mx) + std::exp(logits[1] - mx);
      for (int k = 0; k < c; ++k) {
        double p = std::exp(logits[static_cast<size_t>(k)] - mx) / z;
        total -= static_cast<double>(y.at(i, k)) * std::log(p + 1e-12);
      }
    }
    return total / m;
  };
  std::vector<double> wd(w.data(), w.data() + w.numel());
  std::vector<double> bd(b.data(), b.data() + b.numel());
  const double h = 1e-6;
  for (int64_t i = 0; i < w.numel(); ++i) {
    std::vector<double> wp = wd, wm = wd;
    wp[static_cast<size_t>(i)] += h;
    wm[static_cast<size_t>(i)] -= h;
    double fd = (loss_double(wp, bd) - loss_double(wm, bd)) / (2.0 * h);
    double an = wv->grad[i];
    if (std::abs(fd) > 1e-3)
      REQUIRE(std::abs(an - fd) / std::abs(fd) < 1e-4);
    else
      REQUIRE(std::abs(an - fd) < 1e-5);
  }
}

TEST_CASE("cutmix boundary lambdas are identity and full replacement") {
  Rng data_rng(1);
  Tensor images({4, 1, 8, 8});
  for (int i = 0; i < 4; ++i)
    for (int p = 0; p < 64; ++p) images[i * 64 + p] = static_cast<float>(i);
  Tensor labels({4, 2});
  for (int i = 0; i < 4; ++i) {
    labels.at(i, 0) = i % 2 == 0 ? 1.0f : 0.0f;
    labels.at(i, 1) = i % 2 == 0 ? 0.0f : 1.0f;
  }

  Rng rng1(7);
  auto identity = cutmix_with_lambda(images, labels, 1.0, rng1);
  REQUIRE(identity.lambda_adjusted == 1.0);
  REQUIRE(identity.images.content_hash() == images.content_hash());
  REQUIRE(identity.labels.content_hash() == labels.content_hash());

  Rng rng2(8);
  auto replaced = cutmix_with_lambda(images, labels, 0.0, rng2);
  REQUIRE(replaced.lambda_adjusted == 0.0);
  for (int i = 0; i < 4; ++i) {
    int j = replaced.partner[static_cast<size_t>(i)];
    REQUIRE(replaced.images[i * 64] == static_cast<float>(j));
    REQUIRE(replaced.labels.at(i, 0) == labels.at(j, 0));
    REQUIRE(replaced.labels.at(i, 1) == labels.at(j, 1));
  }
}

TEST_CASE("cutmix 16x16 box on a 32x32 image mixes labels 0.75 / 0.25") {
  Tensor images({2, 1, 32, 32});
  for (int i = 0; i < 2; ++i)
    for (int p = 0; p < 1024; ++p) images[i * 1024 + p] = static_cast<float>(i + 1);
  Tensor labels({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
  // lambda = 0.75 -> cut = 0.5 -> a 16x16 box
  for (uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(seed);
    auto out = cutmix_with_lambda(images, labels, 0.75, rng);
    REQUIRE(out.box.w == 16);
    REQUIRE(out.box.h == 16);
    REQUIRE(out.lambda_adjusted == Catch::Approx(0.75));
    for (int i = 0; i < 2; ++i) {
      int j = out.partner[static_cast<size_t>(i)];
      if (j == i) continue;
      int pasted = 0;
      for (int p = 0; p < 1024; ++p)
        if (out.images[i * 1024 + p] == static_cast<float>(j + 1)) ++pasted;
      REQUIRE(pasted == 256);
      REQUIRE(out.labels.at(i, i == 0 ? 0 : 1) == Catch::Approx(0.75));
      REQUIRE(out.labels.at(i, i == 0 ? 1 : 0) == Catch::Approx(0.25));
    }
  }
}

TEST_CASE("cutmix label weights equal realized pixel-area fractions exactly") {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    int B = 2 + static_cast<int>(rng.below(5));
    int H = 4 + static_cast<int>(rng.below(29));
    int W = 4 + static_cast<int>(rng.below(29));
    Tensor images({B, 1, H, W});
    for (int i = 0; i < B; ++i)
      for (int p = 0; p < H * W; ++p)
        images[static_cast<int64_t>(i) * H * W + p] = static_cast<float>(i + 1);
    Tensor labels({B, 2});
    for (int i = 0; i < B; ++i) {
      labels.at(i, 0) = i % 2 == 0 ? 1.0f : 0.0f;
      labels.at(i, 1) = 1.0f - labels.at(i, 0);
    }
    auto out = cutmix(images, labels, 1.0, rng);
    double expected_area = 1.0 - out.lambda_adjusted;
    REQUIRE(static_cast<double>(out.box.w) * out.box.h / (static_cast<double>(H) * W) ==
            Catch::Approx(expected_area).margin(1e-12));
    for (int i = 0; i < B; ++i) {
      int j = out.partner[static_cast<size_t>(i)];
      if (j == i) continue;
      int pasted = 0;
      for (int p = 0; p < H * W; ++p)
        if (out.images[static_cast<int64_t>(i) * H * W + p] == static_cast<float>(j + 1)) ++pasted;
      REQUIRE(pasted == out.box.w * out.box.h);
      float lam = static_cast<float>(out.lambda_adjusted);
      REQUIRE(out.labels.at(i, 0) == lam * labels.at(i, 0) + (1.0f - lam) * labels.at(j, 0));
    }
  }
  Tensor tiny({1, 1, 4, 4});
  Tensor tiny_labels({1, 2}, {1.0f, 0.0f});
  Rng r2(1);
  REQUIRE_THROWS_AS(cutmix_with_lambda(tiny, tiny_labels, 0.5, r2), std::invalid_argument);
}

TEST_CASE("prediction is deterministic, in range, and batch-size invariant") {
  auto model = build_classifier(resnet_spec(), 12);
  Rng rng(3);
  std::vector<Tensor> images;
  for (int i = 0; i < 5; ++i) images.push_back(Tensor::randn({3, 32, 32}, rng, 0.4f));

  auto batched = predict_scores(*model, images, 5);
  auto again = predict_scores(*model, images, 5);
  REQUIRE(batched == again);
  for (double s : batched) {
    REQUIRE(s >= 0.0);
    REQUIRE(s <= 1.0);
  }
  for (size_t i = 0; i < images.size(); ++i) {
    auto single = predict_scores(*model, {images[i]}, 1);
    REQUIRE(std::abs(single[0] - batched[i]) < 1e-6);
  }
}

TEST_CASE("predict_proba rejects a domain mismatch") {
  auto model = build_classifier(resnet_spec(), 13);
  model->meta().domain = "rgb";
  Rng rng(4);
  PreprocessedImage img{Tensor::randn({3, 32, 32}, rng, 0.3f), "frequency", "spec1"};
  REQUIRE_THROWS_WITH(predict_proba(*model, img),
                      Catch::Matchers::ContainsSubstring("domain mismatch"));
  img.domain = "rgb";
  double p = predict_proba(*model, img);
  REQUIRE(p >= 0.0);
  REQUIRE(p <= 1.0);
}

TEST_CASE("classifier checkpoint round trip preserves weights, meta and predictions") {
  auto model = build_classifier(resnet_spec(), 14);
  Dataset train = two_tone_dataset(60, 8, 32);
  Dataset val = two_tone_dataset(61, 6, 32);
  DatasetSource source(train);
  TrainConfig cfg;
  cfg.stage = Stage::head_only;
  cfg.max_epochs = 2;
  cfg.batch_size = 4;
  model->meta().domain = "rgb";
  model->meta().task_id = 1;
  model->meta().split_seed = 99;
  train_stage1(*model, source, val, cfg);

  auto path = std::filesystem::temp_directory_path() / "uwf_model_core" / "roundtrip.ckpt";
  save_classifier(path, *model);
  auto loaded = load_classifier(path);
  REQUIRE(hash_params(loaded->all_params()) == hash_params(model->all_params()));
  REQUIRE(loaded->meta().domain == "rgb");
  REQUIRE(loaded->meta().task_id == 1);
  REQUIRE(loaded->meta().split_seed == 99);
  REQUIRE(loaded->meta().history.size() == model->meta().history.size());
  REQUIRE(loaded->meta().completed_stages == model->meta().completed_stages);

  Rng rng(6);
  Tensor probe = Tensor::randn({3, 32, 32}, rng, 0.4f);
  REQUIRE(predict_scores(*loaded, {probe})[0] ==
          Catch::Approx(predict_scores(*model, {probe})[0]).margin(1e-9));

  REQUIRE_THROWS_AS(load_classifier("/nonexistent.ckpt"), DataError);
}

TEST_CASE("foundation adaptation trains encoder and head jointly with cutmix") {
  auto dir = std::filesystem::temp_directory_path() / "uwf_model_core";
  auto enc_path = dir / "encoder_adapt.ckpt";
  write_substitute_foundation_encoder(enc_path, 1, 32, 15);
  BackboneSpec spec;
  spec.architecture_id = Arch::retinal_foundation;
  spec.input_size = 32;
  spec.foundation_checkpoint = enc_path.string();
  auto model = build_classifier(spec, 15);

  Dataset train = two_tone_dataset(70, 8, 32);
  Dataset val = two_tone_dataset(71, 6, 32);
  DatasetSource source(train);
  uint64_t backbone_before = hash_params(model->backbone_params());

  TrainConfig cfg;
  cfg.stage = Stage::foundation_adapt;
  cfg.max_epochs = 2;
  cfg.batch_size = 4;
  REQUIRE(cfg.cutmix_enabled());
  train_foundation_adapt(*model, source, val, cfg);
  REQUIRE(hash_params(model->backbone_params()) != backbone_before);  // encoder moved
  REQUIRE(model->meta().completed_stages == std::vector<std::string>{"foundation_adapt"});
}
