#pragma once

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <memory>
#include <string>
#include <vector>

#include "uwf/ckptfile.hpp"
#include "uwf/nn.hpp"

namespace uwf {

enum class Arch { lightweight_cnn, residual_cnn, patch_transformer, retinal_foundation };
enum class PretrainedSource { generic_images, retinal_foundation_checkpoint };

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::lightweight_cnn: return "lightweight_cnn";
    case Arch::residual_cnn: return "residual_cnn";
    case Arch::patch_transformer: return "patch_transformer";
    default: return "retinal_foundation";
  }
}

inline Arch arch_from_name(const std::string& s) {
  if (s == "lightweight_cnn") return Arch::lightweight_cnn;
  if (s == "residual_cnn") return Arch::residual_cnn;
  if (s == "patch_transformer") return Arch::patch_transformer;
  if (s == "retinal_foundation") return Arch::retinal_foundation;
  throw ConfigError("unknown architecture_id: " + s);
}

inline int default_feature_dim(Arch a) {
  switch (a) {
    case Arch::lightweight_cnn: return 1280;
    case Arch::residual_cnn: return 512;
    case Arch::patch_transformer: return 768;
    default: return 1024;
  }
}

struct BackboneSpec {
  Arch architecture_id = Arch::residual_cnn;
  PretrainedSource pretrained_source = PretrainedSource::generic_images;
  int feature_dim = 0;  // 0 -> family default
  double unfreeze_fraction = 0.25;
  int input_size = 224;
  int transformer_depth = 0;  // 0 -> family default (12 for the ViT)
  std::string foundation_checkpoint;

  void resolve() {
    if (architecture_id == Arch::retinal_foundation)
      pretrained_source = PretrainedSource::retinal_foundation_checkpoint;
    int fam = default_feature_dim(architecture_id);
    if (feature_dim == 0) feature_dim = fam;
    if (feature_dim != fam)
      throw ConfigError(std::string("feature_dim for ") + arch_name(architecture_id) +
                        " is fixed at " + std::to_string(fam));
    if (unfreeze_fraction < 0.0 || unfreeze_fraction > 1.0)
      throw ConfigError("unfreeze_fraction must be in [0, 1]");
    if (input_size < 32) throw ConfigError("input_size must be at least 32");
    bool transformer = architecture_id == Arch::patch_transformer ||
                       architecture_id == Arch::retinal_foundation;
    if (transformer && input_size % 16 != 0)
      throw ConfigError("transformer input_size must be a multiple of the 16px patch");
    if (transformer_depth == 0 && architecture_id == Arch::patch_transformer)
      transformer_depth = 12;
  }
};

struct BackboneOut {
  ag::Var features;     // [B, feature_dim]
  ag::Var explanation;  // CNN: [B,C,h,w]; transformer: [B,T+1,D] tokens
  bool token_based = false;
  int grid_h = 0, grid_w = 0;
  std::string layer_name;
};

class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual BackboneOut forward(const ag::Var& x, nn::Ctx& ctx) = 0;
  virtual void collect(std::vector<nn::Parameter*>& out) = 0;
  virtual void collect_buffers(std::vector<nn::BufferRef>&) {}
  virtual int feature_dim() const = 0;
  virtual std::string explanation_layer() const = 0;
};

// ---- MobileNetV2-style lightweight CNN -----------------------------------------

namespace detail {

class ConvBnRelu6 {
 public:
  ConvBnRelu6(const std::string& name, int in, int out, int k, int stride, int groups, Rng& rng)
      : conv_(name + ".conv", in, out, k, stride, k / 2, groups, rng), bn_(name + ".bn", out) {}

  ag::Var forward(const ag::Var& x, nn::Ctx& ctx) {
    return ag::relu6(bn_.forward(conv_.forward(x), ctx));
  }
  void collect(std::vector<nn::Parameter*>& out) {
    conv_.collect(out);
    bn_.collect(out);
  }
  void collect_buffers(std::vector<nn::BufferRef>& out) { bn_.collect_buffers(out); }

 private:
  nn::Conv2d conv_;
  nn::BatchNorm2d bn_;
};

class InvertedResidual {
 public:
  InvertedResidual(const std::string& name, int in, int out, int expand, int stride, Rng& rng)
      : use_skip_(stride == 1 && in == out), has_expand_(expand != 1) {
    int hidden = in * expand;
    if (has_expand_) expand_.emplace(name + ".expand", in, hidden, 1, 1, 1, rng);
    dw_.emplace(name + ".dw", hidden, hidden, 3, stride, hidden, rng);
    project_conv_.emplace(name + ".project.conv", hidden, out, 1, 1, 0, 1, rng);
    project_bn_.emplace(name + ".project.bn", out);
  }

  ag::Var forward(const ag::Var& x, nn::Ctx& ctx) {
    ag::Var h = x;
    if (has_expand_) h = expand_->forward(h, ctx);
    h = dw_->forward(h, ctx);
    h = project_bn_->forward(project_conv_->forward(h), ctx);
    return use_skip_ ? ag::add(x, h) : h;
  }

  void collect(std::vector<nn::Parameter*>& out) {
    if (has_expand_) expand_->collect(out);
    dw_->collect(out);
    project_conv_->collect(out);
    project_bn_->collect(out);
  }
  void collect_buffers(std::vector<nn::BufferRef>& out) {
    if (has_expand_) expand_->collect_buffers(out);
    dw_->collect_buffers(out);
    project_bn_->collect_buffers(out);
  }

 private:
  bool use_skip_, has_expand_;
  std::optional<ConvBnRelu6> expand_;
  std::optional<ConvBnRelu6> dw_;
  std::optional<nn::Conv2d> project_conv_;
  std::optional<nn::BatchNorm2d> project_bn_;
};

}  // namespace detail

class MobileNetV2Backbone : public Backbone {
 public:
  explicit MobileNetV2Backbone(Rng rng) : stem_("stem", 3, 32, 3, 2, 1, rng) {
    // (expand, out_channels, repeats, first_stride)
    const int cfg[7][4] = {{1, 16, 1, 1},  {6, 24, 2, 2},  {6, 32, 3, 2}, {6, 64, 4, 2},
                           {6, 96, 3, 1},  {6, 160, 3, 2}, {6, 320, 1, 1}};
    int in = 32, idx = 0;
    for (const auto& c : cfg)
      for (int r = 0; r < c[2]; ++r) {
        int stride = r == 0 ? c[3] : 1;
        blocks_.push_back(std::make_unique<detail::InvertedResidual>(
            "block" + std::to_string(idx++), in, c[1], c[0], stride, rng));
        in = c[1];
      }
    head_.emplace("head", in, 1280, 1, 1, 1, rng);
  }

  BackboneOut forward(const ag::Var& x, nn::Ctx& ctx) override {
    ag::Var h = stem_.forward(x, ctx);
    for (auto& b : blocks_) h = b->forward(h, ctx);
    h = head_->forward(h, ctx);
    BackboneOut out;
    out.explanation = h;
    out.layer_name = explanation_layer();
    out.grid_h = h->value.dim(2);
    out.grid_w = h->value.dim(3);
    out.features = ag::global_avgpool(h);
    return out;
  }

  void collect(std::vector<nn::Parameter*>& out) override {
    stem_.collect(out);
    for (auto& b : blocks_) b->collect(out);
    head_->collect(out);
  }
  void collect_buffers(std::vector<nn::BufferRef>& out) override {
    stem_.collect_buffers(out);
    for (auto& b : blocks_) b->collect_buffers(out);
    head_->collect_buffers(out);
  }
  int feature_dim() const override { return 1280; }
  std::string explanation_layer() const override { return "head.relu6"; }

 private:
  detail::ConvBnRelu6 stem_;
  std::vector<std::unique_ptr<detail::InvertedResidual>> blocks_;
  std::optional<detail::ConvBnRelu6> head_;
};

// ---- ResNet18-style residual CNN -------------------------------------------------

namespace detail {

class BasicBlock {
 public:
  BasicBlock(const std::string& name, int in, int out, int stride, Rng& rng)
      : conv1_(name + ".conv1", in, out, 3, stride, 1, 1, rng),
        bn1_(name + ".bn1", out),
        conv2_(name + ".conv2", out, out, 3, 1, 1, 1, rng),
        bn2_(name + ".bn2", out) {
    if (stride != 1 || in != out) {
      down_conv_.emplace(name + ".down.conv", in, out, 1, stride, 0, 1, rng);
      down_bn_.emplace(name + ".down.bn", out);
    }
  }

  ag::Var forward(const ag::Var& x, nn::Ctx& ctx) {
    ag::Var h = ag::relu(bn1_.forward(conv1_.forward(x), ctx));
    h = bn2_.forward(conv2_.forward(h), ctx);
    ag::Var skip = x;
    if (down_conv_) skip = down_bn_->forward(down_conv_->forward(x), ctx);
    return ag::relu(ag::add(skip, h));
  }

  void collect(std::vector<nn::Parameter*>& out) {
    conv1_.collect(out);
    bn1_.collect(out);
    conv2_.collect(out);
    bn2_.collect(out);
    if (down_conv_) {
      down_conv_->collect(out);
      down_bn_->collect(out);
    }
  }
  void collect_buffers(std::vector<nn::BufferRef>& out) {
    bn1_.collect_buffers(out);
    bn2_.collect_buffers(out);
    if (down_bn_) down_bn_->collect_buffers(out);
  }

 private:
  nn::Conv2d conv1_;
  nn::BatchNorm2d bn1_;
  nn::Conv2d conv2_;
  nn::BatchNorm2d bn2_;
  std::optional<nn::Conv2d> down_conv_;
  std::optional<nn::BatchNorm2d> down_bn_;
};

}  // namespace detail

class ResNet18Backbone : public Backbone {
 public:
  explicit ResNet18Backbone(Rng rng)
      : stem_conv_("stem.conv", 3, 64, 7, 2, 3, 1, rng), stem_bn_("stem.bn", 64) {
    const int chan[4] = {64, 128, 256, 512};
    int in = 64;
    for (int stage = 0; stage < 4; ++stage)
      for (int r = 0; r < 2; ++r) {
        int stride = (stage > 0 && r == 0) ? 2 : 1;
        blocks_.push_back(std::make_unique<detail::BasicBlock>(
            "layer" + std::to_string(stage + 1) + "." + std::to_string(r), in, chan[stage],
            stride, rng));
        in = chan[stage];
      }
  }

  BackboneOut forward(const ag::Var& x, nn::Ctx& ctx) override {
    ag::Var h = ag::relu(stem_bn_.forward(stem_conv_.forward(x), ctx));
    h = ag::maxpool2d(h, 3, 2, 1);
    for (auto& b : blocks_) h = b->forward(h, ctx);
    BackboneOut out;
    out.explanation = h;
    out.layer_name = explanation_layer();
    out.grid_h = h->value.dim(2);
    out.grid_w = h->value.dim(3);
    out.features = ag::global_avgpool(h);
    return out;
  }

  void collect(std::vector<nn::Parameter*>& out) override {
    stem_conv_.collect(out);
    stem_bn_.collect(out);
    for (auto& b : blocks_) b->collect(out);
  }
  void collect_buffers(std::vector<nn::BufferRef>& out) override {
    stem_bn_.collect_buffers(out);
    for (auto& b : blocks_) b->collect_buffers(out);
  }
  int feature_dim() const override { return 512; }
  std::string explanation_layer() const override { return "layer4.1.relu"; }

 private:
  nn::Conv2d stem_conv_;
  nn::BatchNorm2d stem_bn_;
  std::vector<std::unique_ptr<detail::BasicBlock>> blocks_;
};

// ---- vision transformer (ViT-B/16 and the foundation encoder) --------------------

namespace detail {

class TransformerBlock {
 public:
  TransformerBlock(const std::string& name, int dim, int heads, Rng& rng)
      : dim_(dim),
        heads_(heads),
        ln1_(name + ".ln1", dim),
        wq_(name + ".attn.wq", dim, dim, rng, 0.02f),
        wk_(name + ".attn.wk", dim, dim, rng, 0.02f),
        wv_(name + ".attn.wv", dim, dim, rng, 0.02f),
        wo_(name + ".attn.wo", dim, dim, rng, 0.02f),
        ln2_(name + ".ln2", dim),
        fc1_(name + ".mlp.fc1", dim, 4 * dim, rng, 0.02f),
        fc2_(name + ".mlp.fc2", 4 * dim, dim, rng, 0.02f) {}

  ag::Var forward(const ag::Var& x, nn::Ctx&) {
    int B = x->value.dim(0), T = x->value.dim(1), D = dim_;
    int dh = D / heads_;
    auto flat = ag::reshape(x, {B * T, D});
    auto h = ln1_.forward(flat);
    auto split_heads = [&](const ag::Var& t) {
      return ag::reshape(ag::permute(ag::reshape(t, {B, T, heads_, dh}), {0, 2, 1, 3}),
                         {B * heads_, T, dh});
    };
    auto q = split_heads(wq_.forward(h));
    auto k = split_heads(wk_.forward(h));
    auto v = split_heads(wv_.forward(h));
    auto scores = ag::scale(ag::bmm(q, k, true), 1.0f / std::sqrt(static_cast<float>(dh)));
    auto attn = ag::softmax_lastdim3(scores);
    auto ctxv = ag::bmm(attn, v);
    auto merged = ag::reshape(
        ag::permute(ag::reshape(ctxv, {B, heads_, T, dh}), {0, 2, 1, 3}), {B * T, D});
    auto x1 = ag::add(x, ag::reshape(wo_.forward(merged), {B, T, D}));

    auto m = fc2_.forward(ag::gelu(fc1_.forward(ln2_.forward(ag::reshape(x1, {B * T, D})))));
    return ag::add(x1, ag::reshape(m, {B, T, D}));
  }

  void collect(std::vector<nn::Parameter*>& out) {
    ln1_.collect(out);
    wq_.collect(out);
    wk_.collect(out);
    wv_.collect(out);
    wo_.collect(out);
    ln2_.collect(out);
    fc1_.collect(out);
    fc2_.collect(out);
  }

 private:
  int dim_, heads_;
  nn::LayerNorm ln1_;
  nn::Linear wq_, wk_, wv_, wo_;
  nn::LayerNorm ln2_;
  nn::Linear fc1_, fc2_;
};

}  // namespace detail

class VisionTransformerBackbone : public Backbone {
 public:
  VisionTransformerBackbone(int width, int depth, int heads, int patch, int input_size, Rng rng)
      : width_(width),
        depth_(depth),
        heads_(heads),
        patch_(patch),
        grid_(input_size / patch),
        patch_embed_("patch_embed", 3, width, patch, patch, 0, 1, rng),
        final_ln_("final_ln", width) {
    if (input_size % patch != 0)
      throw ConfigError("transformer input size must be divisible by the patch size");
    int tokens = grid_ * grid_;
    cls_ = nn::Parameter("cls_token", Tensor::randn({1, 1, width}, rng, 0.02f), false);
    pos_ = nn::Parameter("pos_embed", Tensor::randn({1, tokens + 1, width}, rng, 0.02f), false);
    for (int i = 0; i < depth; ++i)
      blocks_.push_back(
          std::make_unique<detail::TransformerBlock>("block" + std::to_string(i), width, heads, rng));
  }

  BackboneOut forward(const ag::Var& x, nn::Ctx& ctx) override {
    int B = x->value.dim(0);
    ag::Var h = patch_embed_.forward(x);  // [B, D, P, P]
    h = ag::reshape(ag::permute(h, {0, 2, 3, 1}), {B, grid_ * grid_, width_});
    h = ag::concat_tokens(ag::tile_batch(cls_.var, B), h);
    h = ag::add_tiled(h, pos_.var);
    for (auto& b : blocks_) h = b->forward(h, ctx);

    BackboneOut out;
    out.explanation = h;  // tokens after the last block, cls at index 0
    out.token_based = true;
    out.grid_h = grid_;
    out.grid_w = grid_;
    out.layer_name = explanation_layer();
    int T1 = grid_ * grid_ + 1;
    auto normed = final_ln_.forward(ag::reshape(h, {B * T1, width_}));
    auto cls = ag::narrow(ag::reshape(normed, {B, T1, width_}), 1, 0, 1);
    out.features = ag::reshape(cls, {B, width_});
    return out;
  }

  void collect(std::vector<nn::Parameter*>& out) override {
    patch_embed_.collect(out);
    out.push_back(&cls_);
    out.push_back(&pos_);
    for (auto& b : blocks_) b->collect(out);
    final_ln_.collect(out);
  }
  int feature_dim() const override { return width_; }
  std::string explanation_layer() const override {
    return "block" + std::to_string(depth_ - 1) + ".tokens";
  }
  int depth() const { return depth_; }
  int heads() const { return heads_; }
  int patch() const { return patch_; }
  int grid() const { return grid_; }

 private:
  int width_, depth_, heads_, patch_, grid_;
  nn::Conv2d patch_embed_;
  nn::Parameter cls_, pos_;
  std::vector<std::unique_ptr<detail::TransformerBlock>> blocks_;
  nn::LayerNorm final_ln_;
};

// ---- classifier: backbone + task MLP head ----------------------------------------

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
};

struct ModelMeta {
  std::string domain;  // "rgb" | "frequency", set when training data is bound
  int task_id = 0;
  uint64_t init_seed = 0;
  uint64_t split_seed = 0;
  int best_epoch = -1;
  std::vector<EpochRecord> history;
  std::vector<std::string> completed_stages;
  std::string pretrained_origin;
  nlohmann::json train_config;
};

inline constexpr int kHeadHiddenWidth = 256;
inline constexpr float kHeadDropout = 0.3f;

class Classifier {
 public:
  Classifier(BackboneSpec spec, uint64_t seed) : spec_(spec) {
    spec_.resolve();
    Rng brng = Rng::child(seed, 1);
    switch (spec_.architecture_id) {
      case Arch::lightweight_cnn:
        backbone_ = std::make_unique<MobileNetV2Backbone>(brng);
        break;
      case Arch::residual_cnn:
        backbone_ = std::make_unique<ResNet18Backbone>(brng);
        break;
      case Arch::patch_transformer:
        backbone_ = std::make_unique<VisionTransformerBackbone>(768, spec_.transformer_depth, 12,
                                                                16, spec_.input_size, brng);
        break;
      case Arch::retinal_foundation: {
        int depth = spec_.transformer_depth > 0 ? spec_.transformer_depth : 4;
        backbone_ = std::make_unique<VisionTransformerBackbone>(1024, depth, 16, 16,
                                                                spec_.input_size, brng);
        break;
      }
    }
    Rng hrng = Rng::child(seed, 2);
    fc1_.emplace("head.fc1", backbone_->feature_dim(), kHeadHiddenWidth, hrng);
    fc2_.emplace("head.fc2", kHeadHiddenWidth, 2, hrng);
    meta_.init_seed = seed;
  }

  struct Output {
    ag::Var logits;  // [B,2]
    ag::Var probs;   // softmax of logits
    BackboneOut backbone;
  };

  Output forward(const ag::Var& x, nn::Ctx& ctx) {
    Output out;
    out.backbone = backbone_->forward(x, ctx);
    ag::Var h = ag::relu(fc1_->forward(out.backbone.features));
    h = ag::dropout(h, kHeadDropout, ctx.training, ctx.rng_ref());
    out.logits = fc2_->forward(h);
    out.probs = ag::softmax_rows(out.logits);
    return out;
  }

  ag::Var features(const ag::Var& x, nn::Ctx& ctx) { return backbone_->forward(x, ctx).features; }

  std::vector<nn::Parameter*> backbone_params() {
    std::vector<nn::Parameter*> out;
    backbone_->collect(out);
    return out;
  }
  std::vector<nn::Parameter*> head_params() {
    std::vector<nn::Parameter*> out;
    fc1_->collect(out);
    fc2_->collect(out);
    return out;
  }
  std::vector<nn::Parameter*> all_params() {
    auto out = backbone_params();
    auto head = head_params();
    out.insert(out.end(), head.begin(), head.end());
    return out;
  }
  std::vector<nn::BufferRef> buffers() {
    std::vector<nn::BufferRef> out;
    backbone_->collect_buffers(out);
    return out;
  }

  uint64_t backbone_hash() { return nn::params_hash(backbone_params()); }

  int64_t backbone_param_count() {
    int64_t n = 0;
    for (auto* p : backbone_params()) n += p->numel();
    return n;
  }

  void set_trainable_head_only() {
    for (auto* p : backbone_params()) p->set_trainable(false);
    for (auto* p : head_params()) p->set_trainable(true);
  }

  /// Release the deepest `fraction` of backbone parameters (cumulative count
  /// walking from the deepest registered parameter) plus the head.
  void set_trainable_finetune(double fraction) {
    auto params = backbone_params();
    int64_t total = 0;
    for (auto* p : params) total += p->numel();
    int64_t want = static_cast<int64_t>(std::llround(fraction * static_cast<double>(total)));
    int64_t got = 0;
    for (auto it = params.rbegin(); it != params.rend(); ++it) {
      bool release = got < want;
      (*it)->set_trainable(release);
      if (release) got += (*it)->numel();
    }
    for (auto* p : head_params()) p->set_trainable(true);
  }

  void set_trainable_all() {
    for (auto* p : all_params()) p->set_trainable(true);
  }

  int64_t trainable_backbone_count() {
    int64_t n = 0;
    for (auto* p : backbone_params())
      if (p->trainable) n += p->numel();
    return n;
  }

  const BackboneSpec& spec() const { return spec_; }
  Backbone& backbone() { return *backbone_; }
  ModelMeta& meta() { return meta_; }
  const ModelMeta& meta() const { return meta_; }

 private:
  BackboneSpec spec_;
  std::unique_ptr<Backbone> backbone_;
  std::optional<nn::Linear> fc1_, fc2_;
  ModelMeta meta_;
};

// ---- pretrained-weight resolution -------------------------------------------------

inline std::string pretrained_cache_dir() {
  const char* env = std::getenv("UWF_CACHE_DIR");
  return env ? std::string(env) : std::string();
}

namespace detail {
inline int apply_named_tensors(Classifier& model, const CheckpointFile& ckpt,
                               const std::string& path_for_errors) {
  int applied = 0;
  for (auto* p : model.backbone_params()) {
    const Tensor* t = ckpt.find(p->name);
    if (!t) continue;
    if (t->shape() != p->value().shape())
      throw DataError("checkpoint tensor '" + p->name + "' shape mismatch in " + path_for_errors);
    p->value() = *t;
    ++applied;
  }
  for (auto& [name, buf] : model.buffers()) {
    const Tensor* t = ckpt.find(name);
    if (t && t->shape() == buf->shape()) *buf = *t;
  }
  return applied;
}
}  // namespace detail

/// Write a randomly initialized foundation encoder checkpoint. Stands in for
/// a real large-scale pretrained encoder when none is provisioned; the file
/// records that it is a substitute.
inline void write_substitute_foundation_encoder(const std::filesystem::path& path, int depth,
                                                int input_size, uint64_t seed) {
  Rng rng = Rng::child(seed, 7);
  VisionTransformerBackbone enc(1024, depth, 16, 16, input_size, rng);
  CheckpointFile ckpt;
  ckpt.meta = {{"kind", "encoder"},
               {"arch", "retinal_foundation"},
               {"width", 1024},
               {"depth", depth},
               {"heads", 16},
               {"patch", 16},
               {"input_size", input_size},
               {"seed", seed},
               {"substitute", true}};
  std::vector<nn::Parameter*> params;
  enc.collect(params);
  for (auto* p : params) ckpt.tensors.emplace_back(p->name, p->value());
  save_checkpoint_file(path, ckpt);
}

/// Assemble an untrained classifier for `spec`. Generic-image weights come
/// from the UWF_CACHE_DIR cache when present (seeded init otherwise); the
/// foundation encoder checkpoint is mandatory.
inline std::shared_ptr<Classifier> build_classifier(BackboneSpec spec, uint64_t seed,
                                                    std::string cache_dir = "") {
  spec.resolve();
  if (spec.architecture_id == Arch::retinal_foundation) {
    if (spec.foundation_checkpoint.empty())
      throw ConfigError(
          "retinal_foundation requires an encoder checkpoint path "
          "(model.foundation_checkpoint); none was provided");
    CheckpointFile ckpt = load_checkpoint_file(spec.foundation_checkpoint);
    if (ckpt.meta.value("kind", "") != "encoder")
      throw ConfigError("not an encoder checkpoint: " + spec.foundation_checkpoint);
    int enc_input = ckpt.meta.at("input_size").get<int>();
    if (enc_input != spec.input_size)
      throw ConfigError("encoder checkpoint was built for input_size " +
                        std::to_string(enc_input) + " but the run requests " +
                        std::to_string(spec.input_size));
    spec.transformer_depth = ckpt.meta.at("depth").get<int>();
    auto model = std::make_shared<Classifier>(spec, seed);
    int applied = detail::apply_named_tensors(*model, ckpt, spec.foundation_checkpoint);
    if (applied == 0)
      throw DataError("encoder checkpoint matched no parameters: " + spec.foundation_checkpoint);
    model->meta().pretrained_origin = "encoder:" + spec.foundation_checkpoint;
    return model;
  }

  auto model = std::make_shared<Classifier>(spec, seed);
  if (cache_dir.empty()) cache_dir = pretrained_cache_dir();
  if (!cache_dir.empty()) {
    auto path = std::filesystem::path(cache_dir) /
                ("pretrained_" + std::string(arch_name(spec.architecture_id)) + ".ckpt");
    if (std::filesystem::exists(path)) {
      CheckpointFile ckpt = load_checkpoint_file(path);
      int applied = detail::apply_named_tensors(*model, ckpt, path.string());
      if (applied > 0) {
        model->meta().pretrained_origin = "cache:" + path.string();
        return model;
      }
    }
  }
  model->meta().pretrained_origin = "seeded-init";
  return model;
}

}  // namespace uwf
