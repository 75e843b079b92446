// Command-line entry point for the UWF screening pipeline:
//   uwf <split|train|fuse|evaluate|explain|synth> [--config run.toml] [overrides]
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.

#include "CLI11.hpp"

#include "uwf/pipeline.hpp"

#include <iostream>

namespace {

struct CliOverrides {
  std::string config_path;
  std::string manifest, output, domain, threshold_rule, explain_model, foundation_checkpoint;
  std::string synth_dir;
  int task = -1, input_size = -1, resize_target = -1, crop_size = -1, batch_size = -1;
  int max_epochs = -1, patience = -1, vit_depth = -1, foundation_depth = -1;
  int synth_n = -1, synth_image_size = -1, explain_count = -1;
  long long seed = -1, split_seed = -1;
  double lr = -1.0, weight_decay = -1.0, unfreeze_fraction = -1.0, threshold = -1.0;
  double clip_percentile = -1.0, overlay_alpha = -1.0;
  std::vector<std::string> architectures, explain_images;
  bool force = false, pad = false, dump_stages = false, dump_spectrum = false;
  bool allow_substitute_encoder = false;
  int use_cutmix = -1;
};

void add_common(CLI::App* cmd, CliOverrides& o) {
  cmd->add_option("--config", o.config_path, "run configuration file (TOML-style)");
  cmd->add_option("--manifest", o.manifest, "image manifest CSV");
  cmd->add_option("--output", o.output, "output directory");
  cmd->add_option("--task", o.task, "task id (1=gradability, 2=RDR, 3=DME)");
  cmd->add_option("--domain", o.domain, "input domain: rgb | frequency | both");
  cmd->add_option("--seed", o.seed, "global seed");
  cmd->add_option("--split-seed", o.split_seed, "split seed (defaults to global seed)");
  cmd->add_option("--arch", o.architectures, "architecture list (repeatable)");
  cmd->add_flag("--force", o.force, "overwrite existing outputs");
}

uwf::RunConfig merge(const CliOverrides& o) {
  uwf::RunConfig cfg = o.config_path.empty() ? uwf::RunConfig()
                                             : uwf::RunConfig::from_file(o.config_path);
  if (!o.manifest.empty()) cfg.manifest = o.manifest;
  if (!o.output.empty()) cfg.output_dir = o.output;
  if (o.task > 0) cfg.task_id = o.task;
  if (!o.domain.empty()) cfg.domain = o.domain;
  if (o.seed >= 0) {
    cfg.seed = static_cast<uint64_t>(o.seed);
    cfg.split_seed = static_cast<uint64_t>(o.seed);
  }
  if (o.split_seed >= 0) cfg.split_seed = static_cast<uint64_t>(o.split_seed);
  if (!o.architectures.empty()) cfg.architectures = o.architectures;
  if (o.force) cfg.force = true;
  if (o.crop_size > 0) cfg.crop_size = o.crop_size;
  if (o.resize_target >= 0) cfg.resize_target = o.resize_target;
  if (o.pad) cfg.pad_if_needed = true;
  if (o.dump_stages) cfg.dump_stages = true;
  if (o.dump_spectrum) cfg.dump_spectrum = true;
  if (o.clip_percentile > 0.0) cfg.clip_percentile = o.clip_percentile;
  if (o.input_size > 0) cfg.input_size = o.input_size;
  if (o.unfreeze_fraction >= 0.0) cfg.unfreeze_fraction = o.unfreeze_fraction;
  if (o.vit_depth > 0) cfg.vit_depth = o.vit_depth;
  if (o.foundation_depth > 0) cfg.foundation_depth = o.foundation_depth;
  if (!o.foundation_checkpoint.empty()) cfg.foundation_checkpoint = o.foundation_checkpoint;
  if (o.allow_substitute_encoder) cfg.allow_substitute_encoder = true;
  if (o.lr > 0.0) cfg.learning_rate = o.lr;
  if (o.weight_decay >= 0.0) cfg.weight_decay = o.weight_decay;
  if (o.batch_size > 0) cfg.batch_size = o.batch_size;
  if (o.max_epochs > 0) cfg.max_epochs = o.max_epochs;
  if (o.patience > 0) cfg.early_stop_patience = o.patience;
  if (o.use_cutmix >= 0) cfg.use_cutmix = o.use_cutmix;
  if (o.threshold >= 0.0) cfg.threshold = o.threshold;
  if (!o.threshold_rule.empty()) cfg.threshold_rule = o.threshold_rule;
  if (!o.explain_model.empty()) cfg.explain_model = o.explain_model;
  if (o.overlay_alpha >= 0.0) cfg.overlay_alpha = o.overlay_alpha;
  if (!o.explain_images.empty()) cfg.explain_images = o.explain_images;
  if (o.explain_count > 0) cfg.explain_count = o.explain_count;
  if (o.synth_n > 0) cfg.synth_n = o.synth_n;
  if (o.synth_image_size > 0) cfg.synth_image_size = o.synth_image_size;
  if (!o.synth_dir.empty()) cfg.synth_dir = o.synth_dir;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ultra-widefield retinal screening pipeline"};
  app.require_subcommand(1);
  CliOverrides o;

  auto* split = app.add_subcommand("split", "Write the stratified train/val/test split");
  auto* train = app.add_subcommand("train", "Train the configured backbones");
  auto* fuse = app.add_subcommand("fuse", "Train the feature-level fusion ensemble");
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate checkpoints on the test split");
  auto* explain = app.add_subcommand("explain", "Write Grad-CAM panels and an HTML report");
  auto* synth = app.add_subcommand("synth", "Generate the synthetic desk-scale dataset");

  for (auto* cmd : {split, train, fuse, evaluate, explain, synth}) add_common(cmd, o);
  for (auto* cmd : {split, train, fuse, evaluate, explain}) {
    cmd->add_option("--crop-size", o.crop_size, "square crop size before resizing");
    cmd->add_option("--resize-target", o.resize_target, "post-crop resize (0 = task default)");
    cmd->add_flag("--pad", o.pad, "pad-then-crop fallback for small images");
  }
  for (auto* cmd : {train, fuse, evaluate}) {
    cmd->add_option("--input-size", o.input_size, "model input size (tasks 2-3 default)");
    cmd->add_option("--batch-size", o.batch_size, "minibatch size");
    cmd->add_option("--lr", o.lr, "AdamW learning rate");
    cmd->add_option("--weight-decay", o.weight_decay, "AdamW weight decay");
    cmd->add_option("--epochs", o.max_epochs, "max training epochs");
    cmd->add_option("--patience", o.patience, "early-stopping patience (epochs)");
    cmd->add_option("--clip-percentile", o.clip_percentile, "frequency clip percentile");
    cmd->add_option("--vit-depth", o.vit_depth, "transformer encoder depth");
    cmd->add_option("--foundation-depth", o.foundation_depth, "substitute encoder depth");
    cmd->add_option("--foundation-checkpoint", o.foundation_checkpoint,
                    "pretrained foundation encoder checkpoint");
    cmd->add_flag("--allow-substitute-encoder", o.allow_substitute_encoder,
                  "generate a substitute encoder when the checkpoint is absent");
    cmd->add_option("--unfreeze-fraction", o.unfreeze_fraction,
                    "fraction of deepest backbone parameters released in stage 2");
    cmd->add_option("--use-cutmix", o.use_cutmix, "0/1 override of the CutMix default");
  }
  train->add_flag("--dump-stages", o.dump_stages, "write per-stage preprocessing PNGs");
  train->add_flag("--dump-spectrum", o.dump_spectrum, "write clipped spectrum PNGs");
  evaluate->add_option("--threshold", o.threshold, "operating threshold for sens/spec");
  evaluate->add_option("--threshold-rule", o.threshold_rule, "fixed | youden-validation");
  explain->add_option("--images", o.explain_images, "image ids to explain (repeatable)");
  explain->add_option("--model", o.explain_model, "architecture whose checkpoint to explain");
  explain->add_option("--count", o.explain_count, "number of test images when none are named");
  explain->add_option("--alpha", o.overlay_alpha, "overlay blend alpha");
  synth->add_option("--n", o.synth_n, "number of synthetic images");
  synth->add_option("--image-size", o.synth_image_size, "synthetic image size in pixels");
  synth->add_option("--out-dir", o.synth_dir, "dataset directory (default <output>/synth)");

  CLI11_PARSE(app, argc, argv);

  try {
    uwf::Pipeline pipeline(merge(o));
    if (split->parsed()) pipeline.cmd_split();
    if (synth->parsed()) pipeline.cmd_synth();
    if (train->parsed()) pipeline.cmd_train();
    if (fuse->parsed()) pipeline.cmd_fuse();
    if (evaluate->parsed()) {
      auto report = pipeline.cmd_evaluate();
      if (report.any_undefined()) {
        std::cerr << "error: report contains undefined metrics (single-class test slice)\n";
        return 3;
      }
    }
    if (explain->parsed()) pipeline.cmd_explain();
  } catch (const uwf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const uwf::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const uwf::TrainError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
