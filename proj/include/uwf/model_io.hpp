#pragma once

#include "uwf/train.hpp"

namespace uwf {

namespace detail {
inline nlohmann::json spec_to_json(const BackboneSpec& s) {
  return {{"architecture_id", arch_name(s.architecture_id)},
          {"pretrained_source", s.pretrained_source == PretrainedSource::generic_images
                                    ? "generic-images"
                                    : "retinal-foundation-checkpoint"},
          {"feature_dim", s.feature_dim},
          {"unfreeze_fraction", s.unfreeze_fraction},
          {"input_size", s.input_size},
          {"transformer_depth", s.transformer_depth},
          {"foundation_checkpoint", s.foundation_checkpoint}};
}

inline BackboneSpec spec_from_json(const nlohmann::json& j) {
  BackboneSpec s;
  s.architecture_id = arch_from_name(j.at("architecture_id").get<std::string>());
  s.pretrained_source = j.value("pretrained_source", "generic-images") == "generic-images"
                            ? PretrainedSource::generic_images
                            : PretrainedSource::retinal_foundation_checkpoint;
  s.feature_dim = j.value("feature_dim", 0);
  s.unfreeze_fraction = j.value("unfreeze_fraction", 0.25);
  s.input_size = j.value("input_size", 224);
  s.transformer_depth = j.value("transformer_depth", 0);
  s.foundation_checkpoint = j.value("foundation_checkpoint", "");
  return s;
}

inline nlohmann::json history_to_json(const std::vector<EpochRecord>& h) {
  auto arr = nlohmann::json::array();
  for (const auto& r : h)
    arr.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_auroc", r.val_metric}});
  return arr;
}

inline std::vector<EpochRecord> history_from_json(const nlohmann::json& arr) {
  std::vector<EpochRecord> out;
  for (const auto& e : arr)
    out.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(),
                   e.at("val_auroc").get<double>()});
  return out;
}
}  // namespace detail

inline void save_classifier(const std::filesystem::path& path, Classifier& model) {
  CheckpointFile ckpt;
  const auto& m = model.meta();
  ckpt.meta = {{"kind", "classifier"},
               {"spec", detail::spec_to_json(model.spec())},
               {"domain", m.domain},
               {"task_id", m.task_id},
               {"init_seed", m.init_seed},
               {"split_seed", m.split_seed},
               {"best_epoch", m.best_epoch},
               {"history", detail::history_to_json(m.history)},
               {"completed_stages", m.completed_stages},
               {"pretrained_origin", m.pretrained_origin},
               {"train_config", m.train_config}};
  for (auto* p : model.all_params()) ckpt.tensors.emplace_back(p->name, p->value());
  for (auto& [name, buf] : model.buffers()) ckpt.tensors.emplace_back(name, *buf);
  save_checkpoint_file(path, ckpt);
}

inline std::shared_ptr<Classifier> load_classifier(const std::filesystem::path& path) {
  CheckpointFile ckpt = load_checkpoint_file(path);
  if (ckpt.meta.value("kind", "") != "classifier")
    throw DataError("not a classifier checkpoint: " + path.string());
  BackboneSpec spec = detail::spec_from_json(ckpt.meta.at("spec"));
  uint64_t seed = ckpt.meta.value("init_seed", 0ull);
  auto model = std::make_shared<Classifier>(spec, seed);
  for (auto* p : model->all_params()) {
    const Tensor* t = ckpt.find(p->name);
    if (!t) throw DataError("checkpoint " + path.string() + " is missing tensor '" + p->name + "'");
    if (t->shape() != p->value().shape())
      throw DataError("checkpoint tensor '" + p->name + "' shape mismatch in " + path.string());
    p->value() = *t;
  }
  for (auto& [name, buf] : model->buffers()) {
    const Tensor* t = ckpt.find(name);
    if (!t) throw DataError("checkpoint " + path.string() + " is missing buffer '" + name + "'");
    *buf = *t;
  }
  auto& m = model->meta();
  m.domain = ckpt.meta.value("domain", "");
  m.task_id = ckpt.meta.value("task_id", 0);
  m.init_seed = seed;
  m.split_seed = ckpt.meta.value("split_seed", 0ull);
  m.best_epoch = ckpt.meta.value("best_epoch", -1);
  if (ckpt.meta.contains("history")) m.history = detail::history_from_json(ckpt.meta["history"]);
  m.completed_stages = ckpt.meta.value("completed_stages", std::vector<std::string>{});
  m.pretrained_origin = ckpt.meta.value("pretrained_origin", "");
  if (ckpt.meta.contains("train_config")) m.train_config = ckpt.meta["train_config"];
  return model;
}

}  // namespace uwf
