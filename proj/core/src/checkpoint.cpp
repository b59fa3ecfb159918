#include "wavestage/checkpoint.hpp"

#include <cstring>
#include <map>

#include "json.hpp"
#include "wavestage/errors.hpp"
#include "wavestage/io_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace wavestage {

namespace {
constexpr const char* kMagic = "WAVESTAGE-CKPT v1";

void reject_unknown(const json& j, std::initializer_list<const char*> allowed,
                    const std::string& scope) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + scope);
  }
}

template <class T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json branch_to_json(const MrcnnBranchConfig& b) {
  return {{"filters", b.filters},       {"kernel", b.kernel},
          {"stride", b.stride},         {"pool_kernel", b.pool_kernel},
          {"pool_stride", b.pool_stride}, {"dropout", b.dropout}};
}

void branch_from_json(const json& j, MrcnnBranchConfig& b, const std::string& scope) {
  reject_unknown(j, {"filters", "kernel", "stride", "pool_kernel", "pool_stride",
                     "dropout"},
                 scope);
  get_if(j, "filters", b.filters);
  get_if(j, "kernel", b.kernel);
  get_if(j, "stride", b.stride);
  get_if(j, "pool_kernel", b.pool_kernel);
  get_if(j, "pool_stride", b.pool_stride);
  get_if(j, "dropout", b.dropout);
}

json model_config_to_json(const ModelConfig& c) {
  json j;
  j["data"] = {{"epoch_seconds", c.data.epoch_seconds},
               {"sampling_hz", c.data.sampling_hz},
               {"window_len", c.data.window_len},
               {"num_classes", c.data.num_classes}};
  j["features"] = {{"small_branch", branch_to_json(c.features.small_branch)},
                   {"large_branch", branch_to_json(c.features.large_branch)},
                   {"mrcnn_dropout", c.features.mrcnn_dropout},
                   {"channels", c.features.channels},
                   {"se_reduction", c.features.se_reduction},
                   {"blocks", c.features.blocks},
                   {"units_per_block", c.features.units_per_block},
                   {"unit_hidden", c.features.unit_hidden},
                   {"depthwise_kernel", c.features.depthwise_kernel}};
  j["num_prototypes"] = c.num_prototypes;
  j["proto_len"] = c.proto_len;
  j["eps_sim"] = c.eps_sim;
  j["eps_div"] = c.eps_div;
  return j;
}

void model_config_from_json(const json& j, ModelConfig& c) {
  reject_unknown(j, {"data", "features", "num_prototypes", "proto_len", "eps_sim",
                     "eps_div"},
                 "model config");
  if (j.contains("data")) {
    const json& d = j["data"];
    reject_unknown(d, {"epoch_seconds", "sampling_hz", "window_len", "num_classes"},
                   "model config data");
    get_if(d, "epoch_seconds", c.data.epoch_seconds);
    get_if(d, "sampling_hz", c.data.sampling_hz);
    get_if(d, "window_len", c.data.window_len);
    get_if(d, "num_classes", c.data.num_classes);
  }
  if (j.contains("features")) {
    const json& f = j["features"];
    reject_unknown(f, {"small_branch", "large_branch", "mrcnn_dropout", "channels",
                       "se_reduction", "blocks", "units_per_block", "unit_hidden",
                       "depthwise_kernel"},
                   "model config features");
    if (f.contains("small_branch"))
      branch_from_json(f["small_branch"], c.features.small_branch, "small_branch");
    if (f.contains("large_branch"))
      branch_from_json(f["large_branch"], c.features.large_branch, "large_branch");
    get_if(f, "mrcnn_dropout", c.features.mrcnn_dropout);
    get_if(f, "channels", c.features.channels);
    get_if(f, "se_reduction", c.features.se_reduction);
    get_if(f, "blocks", c.features.blocks);
    get_if(f, "units_per_block", c.features.units_per_block);
    get_if(f, "unit_hidden", c.features.unit_hidden);
    get_if(f, "depthwise_kernel", c.features.depthwise_kernel);
  }
  get_if(j, "num_prototypes", c.num_prototypes);
  get_if(j, "proto_len", c.proto_len);
  get_if(j, "eps_sim", c.eps_sim);
  get_if(j, "eps_div", c.eps_div);
}

json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"batch_size", c.batch_size},
          {"patience", c.patience},
          {"max_epochs", c.max_epochs},
          {"seed", c.seed},
          {"projection_period", c.projection_period},
          {"final_projection", c.final_projection},
          {"threads", c.threads},
          {"weights",
           {{"lambda_class", c.weights.lambda_class},
            {"lambda_dist", c.weights.lambda_dist},
            {"lambda_r1", c.weights.lambda_r1},
            {"lambda_r2", c.weights.lambda_r2},
            {"lambda_l1", c.weights.lambda_l1}}}};
}

void train_config_from_json(const json& j, TrainConfig& c) {
  reject_unknown(j, {"learning_rate", "beta1", "beta2", "adam_eps", "batch_size",
                     "patience", "max_epochs", "seed", "projection_period",
                     "final_projection", "threads", "weights"},
                 "train config");
  get_if(j, "learning_rate", c.learning_rate);
  get_if(j, "beta1", c.beta1);
  get_if(j, "beta2", c.beta2);
  get_if(j, "adam_eps", c.adam_eps);
  get_if(j, "batch_size", c.batch_size);
  get_if(j, "patience", c.patience);
  get_if(j, "max_epochs", c.max_epochs);
  get_if(j, "seed", c.seed);
  get_if(j, "projection_period", c.projection_period);
  get_if(j, "final_projection", c.final_projection);
  get_if(j, "threads", c.threads);
  if (j.contains("weights")) {
    const json& w = j["weights"];
    reject_unknown(w, {"lambda_class", "lambda_dist", "lambda_r1", "lambda_r2",
                       "lambda_l1"},
                   "loss weights");
    get_if(w, "lambda_class", c.weights.lambda_class);
    get_if(w, "lambda_dist", c.weights.lambda_dist);
    get_if(w, "lambda_r1", c.weights.lambda_r1);
    get_if(w, "lambda_r2", c.weights.lambda_r2);
    get_if(w, "lambda_l1", c.weights.lambda_l1);
  }
}

json synth_config_to_json(const SynthConfig& c) {
  return {{"seed", c.seed},
          {"subjects", c.subjects},
          {"epochs_per_subject", c.epochs_per_subject},
          {"noise_sd", c.noise_sd},
          {"epoch_seconds", c.epoch_seconds},
          {"sampling_hz", c.sampling_hz},
          {"stage_persistence", c.stage_persistence},
          {"min_stage_fraction", c.min_stage_fraction}};
}

void synth_config_from_json(const json& j, SynthConfig& c) {
  reject_unknown(j, {"seed", "subjects", "epochs_per_subject", "noise_sd",
                     "epoch_seconds", "sampling_hz", "stage_persistence",
                     "min_stage_fraction"},
                 "synth config");
  get_if(j, "seed", c.seed);
  get_if(j, "subjects", c.subjects);
  get_if(j, "epochs_per_subject", c.epochs_per_subject);
  get_if(j, "noise_sd", c.noise_sd);
  get_if(j, "epoch_seconds", c.epoch_seconds);
  get_if(j, "sampling_hz", c.sampling_hz);
  get_if(j, "stage_persistence", c.stage_persistence);
  get_if(j, "min_stage_fraction", c.min_stage_fraction);
}

json summary_to_json(const TrainingSummary& s) {
  return {{"epochs_trained", s.epochs_trained},
          {"best_epoch", s.best_epoch},
          {"best_val_loss", s.best_val_loss},
          {"stopped_early", s.stopped_early},
          {"diverged", s.diverged},
          {"projected", s.projected},
          {"note", s.note}};
}

TrainingSummary summary_from_json(const json& j) {
  TrainingSummary s;
  get_if(j, "epochs_trained", s.epochs_trained);
  get_if(j, "best_epoch", s.best_epoch);
  if (j.contains("best_val_loss") && j["best_val_loss"].is_number())
    s.best_val_loss = j["best_val_loss"].get<double>();
  get_if(j, "stopped_early", s.stopped_early);
  get_if(j, "diverged", s.diverged);
  get_if(j, "projected", s.projected);
  get_if(j, "note", s.note);
  return s;
}

json fold_to_json(const FoldInfo& f) {
  return {{"fold", f.fold},
          {"fold_count", f.fold_count},
          {"fold_seed", f.fold_seed},
          {"val_subject_count", f.val_subject_count},
          {"train_subjects", f.train_subjects},
          {"val_subjects", f.val_subjects},
          {"test_subjects", f.test_subjects}};
}

FoldInfo fold_from_json(const json& j) {
  FoldInfo f;
  get_if(j, "fold", f.fold);
  get_if(j, "fold_count", f.fold_count);
  get_if(j, "fold_seed", f.fold_seed);
  get_if(j, "val_subject_count", f.val_subject_count);
  get_if(j, "train_subjects", f.train_subjects);
  get_if(j, "val_subjects", f.val_subjects);
  get_if(j, "test_subjects", f.test_subjects);
  return f;
}
}  // namespace

void save_checkpoint(const fs::path& path, Model& model,
                     const TrainingSummary& summary, const FoldInfo& fold) {
  ParamTable params = model.param_table();
  ParamTable buffers = model.buffer_table();

  json arrays = json::array();
  size_t offset = 0;
  auto add_entries = [&](const ParamTable& t) {
    for (const auto& e : t) {
      arrays.push_back({{"name", e.name},
                        {"dtype", "f64"},
                        {"shape", e.shape},
                        {"offset", offset},
                        {"count", e.data->size()}});
      offset += e.data->size() * sizeof(double);
    }
  };
  add_entries(params);
  add_entries(buffers);

  json proto_meta = json::array();
  for (const auto& m : model.bank.meta) {
    json pm;
    pm["projected"] = m.projected;
    if (m.projected) {
      pm["source"] = {{"subject_id", m.source.ref.subject_id},
                      {"epoch_index", m.source.ref.epoch_index},
                      {"patch_index", m.source.patch_index},
                      {"distance", m.source.distance}};
    }
    if (m.occlusion)
      pm["occlusion"] = {{"onset_s", m.occlusion->first},
                         {"duration_s", m.occlusion->second}};
    proto_meta.push_back(std::move(pm));
  }

  json header;
  header["format_version"] = 1;
  header["model_config"] = model_config_to_json(model.cfg);
  header["derived"] = {{"feature_k", model.feature_positions()},
                       {"feature_c", model.cfg.features.channels},
                       {"patch_count",
                        model.feature_positions() - model.cfg.proto_len + 1}};
  header["arrays"] = std::move(arrays);
  header["prototype_meta"] = std::move(proto_meta);
  header["training_summary"] = summary_to_json(summary);
  header["fold_info"] = fold_to_json(fold);

  const std::string header_text = header.dump();
  std::string out = std::string(kMagic) + "\n" + std::to_string(header_text.size()) +
                    "\n" + header_text + "\n";
  const size_t data_start = out.size();
  out.resize(data_start + offset);
  size_t pos = data_start;
  auto write_arrays = [&](const ParamTable& t) {
    for (const auto& e : t) {
      std::memcpy(out.data() + pos, e.data->data(), e.data->size() * sizeof(double));
      pos += e.data->size() * sizeof(double);
    }
  };
  write_arrays(params);
  write_arrays(buffers);
  write_file_bytes(path, out.data(), out.size());
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  const std::string_view view(bytes.data(), bytes.size());

  const size_t magic_end = view.find('\n');
  if (magic_end == std::string_view::npos || view.substr(0, magic_end) != kMagic)
    throw DataError("not a checkpoint file (bad version tag): " + path.string());
  const size_t len_end = view.find('\n', magic_end + 1);
  if (len_end == std::string_view::npos)
    throw DataError("truncated checkpoint header: " + path.string());
  const size_t header_len = static_cast<size_t>(
      std::stoull(std::string(view.substr(magic_end + 1, len_end - magic_end - 1))));
  const size_t header_begin = len_end + 1;
  if (header_begin + header_len + 1 > view.size())
    throw DataError("truncated checkpoint header: " + path.string());

  json header;
  try {
    header = json::parse(view.substr(header_begin, header_len));
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (header.at("format_version").get<int>() != 1)
    throw DataError("unsupported checkpoint format version");

  LoadedCheckpoint out;
  ModelConfig cfg;
  model_config_from_json(header.at("model_config"), cfg);
  out.model.init(cfg, /*seed=*/0);

  const size_t data_start = header_begin + header_len + 1;
  std::map<std::string, ParamEntry> by_name;
  for (auto& e : out.model.param_table()) by_name[e.name] = e;
  for (auto& e : out.model.buffer_table()) by_name[e.name] = e;

  size_t restored = 0;
  for (const auto& a : header.at("arrays")) {
    const std::string name = a.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw DataError("checkpoint array does not match the model: " + name);
    const size_t count = a.at("count").get<size_t>();
    if (count != it->second.data->size())
      throw DataError("checkpoint array size mismatch for " + name);
    const size_t off = data_start + a.at("offset").get<size_t>();
    if (off + count * sizeof(double) > bytes.size())
      throw DataError("checkpoint data truncated at array " + name);
    std::memcpy(it->second.data->data(), bytes.data() + off, count * sizeof(double));
    ++restored;
  }
  if (restored != by_name.size())
    throw DataError("checkpoint is missing arrays (got " + std::to_string(restored) +
                    " of " + std::to_string(by_name.size()) + ")");

  const json& pm = header.at("prototype_meta");
  for (size_t j = 0; j < pm.size() && j < out.model.bank.meta.size(); ++j) {
    auto& meta = out.model.bank.meta[j];
    meta.projected = pm[j].value("projected", false);
    if (pm[j].contains("source")) {
      const json& s = pm[j]["source"];
      meta.source.ref.subject_id = s.value("subject_id", std::string{});
      meta.source.ref.epoch_index = s.value("epoch_index", 0);
      meta.source.patch_index = s.value("patch_index", 0);
      meta.source.distance = s.value("distance", 0.0);
    }
    if (pm[j].contains("occlusion"))
      meta.occlusion = std::make_pair(pm[j]["occlusion"].value("onset_s", 0.0),
                                      pm[j]["occlusion"].value("duration_s", 0.0));
  }
  out.summary = summary_from_json(header.at("training_summary"));
  out.fold = fold_from_json(header.at("fold_info"));
  return out;
}

// --- public config text APIs -----------------------------------------------------

std::string model_config_to_json_text(const ModelConfig& cfg) {
  return model_config_to_json(cfg).dump(2) + "\n";
}
std::string train_config_to_json_text(const TrainConfig& cfg) {
  return train_config_to_json(cfg).dump(2) + "\n";
}
std::string synth_config_to_json_text(const SynthConfig& cfg) {
  return synth_config_to_json(cfg).dump(2) + "\n";
}

namespace {
json parse_or_throw(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed ") + what + ": " + e.what());
  }
}
}  // namespace

void apply_model_config_json(ModelConfig& cfg, const std::string& text) {
  model_config_from_json(parse_or_throw(text, "model config"), cfg);
}
void apply_train_config_json(TrainConfig& cfg, const std::string& text) {
  train_config_from_json(parse_or_throw(text, "train config"), cfg);
}
void apply_synth_config_json(SynthConfig& cfg, const std::string& text) {
  synth_config_from_json(parse_or_throw(text, "synth config"), cfg);
}

}  // namespace wavestage
