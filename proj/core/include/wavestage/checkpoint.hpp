#pragma once

#include <filesystem>
#include <string>

#include "wavestage/model.hpp"
#include "wavestage/synth.hpp"
#include "wavestage/training.hpp"

namespace wavestage {

// Checkpoint container: a text header (version tag, JSON with the full model
// configuration, derived shape facts, the array directory and prototype
// metadata) followed by raw little-endian IEEE-754 float64 arrays.
//
//   line 1: "WAVESTAGE-CKPT v1"
//   line 2: decimal byte length of the JSON header
//   then:   the JSON header, a newline, and the array data at the offsets
//           recorded in the directory (relative to the data section start).
//
// Loading rebuilds the model from the embedded configuration alone and then
// restores every array bit-exactly.

void save_checkpoint(const std::filesystem::path& path, Model& model,
                     const TrainingSummary& summary, const FoldInfo& fold);

struct LoadedCheckpoint {
  Model model;
  TrainingSummary summary;
  FoldInfo fold;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// --- config (de)serialization, shared by checkpoints, manifests and the CLI ---

std::string model_config_to_json_text(const ModelConfig& cfg);
std::string train_config_to_json_text(const TrainConfig& cfg);
std::string synth_config_to_json_text(const SynthConfig& cfg);

// Each applies the keys present in `json_text` onto the given struct, leaving
// absent fields untouched, and rejects unknown keys.
void apply_model_config_json(ModelConfig& cfg, const std::string& json_text);
void apply_train_config_json(TrainConfig& cfg, const std::string& json_text);
void apply_synth_config_json(SynthConfig& cfg, const std::string& json_text);

}  // namespace wavestage
