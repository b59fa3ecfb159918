#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "wavestage/evaluation.hpp"
#include "wavestage/model.hpp"

namespace wavestage {

struct TrainConfig {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 64;
  int patience = 50;
  int max_epochs = 200;
  uint64_t seed = 1;
  // Prototypes are projected onto their nearest training patches every
  // `projection_period` epochs (0 disables the periodic projection), plus a
  // mandatory final projection of the returned checkpoint unless disabled.
  int projection_period = 10;
  bool final_projection = true;
  LossWeights weights;
  int threads = 0;  // 0 = hardware concurrency

  void validate() const;
};

struct TrainingSummary {
  int epochs_trained = 0;
  int best_epoch = -1;
  double best_val_loss = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
  bool diverged = false;
  bool projected = false;
  std::string note;
};

struct FoldInfo {
  int fold = -1;
  int fold_count = 0;
  uint64_t fold_seed = 0;
  int val_subject_count = 0;
  std::vector<std::string> train_subjects, val_subjects, test_subjects;
};

struct TrainResult {
  Model model;
  TrainingSummary summary;
};

struct EpochLog {
  int epoch = 0;
  double train_total_mean = 0.0;
  LossBreakdown val_loss;
  double val_accuracy = 0.0;
  bool projected = false;
  double full_r1 = 0.0, full_r2 = 0.0;  // full-set values at projection epochs
};

// Adam over aligned parameter/gradient tables.
struct AdamState {
  double lr = 5e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<Vec> m, v;

  void init(const ParamTable& params);
  void step(const ParamTable& params, const ParamTable& grads);
};

// Mini-batch training on one fold's windows with early stopping on the
// validation loss; returns the checkpoint with the best validation loss
// (finally projected unless disabled). Deterministic given cfg.seed; the
// result is independent of the thread count.
TrainResult train_fold(const ModelConfig& mcfg, const TrainConfig& cfg,
                       const std::vector<EpochWindow>& train_windows,
                       const std::vector<EpochWindow>& val_windows,
                       const std::filesystem::path* log_file = nullptr,
                       const std::function<void(const EpochLog&)>& on_epoch = {});

// Evaluation-mode loss of Eq-style total over a window set (batched; batch
// norm uses frozen running statistics).
LossBreakdown evaluate_loss(const Model& model, const std::vector<EpochWindow>& windows,
                            const LossWeights& weights, int batch_size, int threads);

struct PredictionRecord {
  WindowRef ref;
  uint8_t label = 0;
  StagePrediction pred;
  Vec score;
};

std::vector<PredictionRecord> predict_windows(const Model& model,
                                              const std::vector<EpochWindow>& windows,
                                              int threads);

// Streams eval-mode features of `windows` and replaces each prototype with
// its nearest patch. Returns the pre-projection full-set R1 and R2 values.
std::pair<double, double> project_prototypes_stream(
    Model& model, const std::vector<EpochWindow>& windows, int threads);

// --- cross-validation ---------------------------------------------------------

struct FoldOutcome {
  FoldInfo info;
  TrainingSummary summary;
  ConfusionMatrix confusion;
  MetricsReport metrics;
};

struct CrossValidationResult {
  std::vector<FoldOutcome> folds;
  ConfusionMatrix aggregate;
  MetricsReport aggregate_metrics;
};

// Per-fold train/test over a subject-wise fold assignment; test confusion
// matrices are summed element-wise across folds. `save_fold`, when given, is
// called with each fold's trained model (e.g. to write checkpoints).
CrossValidationResult cross_validate(
    const Dataset& dataset, const FoldAssignment& folds, const ModelConfig& mcfg,
    const TrainConfig& cfg,
    const std::function<void(int fold, const TrainResult&)>& save_fold = {});

// --- ensembling -----------------------------------------------------------------

struct Ensemble {
  std::vector<Model> members;

  void validate() const;  // members must agree on classes and window contract
};

// Element-wise sum of the member logits; activations and probabilities are
// derived from the summed logits.
StagePrediction ensemble_predict(const Ensemble& e, std::span<const double> signal);

std::vector<PredictionRecord> ensemble_predict_windows(
    const Ensemble& e, const std::vector<EpochWindow>& windows, int threads);

// Windows of every listed subject, built from normalized recordings.
std::vector<EpochWindow> subject_windows(const std::vector<Recording>& normalized,
                                         const std::vector<std::string>& subjects,
                                         const DatasetConfig& dcfg);

}  // namespace wavestage
