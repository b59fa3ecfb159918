#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wavestage/model.hpp"
#include "wavestage/training.hpp"

namespace wavestage {

// One nearest-segment entry on a prototype card.
struct NearestSegment {
  WindowRef ref;       // window whose features contain the patch
  int patch_index = 0;
  double distance = 0.0;
  double onset_s = 0.0;  // direct receptive field of the patch, window time
  double span_s = 0.0;
  int absolute_epoch = 0;  // epoch of the recording holding the patch centre
};

struct PrototypeCard {
  int prototype = 0;
  std::vector<NearestSegment> nearest;  // ascending by distance, <= n entries
  std::optional<std::pair<double, double>> occlusion;  // (onset_s, duration_s)
  Vec sensitivity_curve;
  Vec we_weights;  // decision weights of the waveform estimator, per stage
  Vec pe_weights;  // decision weights of the proportion estimator, per stage
};

struct ExplanationEntry {
  int score_index = 0;  // 0..2M-1 (WE rows first, then PE rows)
  double contribution = 0.0;
};

struct ExplanationReport {
  WindowRef ref;
  int actual = -1;  // -1 when the true stage is unknown
  int predicted = 0;
  Vec logits, probabilities;
  Vec score;    // 2M
  Mat contributions;  // [2M][classes]
  // Per stage, score entries ranked by descending contribution.
  std::vector<std::vector<ExplanationEntry>> top_per_stage;
};

struct ErrorScoreGroup {
  int stage = 0;
  int prototype = 0;
  bool waveform_estimator = true;  // WE vs PE
  double mean_correct = 0.0;
  double mean_error = 0.0;
  int64_t n_correct = 0;
  int64_t n_error = 0;
};

struct ErrorScoreSummary {
  std::vector<ErrorScoreGroup> groups;
  std::vector<int> stages_without_instances;  // omitted stages, flagged
  std::vector<int> stages_without_errors;     // error-group means absent
};

// Full forward pass of one window with the reasoning captured. Requires a
// projected prototype bank (the visualization of prototypes needs sources).
ExplanationReport explain(const Model& model, const EpochWindow& window,
                          int top_k = 3);

std::string explanation_to_json(const ExplanationReport& r, const Model& model);

// Prototype cards over the training windows: top-n nearest segments (best
// patch per distinct epoch), occlusion localization on each prototype's
// projection source window, and the decision-head weight rows. Writes the
// occlusion interval into the bank metadata of `model`.
std::vector<PrototypeCard> build_prototype_cards(
    Model& model, const std::vector<EpochWindow>& train_windows,
    const OcclusionConfig& occl, int top_n = 3, int threads = 0);

std::string cards_to_json(const std::vector<PrototypeCard>& cards,
                          const Model& model);

// Mean Score per (stage, prototype, estimator) over correctly vs incorrectly
// classified windows. Group counts are conserved per stage.
ErrorScoreSummary error_score_summary(const std::vector<PredictionRecord>& records,
                                      int num_prototypes);

std::string error_summary_to_json(const ErrorScoreSummary& s);
std::string error_summary_to_csv(const ErrorScoreSummary& s);

// Flat score-embedding table for external projection tools, ordered by window
// ref: subject, epoch, stage, nearest prototype, then the 2M score entries.
std::string export_score_embeddings(const std::vector<PredictionRecord>& records,
                                    int num_prototypes);

}  // namespace wavestage
