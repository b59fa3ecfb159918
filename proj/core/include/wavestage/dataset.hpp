#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace wavestage {

// Five-stage scoring. Codes are fixed: Wake=0, N1=1, N2=2, N3=3, REM=4.
inline constexpr int kNumStages = 5;
inline constexpr std::array<const char*, kNumStages> kStageNames{"Wake", "N1", "N2",
                                                                 "N3", "REM"};

struct DatasetConfig {
  int epoch_seconds = 30;  // E
  int sampling_hz = 100;   // F
  int window_len = 10;     // L, epochs per input window
  int num_classes = kNumStages;

  int epoch_samples() const { return epoch_seconds * sampling_hz; }
  int window_samples() const { return epoch_samples() * window_len; }
  void validate() const;
};

// One subject's continuous single-channel signal plus per-epoch stage labels.
// samples.size() == labels.size() * epoch_samples.
struct Recording {
  std::string subject_id;
  std::vector<double> samples;
  std::vector<uint8_t> labels;

  int num_epochs() const { return static_cast<int>(labels.size()); }
};

// A dataset as stored in the on-disk container: the two sampling parameters
// plus one recording per subject. window_len is a model-side parameter and is
// not part of the container.
struct Dataset {
  int epoch_seconds = 30;
  int sampling_hz = 100;
  std::vector<Recording> recordings;

  int epoch_samples() const { return epoch_seconds * sampling_hz; }
  const Recording* find(const std::string& subject_id) const;
};

// A length-L window of consecutive epochs. `signal` views the recording's
// sample buffer; the Dataset that produced it must outlive the window.
struct EpochWindow {
  std::string subject_id;
  int epoch_index = 0;  // index of the *last* epoch in the window
  uint8_t label = 0;    // label of that last epoch
  std::span<const double> signal;
};

struct FoldAssignment {
  int fold_count = 0;
  std::map<std::string, int> subject_to_fold;
  // Per fold: subjects held out of that fold's training split for validation.
  std::vector<std::vector<std::string>> validation_subjects;

  std::vector<std::string> test_subjects(int fold) const;
  std::vector<std::string> train_subjects(int fold) const;
};

// --- container I/O --------------------------------------------------------
//
// Layout of a dataset directory:
//   manifest.json   {"epoch_seconds":E, "sampling_hz":F, "records":[
//                     {"subject_id":id, "signal_file":f, "labels_file":g,
//                      "num_epochs":n}, ...]}
//   <signal_file>   raw 32-bit little-endian IEEE-754 floats, n*E*F values
//   <labels_file>   raw unsigned bytes, one stage code {0..4} per epoch

Dataset load_dataset(const std::filesystem::path& manifest_path);
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);

// Per-recording z-score (population SD). A constant signal maps to all zeros;
// `warned`, when given, is set if that degenerate path was taken.
Recording normalize_recording(const Recording& r, bool* warned = nullptr);

// All complete L-epoch windows of one recording. A recording shorter than L
// epochs yields an empty list (and sets `warned`).
std::vector<EpochWindow> make_windows(const Recording& r, const DatasetConfig& cfg,
                                      bool* warned = nullptr);

// Subject-wise k-fold assignment. Deterministic in `seed`; each fold also
// reserves `val_subjects` subjects from its training split for validation.
FoldAssignment assign_folds(const std::vector<Recording>& recordings, int k,
                            int val_subjects, uint64_t seed);

}  // namespace wavestage
