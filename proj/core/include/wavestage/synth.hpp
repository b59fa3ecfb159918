#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wavestage/dataset.hpp"
#include "wavestage/rng.hpp"

namespace wavestage {

enum class Waveform : int {
  Alpha = 0,      // 8-13 Hz rhythm (Wake)
  Lamf,           // 4-7 Hz low-amplitude mixed-frequency activity (N1)
  Spindle,        // 12-14 Hz burst (N2, some N3)
  KComplex,       // biphasic transient, ~0.7 s (N2)
  Delta,          // <= 2 Hz, high amplitude (N3)
  Sawtooth,       // 2-6 Hz asymmetric ramps (REM)
  RemArtifact,    // sharp ocular deflection, < 0.5 s (REM, Wake)
  BlinkArtifact,  // step-decay ocular transient (Wake)
};
inline constexpr int kNumWaveforms = 8;
const char* waveform_name(Waveform w);
Waveform waveform_from_name(const std::string& name);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct WaveformTemplate {
  Waveform name;
  Interval freq_hz;        // oscillation band; transients use pulse timescales
  Interval duration_s;
  Interval amplitude;      // relative to the background noise floor
};

// The fixed template bank. Frequency bands follow the AASM stage cues.
const std::array<WaveformTemplate, kNumWaveforms>& waveform_bank();

struct PlantedEvent {
  Waveform
      kind;
  double onset_s = 0.0;     // relative to the epoch start
  double duration_s = 0.0;
};

struct EpochEvents {
  std::string subject_id;
  int epoch_index = 0;
  std::vector<PlantedEvent> events;
};

using PlantedEventLog = std::vector<EpochEvents>;

// Per-stage composition rules used by the generator. Coverages are fractions
// of the epoch duration; counts are event counts per epoch.
struct StageMix {
  Interval wake_alpha_coverage{0.45, 0.70};
  int wake_blink_min = 1, wake_blink_max = 3;
  int wake_rem_artifact_min = 0, wake_rem_artifact_max = 2;

  Interval n1_lamf_coverage{0.55, 0.80};  // AASM: > 50% LAMF

  int n2_spindle_min = 1, n2_spindle_max = 4;
  double n2_kcomplex_prob = 0.85;
  int n2_kcomplex_min = 1, n2_kcomplex_max = 3;

  Interval n3_delta_coverage{0.30, 0.55};  // AASM: > 20% delta
  int n3_spindle_min = 0, n3_spindle_max = 2;

  Interval rem_sawtooth_coverage{0.20, 0.40};
  int rem_artifact_min = 1, rem_artifact_max = 3;
};

struct SynthConfig {
  uint64_t seed = 7;
  int subjects = 6;
  int epochs_per_subject = 200;
  double noise_sd = 0.3;  // 1/f-shaped background, relative amplitude
  int epoch_seconds = 30;
  int sampling_hz = 100;
  // Stage persistence of the transition chain: P(stay) per epoch. Switches go
  // to one of the other four stages uniformly, so the stationary distribution
  // is uniform over the five stages.
  double stage_persistence = 0.97;
  // Every subject must see at least this fraction of epochs in each stage;
  // chains violating it are resampled from a derived seed.
  double min_stage_fraction = 0.08;
  StageMix stage_mix;

  int epoch_samples() const { return epoch_seconds * sampling_hz; }
};

// One epoch of synthetic signal for the given stage. Appends the planted
// events (onsets relative to the epoch) to `events`.
std::vector<double> generate_epoch(int stage, const SynthConfig& cfg, Rng& rng,
                                   std::vector<PlantedEvent>& events);

// Simulates the stage-transition chain for one subject. Exposed so tests can
// compare generated label statistics against independent chain simulations.
std::vector<uint8_t> simulate_stage_chain(const SynthConfig& cfg, uint64_t subject_seed);

struct SynthResult {
  Dataset dataset;
  PlantedEventLog event_log;
};

// Generates the dataset in memory.
SynthResult generate_synthetic(const SynthConfig& cfg);

// Generates and writes a dataset directory in the standard container format,
// plus the event-log sidecar `events.jsonl` (one JSON object per epoch).
void generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// Sidecar I/O.
void save_event_log(const std::filesystem::path& file, const PlantedEventLog& log);
PlantedEventLog load_event_log(const std::filesystem::path& file);

}  // namespace wavestage
