#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wavestage/feature_extractor.hpp"
#include "wavestage/nd.hpp"
#include "wavestage/rng.hpp"

namespace wavestage {

// Identifies one input window by its recording and last epoch.
struct WindowRef {
  std::string subject_id;
  int epoch_index = 0;

  friend bool operator==(const WindowRef&, const WindowRef&) = default;
  friend auto operator<=>(const WindowRef& a, const WindowRef& b) {
    if (auto c = a.subject_id <=> b.subject_id; c != 0) return c;
    return a.epoch_index <=> b.epoch_index;
  }
};

struct PrototypeSource {
  WindowRef ref;
  int patch_index = 0;
  double distance = 0.0;
};

// M learnable wave prototypes of shape K1 x C, stored flattened per row.
struct PrototypeBank {
  int num = 0;        // M
  int patch_len = 1;  // K1
  int channels = 0;   // C
  Mat w;              // [M][K1 * C]

  struct Meta {
    bool projected = false;
    PrototypeSource source;
    std::optional<std::pair<double, double>> occlusion;  // (onset_s, duration_s)
  };
  std::vector<Meta> meta;

  // Uniform random init in [0, 1) per element.
  void init(int m, int k1, int c, Rng& rng);
  int patch_dim() const { return patch_len * channels; }
  void visit_params(ParamTable& t);
};

// Patches of a feature map: P = K - K1 + 1 sliding windows of K1 consecutive
// time rows. Returned flattened, one row per patch.
int patch_count(const FeatureMap& s, int k1);
Mat extract_patches(const FeatureMap& s, int k1);

// Squared L2 distance between every prototype and every patch: [M][P].
Mat distance_map(const FeatureMap& s, const PrototypeBank& bank);

// Accumulates d(loss)/d(feature map) into dfeat (K x C, pre-sized) and
// d(loss)/d(prototypes) into gw ([M][K1*C], pre-sized) given dDist.
void distance_map_backward(const FeatureMap& s, const PrototypeBank& bank,
                           const Mat& ddist, Mat* dfeat, Mat* gw);

// A precomputed evaluation-mode feature set (window ref + latent map). Tests
// build these directly; production code streams them from a FeatureExtractor.
using FeatureSet = std::vector<std::pair<WindowRef, FeatureMap>>;

struct PatchLocation {
  WindowRef ref;
  int patch_index = 0;
  double distance = 0.0;
};

// Global minimizer of the prototype-to-patch distance over the feature set.
// Ties break lexicographically by (subject_id, epoch_index, patch_index).
PatchLocation nearest_patch(const PrototypeBank& bank, int j,
                            const FeatureSet& features);

// Top-n nearest patches for prototype j, keeping only the best patch of each
// distinct epoch so the list shows distinct evidence.
std::vector<PatchLocation> nearest_patches_per_epoch(const PrototypeBank& bank,
                                                     int j,
                                                     const FeatureSet& features,
                                                     int n);

// Replaces every prototype with its nearest patch in the feature set and
// records the source in the bank metadata. Idempotent.
void project_prototypes(PrototypeBank& bank, const FeatureSet& features);

// --- occlusion sensitivity ---------------------------------------------------

struct OcclusionConfig {
  double win_s = 1.0;
  double stride_s = 0.25;
};

struct OcclusionResult {
  double onset_s = 0.0;     // occlusion interval with the largest distance rise
  double duration_s = 0.0;  // equals win_s
  Vec curve;                // distance increase per occlusion position
};

// Number of occlusion positions for a signal of `samples` samples.
int occlusion_positions(int samples, int sampling_hz, const OcclusionConfig& occl);

// Distance-increase curves for all prototypes at once ([M][positions]); the
// feature extraction per occlusion position is shared across prototypes.
Mat occlusion_curves(const PrototypeBank& bank, const FeatureExtractor& fx,
                     std::span<const double> signal, int sampling_hz,
                     const OcclusionConfig& occl, int threads = 0);

OcclusionResult occlusion_localize(const PrototypeBank& bank, int j,
                                   const FeatureExtractor& fx,
                                   std::span<const double> signal, int sampling_hz,
                                   const OcclusionConfig& occl, int threads = 0);

}  // namespace wavestage
