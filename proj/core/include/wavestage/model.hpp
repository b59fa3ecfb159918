#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "wavestage/dataset.hpp"
#include "wavestage/decision.hpp"
#include "wavestage/feature_extractor.hpp"
#include "wavestage/losses.hpp"
#include "wavestage/wave_sensing.hpp"

namespace wavestage {

struct ModelConfig {
  DatasetConfig data;
  FeatureExtractorConfig features;
  int num_prototypes = 8;  // M
  int proto_len = 1;       // K1
  double eps_sim = 1e-4;
  double eps_div = 1e-4;

  void validate() const;
};

// The full network: feature extractor, prototype bank, decision head.
class Model {
public:
  ModelConfig cfg;
  FeatureExtractor features;
  PrototypeBank bank;
  DecisionHead head;

  void init(const ModelConfig& c, uint64_t seed);

  // Learnable parameters and non-learned buffers (batch-norm running stats),
  // enumerated in a fixed order; both are checkpointed.
  ParamTable param_table();
  ParamTable buffer_table();
  void zero_params();

  // K of the latent map for the configured window length.
  int feature_positions() const;

  // Evaluation-mode forward passes.
  FeatureMap extract(std::span<const double> x) const;

  struct WindowEval {
    StagePrediction pred;
    Vec score;  // concatenated [WScore, PScore], length 2M
    int nearest_prototype = 0;  // argmin over the distance map; ties -> lowest j
  };
  WindowEval evaluate_window(std::span<const double> x) const;
};

// Train-mode forward and backward through the wave-sensing head: distances,
// similarities, both estimator scores with batch normalization, the decision
// layer, and all five loss terms. Feature maps are treated as inputs; when
// `dfeats` is given, d(total)/d(feature map) is returned per window, and
// parameter gradients accumulate into `gbank`/`ghead` when given.
//
// The R1/R2 patch population is exactly the batch's patches, so their minima
// reuse the per-window distance maps.
struct HeadBatchOutput {
  LossBreakdown loss;
  std::vector<StagePrediction> preds;
  std::vector<Vec> scores;
};

HeadBatchOutput head_batch_train(const PrototypeBank& bank, DecisionHead& head,
                                 const std::vector<FeatureMap>& feats,
                                 std::span<const uint8_t> labels,
                                 const LossWeights& weights, double eps_div,
                                 bool update_running, std::vector<Mat>* dfeats,
                                 PrototypeBank* gbank, DecisionHead* ghead);

// Evaluation-mode head pass on one window's features.
Model::WindowEval head_eval(const PrototypeBank& bank, const DecisionHead& head,
                            const FeatureMap& fm);

}  // namespace wavestage
