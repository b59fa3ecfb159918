#pragma once

#include <vector>

#include "wavestage/layers.hpp"
#include "wavestage/nd.hpp"

namespace wavestage {

// Batch normalization over a batch of fixed-length vectors (one channel per
// prototype). Training mode normalizes with batch statistics and refreshes the
// running estimates; evaluation mode normalizes with the frozen running
// statistics.
struct BatchNormVec {
  int dim = 0;
  double eps = 1e-5;
  double momentum = 0.1;
  Vec gamma, beta;
  Vec run_mean, run_var;

  struct BatchStats {
    Vec mean, inv_sd;
  };

  void init(int d);
  void forward_train(const std::vector<Vec>& x, std::vector<Vec>& y,
                     BatchStats& stats, bool update_running = true);
  void forward_eval(const Vec& x, Vec& y) const;
  void backward(const std::vector<Vec>& x, const BatchStats& stats,
                const std::vector<Vec>& dy, std::vector<Vec>& dx,
                BatchNormVec& g) const;
  void visit_params(const std::string& prefix, ParamTable& t);
  void visit_buffers(const std::string& prefix, ParamTable& t);
};

// The decision head: one normalization per estimator path plus the final
// fully connected layer feeding the per-stage sigmoids.
struct DecisionHead {
  int m = 0;            // prototypes
  int num_classes = 5;
  double eps_sim = 1e-4;
  BatchNormVec wbn;     // waveform-estimator path
  BatchNormVec pbn;     // proportion-estimator path
  Mat fc_w;             // [2M][num_classes]
  Vec fc_b;             // [num_classes]

  void init(int prototypes, int classes, double eps, Rng& rng);
  void visit_params(ParamTable& t);
  void visit_buffers(ParamTable& t);
};

struct StagePrediction {
  Vec logits;         // pre-sigmoid FC outputs, length num_classes
  Vec activations;    // sigmoid(logits), in (0,1)
  Vec probabilities;  // activations normalized to sum 1
  int predicted = 0;  // argmax; ties break toward the lower stage code
};

// Entry-wise log((d+1)/(d+eps)); strictly decreasing in d for d >= 0.
Mat similarity_map(const Mat& dist, double eps_sim);
// d(loss)/d(dist) given d(loss)/d(similarity).
void similarity_backward(const Mat& dist, double eps_sim, const Mat& dsim,
                         Mat& ddist);

// Row-wise pooling over patches. argmax, when given, records the winning
// patch per prototype (first maximum wins).
Vec max_pool_rows(const Mat& sim, std::vector<int>* argmax = nullptr);
Vec mean_pool_rows(const Mat& sim);

// Evaluation-mode estimator scores: ReLU(BatchNorm(pool(similarity))).
Vec wscore_eval(const Mat& sim, const DecisionHead& head);
Vec pscore_eval(const Mat& sim, const DecisionHead& head);

// Affine decision on the concatenated score vector, then sigmoid and
// normalization to a distribution.
StagePrediction decide(const Vec& score, const DecisionHead& head);

// contribution(i, c) = score[i] * fc_w[i][c]; column sums plus bias equal the
// logits exactly.
Mat contribution_matrix(const Vec& score, const DecisionHead& head);

// Backward through sigmoid + normalization: given d(loss)/d(probabilities),
// produces d(loss)/d(logits).
void prediction_backward(const StagePrediction& pred, const Vec& dprobs,
                         Vec& dlogits);

}  // namespace wavestage
