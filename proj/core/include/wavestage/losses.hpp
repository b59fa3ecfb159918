#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "wavestage/decision.hpp"
#include "wavestage/nd.hpp"
#include "wavestage/wave_sensing.hpp"

namespace wavestage {

struct LossWeights {
  double lambda_class = 50.0;
  double lambda_dist = 8.0;
  double lambda_r1 = 9.0;
  double lambda_r2 = 18.0;
  double lambda_l1 = 0.3;
};

struct LossBreakdown {
  double l_class = 0.0;
  double l_dist = 0.0;
  double l_r1 = 0.0;
  double l_r2 = 0.0;
  double l_l1 = 0.0;
  double total = 0.0;
  bool prob_clamped = false;  // a true-class probability hit the 1e-12 floor
};

// Mean over the batch of -log P(true class). Probabilities below 1e-12 are
// clamped before the log and flagged.
double class_loss(const std::vector<Vec>& probabilities,
                  std::span<const uint8_t> labels, bool* clamped = nullptr);
void class_loss_backward(const std::vector<Vec>& probabilities,
                         std::span<const uint8_t> labels, double upstream,
                         std::vector<Vec>& dprobs);

// Inverse-log penalty on the mean nearest-neighbour squared distance between
// prototypes (symmetric reading: each prototype's minimum squared distance to
// any other, averaged). The raw form 1/(log(mean)+eps) is extended linearly
// where its denominator would drop below eps, so the penalty stays positive,
// finite and strictly decreasing in the mean distance; collapsed prototypes
// receive a large finite value instead of an undefined log(0).
double diversity_loss(const PrototypeBank& bank, double eps_div);
void diversity_loss_backward(const PrototypeBank& bank, double eps_div,
                             double upstream, Mat& gw);

// Mean over prototypes of the minimum squared distance to any patch row.
double r1_loss(const PrototypeBank& bank, const Mat& patches);
// Mean over patch rows of the minimum squared distance to any prototype.
double r2_loss(const PrototypeBank& bank, const Mat& patches);

// Sum of absolute values of the decision FC weights (bias excluded).
double l1_loss(const DecisionHead& head);
void l1_loss_backward(const DecisionHead& head, double upstream, Mat& gfc);

// Weighted sum per the configured lambdas; throws NumericError naming the
// first non-finite term.
LossBreakdown total_loss(double l_class, double l_dist, double l_r1, double l_r2,
                         double l_l1, const LossWeights& w,
                         bool prob_clamped = false);

}  // namespace wavestage
