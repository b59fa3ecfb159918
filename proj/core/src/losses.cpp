#include "wavestage/losses.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "wavestage/errors.hpp"

namespace wavestage {

namespace {
constexpr double kProbFloor = 1e-12;
constexpr double kMeanDistFloor = 1e-12;
// Floor for the diversity denominator log(mean)+eps; below it the inverse is
// continued linearly with the matching slope.
constexpr double kDenFloor = 0.05;

double sq_dist(const double* a, const double* b, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}
}  // namespace

double class_loss(const std::vector<Vec>& probabilities,
                  std::span<const uint8_t> labels, bool* clamped) {
  if (probabilities.size() != labels.size())
    throw NumericError("class loss: batch size mismatch");
  if (probabilities.empty()) throw NumericError("class loss: empty batch");
  double total = 0.0;
  for (size_t i = 0; i < labels.size(); ++i) {
    double p = probabilities[i][labels[i]];
    if (p < kProbFloor) {
      p = kProbFloor;
      if (clamped) *clamped = true;
    }
    total += -std::log(p);
  }
  return total / static_cast<double>(labels.size());
}

void class_loss_backward(const std::vector<Vec>& probabilities,
                         std::span<const uint8_t> labels, double upstream,
                         std::vector<Vec>& dprobs) {
  const size_t n = labels.size();
  dprobs.resize(n);
  for (size_t i = 0; i < n; ++i) {
    dprobs[i].assign(probabilities[i].size(), 0.0);
    const double p = probabilities[i][labels[i]];
    if (p >= kProbFloor)
      dprobs[i][labels[i]] = upstream * (-1.0 / p) / static_cast<double>(n);
    // At the clamp the loss is locally constant in p.
  }
}

namespace {
// mean over prototypes of min squared distance to any other prototype, plus
// the argmin partner of each prototype for the backward pass.
double mean_min_pairwise(const PrototypeBank& bank, std::vector<int>* partner) {
  const int m = bank.num;
  const int dim = bank.patch_dim();
  if (partner) partner->assign(static_cast<size_t>(m), -1);
  double mean = 0.0;
  for (int j = 0; j < m; ++j) {
    double best = std::numeric_limits<double>::infinity();
    int who = -1;
    for (int i = 0; i < m; ++i) {
      if (i == j) continue;
      const double d = sq_dist(bank.w.row(j), bank.w.row(i), dim);
      if (d < best) {
        best = d;
        who = i;
      }
    }
    mean += best;
    if (partner) (*partner)[static_cast<size_t>(j)] = who;
  }
  return mean / m;
}
}  // namespace

double diversity_loss(const PrototypeBank& bank, double eps_div) {
  if (bank.num < 2)
    throw ConfigError("diversity loss needs at least two prototypes");
  const double mean = std::max(mean_min_pairwise(bank, nullptr), kMeanDistFloor);
  const double den = std::log(mean) + eps_div;
  if (den >= kDenFloor) return 1.0 / den;
  return 1.0 / kDenFloor + (kDenFloor - den) / (kDenFloor * kDenFloor);
}

void diversity_loss_backward(const PrototypeBank& bank, double eps_div,
                             double upstream, Mat& gw) {
  std::vector<int> partner;
  const double mean_raw = mean_min_pairwise(bank, &partner);
  if (mean_raw <= kMeanDistFloor) return;  // flat at the clamp
  const double den = std::log(mean_raw) + eps_div;
  const double dl_dden =
      den >= kDenFloor ? -1.0 / (den * den) : -1.0 / (kDenFloor * kDenFloor);
  const double dl_dmean = upstream * dl_dden / mean_raw;

  const int m = bank.num;
  const int dim = bank.patch_dim();
  for (int j = 0; j < m; ++j) {
    const int i = partner[static_cast<size_t>(j)];
    const double scale = dl_dmean * 2.0 / m;
    const double* wj = bank.w.row(j);
    const double* wi = bank.w.row(i);
    double* gj = gw.row(j);
    double* gi = gw.row(i);
    for (int q = 0; q < dim; ++q) {
      const double diff = wj[q] - wi[q];
      gj[q] += scale * diff;
      gi[q] -= scale * diff;
    }
  }
}

double r1_loss(const PrototypeBank& bank, const Mat& patches) {
  if (patches.rows == 0) throw NumericError("r1 loss: empty patch set");
  if (patches.cols != bank.patch_dim())
    throw NumericError("r1 loss: patch dimension mismatch");
  double total = 0.0;
  for (int j = 0; j < bank.num; ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < patches.rows; ++i)
      best = std::min(best, sq_dist(bank.w.row(j), patches.row(i), patches.cols));
    total += best;
  }
  return total / bank.num;
}

double r2_loss(const PrototypeBank& bank, const Mat& patches) {
  if (bank.num == 0) throw NumericError("r2 loss: empty prototype bank");
  if (patches.rows == 0) throw NumericError("r2 loss: empty patch set");
  if (patches.cols != bank.patch_dim())
    throw NumericError("r2 loss: patch dimension mismatch");
  double total = 0.0;
  for (int i = 0; i < patches.rows; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < bank.num; ++j)
      best = std::min(best, sq_dist(bank.w.row(j), patches.row(i), patches.cols));
    total += best;
  }
  return total / patches.rows;
}

double l1_loss(const DecisionHead& head) {
  double total = 0.0;
  for (double v : head.fc_w.d) total += std::abs(v);
  return total;
}

void l1_loss_backward(const DecisionHead& head, double upstream, Mat& gfc) {
  for (size_t i = 0; i < head.fc_w.d.size(); ++i) {
    const double v = head.fc_w.d[i];
    gfc.d[i] += upstream * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
  }
}

LossBreakdown total_loss(double l_class, double l_dist, double l_r1, double l_r2,
                         double l_l1, const LossWeights& w, bool prob_clamped) {
  const struct {
    const char* name;
    double value;
  } terms[] = {{"class", l_class},
               {"dist", l_dist},
               {"r1", l_r1},
               {"r2", l_r2},
               {"l1", l_l1}};
  for (const auto& t : terms)
    if (!std::isfinite(t.value))
      throw NumericError(std::string("loss term '") + t.name + "' is not finite");

  LossBreakdown b;
  b.l_class = l_class;
  b.l_dist = l_dist;
  b.l_r1 = l_r1;
  b.l_r2 = l_r2;
  b.l_l1 = l_l1;
  b.prob_clamped = prob_clamped;
  b.total = w.lambda_class * l_class + w.lambda_dist * l_dist + w.lambda_r1 * l_r1 +
            w.lambda_r2 * l_r2 + w.lambda_l1 * l_l1;
  return b;
}

}  // namespace wavestage
