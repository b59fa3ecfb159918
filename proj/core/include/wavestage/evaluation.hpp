#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

#include "wavestage/dataset.hpp"

namespace wavestage {

// Rows = actual class, columns = predicted class.
struct ConfusionMatrix {
  std::array<std::array<int64_t, kNumStages>, kNumStages> counts{};

  int64_t total() const;
  int64_t trace() const;
  int64_t row_sum(int actual) const;
  int64_t col_sum(int predicted) const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // Set when a denominator was zero and the metric was defined as 0.
  bool undefined = false;
};

struct MetricsReport {
  std::array<ClassMetrics, kNumStages> per_class{};
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double kappa = 0.0;
  double chance_agreement = 0.0;  // P_e
};

ConfusionMatrix confusion(std::span<const uint8_t> labels,
                          std::span<const uint8_t> predictions);

MetricsReport metrics(const ConfusionMatrix& cm);

// Formatting helpers for reports: a JSON object and a plot-ready CSV table
// (one row per class, overall footer rows).
std::string metrics_to_json(const MetricsReport& r, const ConfusionMatrix& cm);
std::string metrics_to_csv(const MetricsReport& r);

}  // namespace wavestage
