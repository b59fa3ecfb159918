#include "wavestage/evaluation.hpp"

#include <sstream>

#include "json.hpp"
#include "wavestage/errors.hpp"

namespace wavestage {

int64_t ConfusionMatrix::total() const {
  int64_t t = 0;
  for (const auto& row : counts)
    for (int64_t v : row) t += v;
  return t;
}

int64_t ConfusionMatrix::trace() const {
  int64_t t = 0;
  for (int i = 0; i < kNumStages; ++i) t += counts[i][i];
  return t;
}

int64_t ConfusionMatrix::row_sum(int actual) const {
  int64_t t = 0;
  for (int64_t v : counts[actual]) t += v;
  return t;
}

int64_t ConfusionMatrix::col_sum(int predicted) const {
  int64_t t = 0;
  for (int i = 0; i < kNumStages; ++i) t += counts[i][predicted];
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  for (int i = 0; i < kNumStages; ++i)
    for (int j = 0; j < kNumStages; ++j) counts[i][j] += other.counts[i][j];
  return *this;
}

ConfusionMatrix confusion(std::span<const uint8_t> labels,
                          std::span<const uint8_t> predictions) {
  if (labels.size() != predictions.size())
    throw DataError("confusion: labels and predictions differ in length");
  ConfusionMatrix cm;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= kNumStages || predictions[i] >= kNumStages)
      throw DataError("confusion: stage code out of range at index " +
                      std::to_string(i));
    ++cm.counts[labels[i]][predictions[i]];
  }
  return cm;
}

MetricsReport metrics(const ConfusionMatrix& cm) {
  const int64_t total = cm.total();
  if (total == 0) throw DataError("metrics: empty confusion matrix");

  MetricsReport r;
  for (int c = 0; c < kNumStages; ++c) {
    const double tp = static_cast<double>(cm.counts[c][c]);
    const double fp = static_cast<double>(cm.col_sum(c)) - tp;
    const double fn = static_cast<double>(cm.row_sum(c)) - tp;
    ClassMetrics& m = r.per_class[c];
    if (tp + fp > 0)
      m.precision = tp / (tp + fp);
    else
      m.undefined = true;
    if (tp + fn > 0)
      m.recall = tp / (tp + fn);
    else
      m.undefined = true;
    if (m.precision + m.recall > 0)
      m.f1 = 2.0 * m.recall * m.precision / (m.recall + m.precision);
    else
      m.undefined = true;
    r.macro_f1 += m.f1;
  }
  r.macro_f1 /= kNumStages;
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);

  double pe = 0.0;
  for (int c = 0; c < kNumStages; ++c)
    pe += static_cast<double>(cm.row_sum(c)) * static_cast<double>(cm.col_sum(c));
  pe /= static_cast<double>(total) * static_cast<double>(total);
  r.chance_agreement = pe;
  r.kappa = pe < 1.0 ? (r.accuracy - pe) / (1.0 - pe) : 1.0;
  return r;
}

std::string metrics_to_json(const MetricsReport& r, const ConfusionMatrix& cm) {
  nlohmann::json j;
  for (int c = 0; c < kNumStages; ++c) {
    j["per_class"][kStageNames[c]] = {{"precision", r.per_class[c].precision},
                                      {"recall", r.per_class[c].recall},
                                      {"f1", r.per_class[c].f1},
                                      {"undefined", r.per_class[c].undefined}};
  }
  j["accuracy"] = r.accuracy;
  j["macro_f1"] = r.macro_f1;
  j["kappa"] = r.kappa;
  j["chance_agreement"] = r.chance_agreement;
  auto rows = nlohmann::json::array();
  for (int i = 0; i < kNumStages; ++i) {
    auto row = nlohmann::json::array();
    for (int k = 0; k < kNumStages; ++k) row.push_back(cm.counts[i][k]);
    rows.push_back(row);
  }
  j["confusion"] = rows;
  return j.dump(2) + "\n";
}

std::string metrics_to_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "class,precision,recall,f1,undefined\n";
  os.precision(10);
  for (int c = 0; c < kNumStages; ++c)
    os << kStageNames[c] << ',' << r.per_class[c].precision << ','
       << r.per_class[c].recall << ',' << r.per_class[c].f1 << ','
       << (r.per_class[c].undefined ? 1 : 0) << '\n';
  os << "overall_accuracy," << r.accuracy << ",,,\n";
  os << "overall_macro_f1," << r.macro_f1 << ",,,\n";
  os << "overall_kappa," << r.kappa << ",,,\n";
  return os.str();
}

}  // namespace wavestage
