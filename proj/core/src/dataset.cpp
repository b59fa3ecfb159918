#include "wavestage/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "json.hpp"
#include "wavestage/errors.hpp"
#include "wavestage/io_util.hpp"
#include "wavestage/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace wavestage {

void DatasetConfig::validate() const {
  if (epoch_seconds <= 0) throw ConfigError("epoch_seconds must be positive");
  if (sampling_hz <= 0) throw ConfigError("sampling_hz must be positive");
  if (window_len < 1) throw ConfigError("window_len must be >= 1");
  if (num_classes != kNumStages)
    throw ConfigError("num_classes is fixed at 5 (Wake, N1, N2, N3, REM)");
}

const Recording* Dataset::find(const std::string& subject_id) const {
  for (const auto& r : recordings)
    if (r.subject_id == subject_id) return &r;
  return nullptr;
}

Dataset load_dataset(const fs::path& manifest_path) {
  fs::path manifest = manifest_path;
  if (fs::is_directory(manifest)) manifest /= "manifest.json";
  if (!fs::exists(manifest)) throw IoError("manifest not found: " + manifest.string());

  json m;
  try {
    m = json::parse(read_file_text(manifest));
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + manifest.string() + ": " + e.what());
  }

  Dataset ds;
  try {
    ds.epoch_seconds = m.at("epoch_seconds").get<int>();
    ds.sampling_hz = m.at("sampling_hz").get<int>();
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest missing sampling parameters: ") + e.what());
  }
  if (ds.epoch_seconds <= 0 || ds.sampling_hz <= 0)
    throw DataError("manifest sampling parameters must be positive");

  const fs::path dir = manifest.parent_path();
  const int es = ds.epoch_samples();

  if (!m.contains("records") || !m["records"].is_array())
    throw DataError("manifest has no records[] array");

  for (const auto& rec : m["records"]) {
    Recording r;
    r.subject_id = rec.at("subject_id").get<std::string>();
    const auto signal_file = dir / rec.at("signal_file").get<std::string>();
    const auto labels_file = dir / rec.at("labels_file").get<std::string>();
    const int num_epochs = rec.at("num_epochs").get<int>();

    if (!fs::exists(signal_file))
      throw DataError("record " + r.subject_id +
                      ": signal file missing: " + signal_file.string());
    if (!fs::exists(labels_file))
      throw DataError("record " + r.subject_id +
                      ": labels file missing: " + labels_file.string());

    const auto label_bytes = read_file_bytes(labels_file);
    if (static_cast<int>(label_bytes.size()) != num_epochs)
      throw DataError("record " + r.subject_id + ": expected " +
                      std::to_string(num_epochs) + " labels, file holds " +
                      std::to_string(label_bytes.size()));
    r.labels.resize(label_bytes.size());
    std::memcpy(r.labels.data(), label_bytes.data(), label_bytes.size());
    for (size_t i = 0; i < r.labels.size(); ++i) {
      if (r.labels[i] >= kNumStages)
        throw DataError("record " + r.subject_id + ": epoch " + std::to_string(i) +
                        " has invalid stage code " + std::to_string(r.labels[i]));
    }

    const auto signal_bytes = read_file_bytes(signal_file);
    if (signal_bytes.size() % sizeof(float) != 0)
      throw DataError("record " + r.subject_id + ": signal file size is not a "
                      "multiple of 4 bytes");
    const size_t n = signal_bytes.size() / sizeof(float);
    if (n != static_cast<size_t>(num_epochs) * es)
      throw DataError("record " + r.subject_id + ": expected " +
                      std::to_string(static_cast<size_t>(num_epochs) * es) +
                      " samples, file holds " + std::to_string(n));
    r.samples.resize(n);
    const float* src = reinterpret_cast<const float*>(signal_bytes.data());
    for (size_t i = 0; i < n; ++i) r.samples[i] = static_cast<double>(src[i]);

    ds.recordings.push_back(std::move(r));
  }
  return ds;
}

void save_dataset(const fs::path& dir, const Dataset& ds) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string());

  json m;
  m["epoch_seconds"] = ds.epoch_seconds;
  m["sampling_hz"] = ds.sampling_hz;
  m["records"] = json::array();

  for (const auto& r : ds.recordings) {
    if (r.samples.size() !=
        static_cast<size_t>(r.num_epochs()) * ds.epoch_samples())
      throw DataError("record " + r.subject_id + ": sample/label length mismatch");
    const std::string signal_file = r.subject_id + ".f32";
    const std::string labels_file = r.subject_id + ".lab";

    std::vector<float> f(r.samples.size());
    for (size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(r.samples[i]);
    write_file_bytes(dir / signal_file, f.data(), f.size() * sizeof(float));
    write_file_bytes(dir / labels_file, r.labels.data(), r.labels.size());

    m["records"].push_back({{"subject_id", r.subject_id},
                            {"signal_file", signal_file},
                            {"labels_file", labels_file},
                            {"num_epochs", r.num_epochs()}});
  }
  write_file_text(dir / "manifest.json", m.dump(2) + "\n");
}

Recording normalize_recording(const Recording& r, bool* warned) {
  if (r.samples.empty()) throw DataError("cannot normalize an empty recording");
  Recording out;
  out.subject_id = r.subject_id;
  out.labels = r.labels;
  out.samples.resize(r.samples.size());

  const size_t n = r.samples.size();
  double mean = 0.0;
  for (double v : r.samples) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : r.samples) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);

  if (var <= 0.0) {
    // Constant signal: define the z-score as all zeros.
    if (warned) *warned = true;
    return out;
  }
  const double inv_sd = 1.0 / std::sqrt(var);
  for (size_t i = 0; i < n; ++i) out.samples[i] = (r.samples[i] - mean) * inv_sd;
  return out;
}

std::vector<EpochWindow> make_windows(const Recording& r, const DatasetConfig& cfg,
                                      bool* warned) {
  cfg.validate();
  const int es = cfg.epoch_samples();
  if (r.samples.size() != static_cast<size_t>(r.num_epochs()) * es)
    throw DataError("record " + r.subject_id + ": sample count does not match "
                    "labels * epoch_samples");

  std::vector<EpochWindow> out;
  const int n = r.num_epochs();
  const int L = cfg.window_len;
  if (n < L) {
    if (warned) *warned = true;
    return out;
  }
  out.reserve(static_cast<size_t>(n - L + 1));
  for (int last = L - 1; last < n; ++last) {
    EpochWindow w;
    w.subject_id = r.subject_id;
    w.epoch_index = last;
    w.label = r.labels[last];
    const size_t begin = static_cast<size_t>(last - L + 1) * es;
    w.signal = std::span<const double>(r.samples.data() + begin,
                                       static_cast<size_t>(cfg.window_samples()));
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<std::string> FoldAssignment::test_subjects(int fold) const {
  std::vector<std::string> out;
  for (const auto& [s, f] : subject_to_fold)
    if (f == fold) out.push_back(s);
  return out;
}

std::vector<std::string> FoldAssignment::train_subjects(int fold) const {
  std::vector<std::string> out;
  const auto& val = validation_subjects.at(static_cast<size_t>(fold));
  for (const auto& [s, f] : subject_to_fold) {
    if (f == fold) continue;
    if (std::find(val.begin(), val.end(), s) != val.end()) continue;
    out.push_back(s);
  }
  return out;
}

FoldAssignment assign_folds(const std::vector<Recording>& recordings, int k,
                            int val_subjects, uint64_t seed) {
  std::vector<std::string> subjects;
  for (const auto& r : recordings) subjects.push_back(r.subject_id);
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());

  const int n = static_cast<int>(subjects.size());
  if (k < 1 || k > n)
    throw ConfigError("fold count " + std::to_string(k) + " invalid for " +
                      std::to_string(n) + " subjects");
  const int largest_fold = (n + k - 1) / k;
  const int min_train = n - largest_fold;
  if (val_subjects < 0 || val_subjects >= std::max(1, min_train))
    throw ConfigError("val_subjects must be smaller than every training split");

  Rng rng(derive_seed(seed, {0x666f6c64ULL}));  // "fold"
  std::vector<std::string> shuffled = subjects;
  rng.shuffle(shuffled);

  FoldAssignment fa;
  fa.fold_count = k;
  for (int i = 0; i < n; ++i) fa.subject_to_fold[shuffled[i]] = i % k;

  fa.validation_subjects.resize(static_cast<size_t>(k));
  for (int f = 0; f < k; ++f) {
    // Reserve validation subjects from the training split, deterministically:
    // walk the shuffled order and take the first val_subjects not in fold f.
    auto& val = fa.validation_subjects[static_cast<size_t>(f)];
    for (const auto& s : shuffled) {
      if (static_cast<int>(val.size()) >= val_subjects) break;
      if (fa.subject_to_fold[s] != f) val.push_back(s);
    }
  }
  return fa;
}

}  // namespace wavestage
