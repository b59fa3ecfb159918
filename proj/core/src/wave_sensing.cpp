#include "wavestage/wave_sensing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "wavestage/errors.hpp"
#include "wavestage/threading.hpp"

namespace wavestage {

void PrototypeBank::init(int m, int k1, int c, Rng& rng) {
  if (m < 1 || k1 < 1 || c < 1)
    throw ConfigError("prototype bank needs m, k1, c >= 1");
  num = m;
  patch_len = k1;
  channels = c;
  w = Mat(m, k1 * c);
  for (auto& v : w.d) v = rng.uniform();
  meta.assign(static_cast<size_t>(m), Meta{});
}

void PrototypeBank::visit_params(ParamTable& t) {
  t.push_back({"prototypes.weight", &w.d, {num, patch_len, channels}});
}

int patch_count(const FeatureMap& s, int k1) {
  if (k1 < 1 || k1 > s.k())
    throw NumericError("patch length must lie in [1, K]");
  return s.k() - k1 + 1;
}

Mat extract_patches(const FeatureMap& s, int k1) {
  const int p = patch_count(s, k1);
  const int c = s.c();
  Mat out(p, k1 * c);
  for (int i = 0; i < p; ++i) {
    double* dst = out.row(i);
    for (int k = 0; k < k1; ++k) {
      const double* src = s.values.row(i + k);
      for (int j = 0; j < c; ++j) dst[k * c + j] = src[j];
    }
  }
  return out;
}

Mat distance_map(const FeatureMap& s, const PrototypeBank& bank) {
  if (s.c() != bank.channels)
    throw NumericError("distance map: channel mismatch between features and bank");
  const int p = patch_count(s, bank.patch_len);
  const int k1 = bank.patch_len;
  const int c = bank.channels;
  Mat dist(bank.num, p);
  for (int j = 0; j < bank.num; ++j) {
    const double* wj = bank.w.row(j);
    double* dj = dist.row(j);
    for (int i = 0; i < p; ++i) {
      double acc = 0.0;
      for (int k = 0; k < k1; ++k) {
        const double* sv = s.values.row(i + k);
        const double* wv = wj + k * c;
        for (int q = 0; q < c; ++q) {
          const double diff = sv[q] - wv[q];
          acc += diff * diff;
        }
      }
      dj[i] = acc;
    }
  }
  return dist;
}

void distance_map_backward(const FeatureMap& s, const PrototypeBank& bank,
                           const Mat& ddist, Mat* dfeat, Mat* gw) {
  const int p = ddist.cols;
  const int k1 = bank.patch_len;
  const int c = bank.channels;
  for (int j = 0; j < bank.num; ++j) {
    const double* wj = bank.w.row(j);
    const double* dj = ddist.row(j);
    double* gj = gw ? gw->row(j) : nullptr;
    for (int i = 0; i < p; ++i) {
      const double g2 = 2.0 * dj[i];
      if (g2 == 0.0) continue;
      for (int k = 0; k < k1; ++k) {
        const double* sv = s.values.row(i + k);
        const double* wv = wj + k * c;
        double* dsv = dfeat ? dfeat->row(i + k) : nullptr;
        for (int q = 0; q < c; ++q) {
          const double diff = sv[q] - wv[q];
          if (dsv) dsv[q] += g2 * diff;
          if (gj) gj[k * c + q] -= g2 * diff;
        }
      }
    }
  }
}

namespace {
bool better_than(double dist, const WindowRef& ref, int patch, double best_dist,
                 const PatchLocation& best) {
  if (dist < best_dist) return true;
  if (dist > best_dist) return false;
  if (ref.subject_id != best.ref.subject_id)
    return ref.subject_id < best.ref.subject_id;
  if (ref.epoch_index != best.ref.epoch_index)
    return ref.epoch_index < best.ref.epoch_index;
  return patch < best.patch_index;
}
}  // namespace

PatchLocation nearest_patch(const PrototypeBank& bank, int j,
                            const FeatureSet& features) {
  if (features.empty()) throw DataError("nearest_patch: empty feature set");
  PatchLocation best;
  double best_dist = std::numeric_limits<double>::infinity();
  bool first = true;
  for (const auto& [ref, fm] : features) {
    const Mat dist = distance_map(fm, bank);
    const double* dj = dist.row(j);
    for (int p = 0; p < dist.cols; ++p) {
      if (first || better_than(dj[p], ref, p, best_dist, best)) {
        best = {ref, p, dj[p]};
        best_dist = dj[p];
        first = false;
      }
    }
  }
  return best;
}

std::vector<PatchLocation> nearest_patches_per_epoch(const PrototypeBank& bank,
                                                     int j,
                                                     const FeatureSet& features,
                                                     int n) {
  // Best patch per distinct window ref, then the n closest of those.
  std::map<WindowRef, PatchLocation> best;
  for (const auto& [ref, fm] : features) {
    const Mat dist = distance_map(fm, bank);
    const double* dj = dist.row(j);
    PatchLocation loc{ref, 0, dj[0]};
    for (int p = 1; p < dist.cols; ++p)
      if (better_than(dj[p], ref, p, loc.distance, loc)) loc = {ref, p, dj[p]};
    auto it = best.find(ref);
    if (it == best.end() || loc.distance < it->second.distance) best[ref] = loc;
  }
  std::vector<PatchLocation> all;
  all.reserve(best.size());
  for (auto& [ref, loc] : best) all.push_back(loc);
  std::stable_sort(all.begin(), all.end(),
                   [](const PatchLocation& a, const PatchLocation& b) {
                     if (a.distance != b.distance) return a.distance < b.distance;
                     if (a.ref.subject_id != b.ref.subject_id)
                       return a.ref.subject_id < b.ref.subject_id;
                     if (a.ref.epoch_index != b.ref.epoch_index)
                       return a.ref.epoch_index < b.ref.epoch_index;
                     return a.patch_index < b.patch_index;
                   });
  if (static_cast<int>(all.size()) > n) all.resize(static_cast<size_t>(n));
  return all;
}

void project_prototypes(PrototypeBank& bank, const FeatureSet& features) {
  if (features.empty()) throw DataError("project_prototypes: empty feature set");
  for (int j = 0; j < bank.num; ++j) {
    const PatchLocation loc = nearest_patch(bank, j, features);
    const FeatureMap* fm = nullptr;
    for (const auto& [ref, f] : features)
      if (ref == loc.ref) {
        fm = &f;
        break;
      }
    double* wj = bank.w.row(j);
    const int c = bank.channels;
    for (int k = 0; k < bank.patch_len; ++k) {
      const double* sv = fm->values.row(loc.patch_index + k);
      for (int q = 0; q < c; ++q) wj[k * c + q] = sv[q];
    }
    bank.meta[static_cast<size_t>(j)].projected = true;
    bank.meta[static_cast<size_t>(j)].source = {loc.ref, loc.patch_index,
                                                loc.distance};
  }
}

int occlusion_positions(int samples, int sampling_hz, const OcclusionConfig& occl) {
  const int win = static_cast<int>(std::lround(occl.win_s * sampling_hz));
  const int stride = static_cast<int>(std::lround(occl.stride_s * sampling_hz));
  if (win < 1 || stride < 1)
    throw ConfigError("occlusion window and stride must be at least one sample");
  if (win > samples)
    throw ConfigError("occlusion window larger than the input window");
  return (samples - win) / stride + 1;
}

Mat occlusion_curves(const PrototypeBank& bank, const FeatureExtractor& fx,
                     std::span<const double> signal, int sampling_hz,
                     const OcclusionConfig& occl, int threads) {
  const int n = static_cast<int>(signal.size());
  const int positions = occlusion_positions(n, sampling_hz, occl);
  const int win = static_cast<int>(std::lround(occl.win_s * sampling_hz));
  const int stride = static_cast<int>(std::lround(occl.stride_s * sampling_hz));

  // Baseline min distance per prototype.
  const FeatureMap base = fx.forward(signal, RunMode::Eval, 0, nullptr);
  const Mat base_dist = distance_map(base, bank);
  Vec base_min(static_cast<size_t>(bank.num),
               std::numeric_limits<double>::infinity());
  for (int j = 0; j < bank.num; ++j)
    for (int p = 0; p < base_dist.cols; ++p)
      base_min[static_cast<size_t>(j)] =
          std::min(base_min[static_cast<size_t>(j)], base_dist.at(j, p));

  Mat curves(bank.num, positions);
  const int nthreads = effective_threads(threads);
#pragma omp parallel for schedule(static) num_threads(nthreads)
  for (int q = 0; q < positions; ++q) {
    std::vector<double> occluded(signal.begin(), signal.end());
    const int s0 = q * stride;
    std::fill(occluded.begin() + s0, occluded.begin() + s0 + win, 0.0);
    const FeatureMap fm = fx.forward(occluded, RunMode::Eval, 0, nullptr);
    const Mat dist = distance_map(fm, bank);
    for (int j = 0; j < bank.num; ++j) {
      double mn = std::numeric_limits<double>::infinity();
      for (int p = 0; p < dist.cols; ++p) mn = std::min(mn, dist.at(j, p));
      curves.at(j, q) = mn - base_min[static_cast<size_t>(j)];
    }
  }
  return curves;
}

OcclusionResult occlusion_localize(const PrototypeBank& bank, int j,
                                   const FeatureExtractor& fx,
                                   std::span<const double> signal, int sampling_hz,
                                   const OcclusionConfig& occl, int threads) {
  const Mat curves = occlusion_curves(bank, fx, signal, sampling_hz, occl, threads);
  OcclusionResult r;
  r.curve.assign(curves.d.begin() + static_cast<size_t>(j) * curves.cols,
                 curves.d.begin() + static_cast<size_t>(j + 1) * curves.cols);
  int best = 0;
  for (int q = 1; q < curves.cols; ++q)
    if (r.curve[static_cast<size_t>(q)] > r.curve[static_cast<size_t>(best)])
      best = q;
  r.onset_s = best * occl.stride_s;
  r.duration_s = occl.win_s;
  return r;
}

}  // namespace wavestage
