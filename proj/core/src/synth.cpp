#include "wavestage/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "json.hpp"
#include "wavestage/errors.hpp"
#include "wavestage/io_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace wavestage {

namespace {
constexpr double kPi = 3.14159265358979323846;

const std::array<WaveformTemplate, kNumWaveforms> kBank = {{
    {Waveform::Alpha, {8.0, 13.0}, {1.0, 4.0}, {0.8, 1.2}},
    {Waveform::Lamf, {4.0, 7.0}, {1.0, 3.0}, {0.5, 0.8}},
    {Waveform::Spindle, {12.0, 14.0}, {0.5, 1.5}, {1.0, 1.5}},
    {Waveform::KComplex, {1.0, 2.0}, {0.7, 0.7}, {2.2, 3.2}},
    {Waveform::Delta, {0.5, 2.0}, {1.0, 3.0}, {2.0, 3.0}},
    {Waveform::Sawtooth, {2.0, 6.0}, {1.0, 3.0}, {1.0, 1.6}},
    {Waveform::RemArtifact, {2.0, 4.0}, {0.3, 0.5}, {1.8, 2.6}},
    {Waveform::BlinkArtifact, {2.0, 3.0}, {0.3, 0.5}, {2.2, 3.2}},
}};

const char* kWaveNames[kNumWaveforms] = {"alpha",    "lamf",         "spindle",
                                         "kcomplex", "delta",        "sawtooth",
                                         "rem_artifact", "blink_artifact"};

double hann(double u) { return 0.5 * (1.0 - std::cos(2.0 * kPi * u)); }

// Renders one event into `signal` starting at sample `start`.
void render_event(std::vector<double>& signal, int start, int nsamp, double fs,
                  const WaveformTemplate& t, Rng& rng) {
  const double dur = nsamp / fs;
  const double freq = rng.uniform(t.freq_hz.lo, t.freq_hz.hi);
  const double amp = rng.uniform(t.amplitude.lo, t.amplitude.hi);
  const double phase = rng.uniform(0.0, 2.0 * kPi);

  switch (t.name) {
    case Waveform::Alpha:
    case Waveform::Spindle:
    case Waveform::Delta: {
      for (int i = 0; i < nsamp; ++i) {
        const double ts = i / fs;
        signal[start + i] +=
            amp * hann(ts / dur) * std::sin(2.0 * kPi * freq * ts + phase);
      }
      break;
    }
    case Waveform::Lamf: {
      // Mixed frequency: two incommensurate components inside the band.
      const double f2 = rng.uniform(t.freq_hz.lo, t.freq_hz.hi);
      const double p2 = rng.uniform(0.0, 2.0 * kPi);
      for (int i = 0; i < nsamp; ++i) {
        const double ts = i / fs;
        signal[start + i] += amp * hann(ts / dur) *
                             (0.6 * std::sin(2.0 * kPi * freq * ts + phase) +
                              0.4 * std::sin(2.0 * kPi * f2 * ts + p2));
      }
      break;
    }
    case Waveform::Sawtooth: {
      // Asymmetric ramp: slow rise, sharp fall.
      const double rise = 0.7;
      for (int i = 0; i < nsamp; ++i) {
        const double ts = i / fs;
        double u = ts * freq + phase / (2.0 * kPi);
        u -= std::floor(u);
        const double tri = u < rise ? u / rise : (1.0 - u) / (1.0 - rise);
        signal[start + i] += amp * hann(ts / dur) * (2.0 * tri - 1.0);
      }
      break;
    }
    case Waveform::KComplex: {
      // Sharp negative trough then a slower positive rebound, ~0.7 s total.
      const double t_neg = 0.15 * dur, s_neg = 0.07 * dur;
      const double t_pos = 0.55 * dur, s_pos = 0.22 * dur;
      for (int i = 0; i < nsamp; ++i) {
        const double ts = i / fs;
        const double gn = std::exp(-0.5 * std::pow((ts - t_neg) / s_neg, 2));
        const double gp = std::exp(-0.5 * std::pow((ts - t_pos) / s_pos, 2));
        signal[start + i] += amp * (-gn + 0.65 * gp);
      }
      break;
    }
    case Waveform::RemArtifact: {
      // Sharply contoured biphasic deflection with a triangular envelope.
      for (int i = 0; i < nsamp; ++i) {
        const double u = static_cast<double>(i) / nsamp;
        const double env = 1.0 - std::abs(2.0 * u - 1.0);
        signal[start + i] += amp * env * (u < 0.5 ? 1.0 : -1.0);
      }
      break;
    }
    case Waveform::BlinkArtifact: {
      // Fast rise, exponential decay.
      const double tau_rise = 0.08 * dur, tau_fall = 0.45 * dur;
      for (int i = 0; i < nsamp; ++i) {
        const double ts = i / fs;
        signal[start + i] +=
            amp * (1.0 - std::exp(-ts / tau_rise)) * std::exp(-ts / tau_fall);
      }
      break;
    }
  }
}

// Pink-ish 1/f background noise via the Voss-McCartney octave-bank scheme,
// rescaled so the epoch's noise has exactly `sd` standard deviation.
std::vector<double> pink_noise(int n, double sd, Rng& rng) {
  constexpr int kOctaves = 8;
  std::array<double, kOctaves> rows{};
  for (auto& r : rows) r = rng.normal();
  std::vector<double> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int o = 0; o < kOctaves; ++o)
      if (i % (1 << o) == 0) rows[static_cast<size_t>(o)] = rng.normal();
    double s = rng.normal();  // white floor
    for (double r : rows) s += r;
    out[static_cast<size_t>(i)] = s;
  }
  double mean = 0.0;
  for (double v : out) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : out) var += (v - mean) * (v - mean);
  var /= n;
  const double scale = var > 0.0 ? sd / std::sqrt(var) : 0.0;
  for (auto& v : out) v = (v - mean) * scale;
  return out;
}

struct Placement {
  Waveform kind;
  int start;
  int nsamp;
};

bool overlaps_any(const std::vector<Placement>& placed, int start, int nsamp) {
  for (const auto& p : placed)
    if (start < p.start + p.nsamp && p.start < start + nsamp) return true;
  return false;
}

// Places an event of duration d_s without overlapping prior placements:
// random tries first, then a deterministic fallback into the largest free gap
// so that required events land whenever a fitting gap exists at all.
bool place_event(std::vector<Placement>& placed, Waveform kind, double d_s,
                 double epoch_s, double fs, Rng& rng) {
  const int nsamp = std::max(1, static_cast<int>(std::lround(d_s * fs)));
  const int total = static_cast<int>(std::lround(epoch_s * fs));
  if (nsamp >= total) return false;
  for (int attempt = 0; attempt < 200; ++attempt) {
    const int start = rng.below_int(total - nsamp);
    if (!overlaps_any(placed, start, nsamp)) {
      placed.push_back({kind, start, nsamp});
      return true;
    }
  }
  std::vector<Placement> sorted = placed;
  std::sort(sorted.begin(), sorted.end(),
            [](const Placement& a, const Placement& b) { return a.start < b.start; });
  int best_start = -1, best_len = 0, cursor = 0;
  for (const auto& p : sorted) {
    if (p.start - cursor > best_len) {
      best_len = p.start - cursor;
      best_start = cursor;
    }
    cursor = std::max(cursor, p.start + p.nsamp);
  }
  if (total - cursor > best_len) {
    best_len = total - cursor;
    best_start = cursor;
  }
  if (best_len >= nsamp) {
    placed.push_back({kind, best_start, nsamp});
    return true;
  }
  return false;
}

// Lays events of `kind` along the timeline until their summed duration reaches
// a coverage fraction drawn from `cov`. Gaps are budgeted so the target is
// always met before the epoch runs out (requires cov.hi < 1 and an otherwise
// empty epoch, which is how the stage recipes below call it).
void place_coverage(std::vector<Placement>& placed, Waveform kind, Interval cov,
                    const WaveformTemplate& t, double epoch_s, double fs, Rng& rng) {
  const double target_s = rng.uniform(cov.lo, cov.hi) * epoch_s;
  const int total = static_cast<int>(std::lround(epoch_s * fs));
  double got_s = 0.0;
  int cursor = 0;
  while (got_s < target_s) {
    const double slack_s = (total - cursor) / fs - (target_s - got_s);
    const double gap_s = rng.uniform(0.0, std::min(std::max(slack_s, 0.0) * 0.5, 2.0));
    cursor += static_cast<int>(std::lround(gap_s * fs));
    double d = rng.uniform(t.duration_s.lo, t.duration_s.hi);
    int nsamp = std::max(1, static_cast<int>(std::lround(d * fs)));
    nsamp = std::min(nsamp, total - cursor);
    if (nsamp <= 0) break;
    placed.push_back({kind, cursor, nsamp});
    cursor += nsamp;
    got_s += nsamp / fs;
  }
}

void place_count(std::vector<Placement>& placed, Waveform kind,
                 const WaveformTemplate& t, int lo, int hi, double epoch_s,
                 double fs, Rng& rng) {
  const int n = lo + (hi > lo ? rng.below_int(hi - lo + 1) : 0);
  for (int i = 0; i < n; ++i) {
    const double d = rng.uniform(t.duration_s.lo, t.duration_s.hi);
    place_event(placed, kind, d, epoch_s, fs, rng);
  }
}

}  // namespace

const std::array<WaveformTemplate, kNumWaveforms>& waveform_bank() { return kBank; }

const char* waveform_name(Waveform w) { return kWaveNames[static_cast<int>(w)]; }

Waveform waveform_from_name(const std::string& name) {
  for (int i = 0; i < kNumWaveforms; ++i)
    if (name == kWaveNames[i]) return static_cast<Waveform>(i);
  throw DataError("unknown waveform template: " + name);
}

std::vector<double> generate_epoch(int stage, const SynthConfig& cfg, Rng& rng,
                                   std::vector<PlantedEvent>& events) {
  if (stage < 0 || stage >= kNumStages)
    throw ConfigError("stage code out of range: " + std::to_string(stage));

  const double fs = cfg.sampling_hz;
  const double epoch_s = cfg.epoch_seconds;
  const auto& bank = kBank;
  auto tpl = [&](Waveform w) -> const WaveformTemplate& {
    return bank[static_cast<size_t>(w)];
  };

  std::vector<Placement> placed;
  const auto& mix = cfg.stage_mix;
  switch (stage) {
    case 0:  // Wake: dominant alpha plus ocular activity
      place_coverage(placed, Waveform::Alpha, mix.wake_alpha_coverage,
                     tpl(Waveform::Alpha), epoch_s, fs, rng);
      place_count(placed, Waveform::BlinkArtifact, tpl(Waveform::BlinkArtifact),
                  mix.wake_blink_min, mix.wake_blink_max, epoch_s, fs, rng);
      place_count(placed, Waveform::RemArtifact, tpl(Waveform::RemArtifact),
                  mix.wake_rem_artifact_min, mix.wake_rem_artifact_max, epoch_s, fs,
                  rng);
      break;
    case 1:  // N1: mostly LAMF
      place_coverage(placed, Waveform::Lamf, mix.n1_lamf_coverage,
                     tpl(Waveform::Lamf), epoch_s, fs, rng);
      break;
    case 2:  // N2: spindles and K-complexes
      place_count(placed, Waveform::Spindle, tpl(Waveform::Spindle),
                  mix.n2_spindle_min, mix.n2_spindle_max, epoch_s, fs, rng);
      if (rng.uniform() < mix.n2_kcomplex_prob)
        place_count(placed, Waveform::KComplex, tpl(Waveform::KComplex),
                    mix.n2_kcomplex_min, mix.n2_kcomplex_max, epoch_s, fs, rng);
      break;
    case 3:  // N3: heavy delta, occasional spindles
      place_coverage(placed, Waveform::Delta, mix.n3_delta_coverage,
                     tpl(Waveform::Delta), epoch_s, fs, rng);
      place_count(placed, Waveform::Spindle, tpl(Waveform::Spindle),
                  mix.n3_spindle_min, mix.n3_spindle_max, epoch_s, fs, rng);
      break;
    case 4:  // REM: sawtooth runs plus ocular artifacts
      place_coverage(placed, Waveform::Sawtooth, mix.rem_sawtooth_coverage,
                     tpl(Waveform::Sawtooth), epoch_s, fs, rng);
      place_count(placed, Waveform::RemArtifact, tpl(Waveform::RemArtifact),
                  mix.rem_artifact_min, mix.rem_artifact_max, epoch_s, fs, rng);
      break;
  }

  std::vector<double> signal = pink_noise(cfg.epoch_samples(), cfg.noise_sd, rng);
  std::sort(placed.begin(), placed.end(),
            [](const Placement& a, const Placement& b) { return a.start < b.start; });
  for (const auto& p : placed) {
    render_event(signal, p.start, p.nsamp, fs, tpl(p.kind), rng);
    events.push_back({p.kind, p.start / fs, p.nsamp / fs});
  }
  return signal;
}

std::vector<uint8_t> simulate_stage_chain(const SynthConfig& cfg,
                                          uint64_t subject_seed) {
  for (uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(subject_seed, {0x636861696eULL, attempt}));  // "chain"
    std::vector<uint8_t> stages(static_cast<size_t>(cfg.epochs_per_subject));
    int counts[kNumStages] = {0, 0, 0, 0, 0};
    uint8_t cur = static_cast<uint8_t>(rng.below(kNumStages));
    for (auto& s : stages) {
      s = cur;
      ++counts[cur];
      if (rng.uniform() >= cfg.stage_persistence) {
        // Jump to one of the other four stages uniformly.
        int step = 1 + rng.below_int(kNumStages - 1);
        cur = static_cast<uint8_t>((cur + step) % kNumStages);
      }
    }
    const int need = static_cast<int>(cfg.min_stage_fraction * cfg.epochs_per_subject);
    bool ok = true;
    for (int c : counts)
      if (c < need) ok = false;
    if (ok) return stages;
    if (attempt > 10000)
      throw NumericError("stage chain resampling failed to satisfy the per-stage "
                         "minimum; lower min_stage_fraction");
  }
}

SynthResult generate_synthetic(const SynthConfig& cfg) {
  if (cfg.subjects < 1 || cfg.epochs_per_subject < 1)
    throw ConfigError("synthetic dataset needs at least one subject and epoch");

  SynthResult out;
  out.dataset.epoch_seconds = cfg.epoch_seconds;
  out.dataset.sampling_hz = cfg.sampling_hz;

  for (int s = 0; s < cfg.subjects; ++s) {
    char name[16];
    std::snprintf(name, sizeof name, "s%02d", s);
    const uint64_t subject_seed =
        derive_seed(cfg.seed, {0x7375626aULL, static_cast<uint64_t>(s)});  // "subj"

    Recording rec;
    rec.subject_id = name;
    rec.labels = simulate_stage_chain(cfg, subject_seed);
    rec.samples.reserve(static_cast<size_t>(cfg.epochs_per_subject) *
                        cfg.epoch_samples());

    Rng rng(derive_seed(subject_seed, {0x7369676eULL}));  // "sign"
    for (int e = 0; e < cfg.epochs_per_subject; ++e) {
      EpochEvents ev;
      ev.subject_id = name;
      ev.epoch_index = e;
      auto sig = generate_epoch(rec.labels[static_cast<size_t>(e)], cfg, rng,
                                ev.events);
      rec.samples.insert(rec.samples.end(), sig.begin(), sig.end());
      out.event_log.push_back(std::move(ev));
    }
    out.dataset.recordings.push_back(std::move(rec));
  }
  return out;
}

void generate_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
  SynthResult r = generate_synthetic(cfg);
  // The container stores float32; round first so the in-memory dataset,
  // the sidecar and the files agree bit-for-bit with a later load.
  save_dataset(out_dir, r.dataset);
  save_event_log(out_dir / "events.jsonl", r.event_log);
}

void save_event_log(const fs::path& file, const PlantedEventLog& log) {
  std::string text;
  for (const auto& ee : log) {
    json j;
    j["subject_id"] = ee.subject_id;
    j["epoch_index"] = ee.epoch_index;
    json arr = json::array();
    for (const auto& e : ee.events)
      arr.push_back({{"template", waveform_name(e.kind)},
                     {"onset_s", e.onset_s},
                     {"duration_s", e.duration_s}});
    j["events"] = std::move(arr);
    text += j.dump();
    text += '\n';
  }
  write_file_text(file, text);
}

PlantedEventLog load_event_log(const fs::path& file) {
  PlantedEventLog log;
  const std::string text = read_file_text(file);
  size_t pos = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    if (end > pos) {
      json j = json::parse(text.substr(pos, end - pos));
      EpochEvents ee;
      ee.subject_id = j.at("subject_id").get<std::string>();
      ee.epoch_index = j.at("epoch_index").get<int>();
      for (const auto& e : j.at("events"))
        ee.events.push_back({waveform_from_name(e.at("template").get<std::string>()),
                             e.at("onset_s").get<double>(),
                             e.at("duration_s").get<double>()});
      log.push_back(std::move(ee));
    }
    pos = end + 1;
  }
  return log;
}

}  // namespace wavestage
