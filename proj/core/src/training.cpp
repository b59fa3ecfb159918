#include "wavestage/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "wavestage/errors.hpp"
#include "wavestage/threading.hpp"

namespace wavestage {

namespace {
constexpr uint64_t kTagShuffle = 0x73687566ULL;  // "shuf"
constexpr uint64_t kTagDropout = 0x64726f70ULL;  // "drop"

struct StepGradients {
  FeatureExtractor features;
  PrototypeBank bank;
  DecisionHead head;
  ParamTable table;

  void init_like(const Model& m) {
    features = m.features;
    bank = m.bank;
    head = m.head;
    table.clear();
    features.visit_params(table);
    bank.visit_params(table);
    head.visit_params(table);
    zero();
  }
  void zero() {
    for (auto& e : table) std::fill(e.data->begin(), e.data->end(), 0.0);
  }
};

void append_jsonl(std::ofstream* log, const nlohmann::json& j) {
  if (!log || !log->is_open()) return;
  (*log) << j.dump() << '\n';
  log->flush();
}
}  // namespace

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (projection_period < 0) throw ConfigError("projection_period must be >= 0");
}

void AdamState::init(const ParamTable& params) {
  t = 0;
  m.clear();
  v.clear();
  for (const auto& e : params) {
    m.emplace_back(e.data->size(), 0.0);
    v.emplace_back(e.data->size(), 0.0);
  }
}

void AdamState::step(const ParamTable& params, const ParamTable& grads) {
  if (params.size() != grads.size())
    throw NumericError("adam: parameter/gradient table mismatch");
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    Vec& p = *params[i].data;
    const Vec& g = *grads[i].data;
    Vec& mi = m[i];
    Vec& vi = v[i];
    for (size_t k = 0; k < p.size(); ++k) {
      mi[k] = beta1 * mi[k] + (1.0 - beta1) * g[k];
      vi[k] = beta2 * vi[k] + (1.0 - beta2) * g[k] * g[k];
      const double mhat = mi[k] / bc1;
      const double vhat = vi[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

std::vector<EpochWindow> subject_windows(const std::vector<Recording>& normalized,
                                         const std::vector<std::string>& subjects,
                                         const DatasetConfig& dcfg) {
  std::vector<EpochWindow> out;
  for (const auto& s : subjects) {
    const Recording* rec = nullptr;
    for (const auto& r : normalized)
      if (r.subject_id == s) {
        rec = &r;
        break;
      }
    if (!rec) throw DataError("subject not found in dataset: " + s);
    auto w = make_windows(*rec, dcfg);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

// --- evaluation-mode loss and prediction -----------------------------------------

namespace {
// Eval-mode head pass over a batch of features: scores with frozen statistics,
// losses per the training objective. Returns the breakdown for this batch.
LossBreakdown eval_batch_loss(const Model& model,
                              const std::vector<FeatureMap>& feats,
                              std::span<const uint8_t> labels,
                              const LossWeights& weights,
                              std::vector<StagePrediction>* preds_out) {
  const int m = model.bank.num;
  const size_t n = feats.size();
  std::vector<Vec> probs(n);
  Vec r1_min(static_cast<size_t>(m), std::numeric_limits<double>::infinity());
  double r2_total = 0.0;
  size_t patch_total = 0;
  for (size_t b = 0; b < n; ++b) {
    const Mat dist = distance_map(feats[b], model.bank);
    const Mat sim = similarity_map(dist, model.head.eps_sim);
    Vec ws = wscore_eval(sim, model.head);
    Vec ps = pscore_eval(sim, model.head);
    Vec score;
    score.reserve(ws.size() + ps.size());
    score.insert(score.end(), ws.begin(), ws.end());
    score.insert(score.end(), ps.begin(), ps.end());
    StagePrediction pred = decide(score, model.head);
    probs[b] = pred.probabilities;
    if (preds_out) (*preds_out)[b] = pred;

    patch_total += static_cast<size_t>(dist.cols);
    for (int p = 0; p < dist.cols; ++p) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < m; ++j) {
        const double d = dist.at(j, p);
        best = std::min(best, d);
        r1_min[static_cast<size_t>(j)] = std::min(r1_min[static_cast<size_t>(j)], d);
      }
      r2_total += best;
    }
  }
  double l_r1 = 0.0;
  for (double v : r1_min) l_r1 += v;
  l_r1 /= m;
  bool clamped = false;
  const double l_class = class_loss(probs, labels, &clamped);
  return total_loss(l_class, diversity_loss(model.bank, model.cfg.eps_div), l_r1,
                    r2_total / static_cast<double>(patch_total),
                    l1_loss(model.head), weights, clamped);
}

std::vector<FeatureMap> extract_batch(const Model& model,
                                      const std::vector<EpochWindow>& windows,
                                      size_t begin, size_t end, RunMode mode,
                                      const std::vector<uint64_t>* dropout_seeds,
                                      int threads) {
  const int count = static_cast<int>(end - begin);
  std::vector<FeatureMap> feats(static_cast<size_t>(count));
  const int nthreads = effective_threads(threads);
#pragma omp parallel for schedule(static) num_threads(nthreads)
  for (int i = 0; i < count; ++i) {
    const auto& w = windows[begin + static_cast<size_t>(i)];
    const uint64_t seed = dropout_seeds ? (*dropout_seeds)[static_cast<size_t>(i)] : 0;
    feats[static_cast<size_t>(i)] = model.features.forward(w.signal, mode, seed, nullptr);
  }
  return feats;
}
}  // namespace

LossBreakdown evaluate_loss(const Model& model,
                            const std::vector<EpochWindow>& windows,
                            const LossWeights& weights, int batch_size,
                            int threads) {
  if (windows.empty()) throw DataError("evaluate_loss: no windows");
  double weighted_total = 0.0, l_class = 0.0, l_dist = 0.0, l_r1 = 0.0, l_r2 = 0.0,
         l_l1 = 0.0;
  size_t count = 0;
  for (size_t begin = 0; begin < windows.size();) {
    const size_t end = std::min(windows.size(), begin + static_cast<size_t>(batch_size));
    auto feats = extract_batch(model, windows, begin, end, RunMode::Eval, nullptr,
                               threads);
    std::vector<uint8_t> labels;
    for (size_t i = begin; i < end; ++i) labels.push_back(windows[i].label);
    const LossBreakdown b = eval_batch_loss(model, feats, labels, weights, nullptr);
    const double n = static_cast<double>(end - begin);
    weighted_total += b.total * n;
    l_class += b.l_class * n;
    l_dist += b.l_dist * n;
    l_r1 += b.l_r1 * n;
    l_r2 += b.l_r2 * n;
    l_l1 += b.l_l1 * n;
    count += end - begin;
    begin = end;
  }
  LossBreakdown out;
  const double n = static_cast<double>(count);
  out.l_class = l_class / n;
  out.l_dist = l_dist / n;
  out.l_r1 = l_r1 / n;
  out.l_r2 = l_r2 / n;
  out.l_l1 = l_l1 / n;
  out.total = weighted_total / n;
  return out;
}

std::vector<PredictionRecord> predict_windows(const Model& model,
                                              const std::vector<EpochWindow>& windows,
                                              int threads) {
  std::vector<PredictionRecord> out(windows.size());
  const int nthreads = effective_threads(threads);
  const int n = static_cast<int>(windows.size());
#pragma omp parallel for schedule(static) num_threads(nthreads)
  for (int i = 0; i < n; ++i) {
    const auto& w = windows[static_cast<size_t>(i)];
    auto ev = model.evaluate_window(w.signal);
    out[static_cast<size_t>(i)] =
        PredictionRecord{{w.subject_id, w.epoch_index}, w.label, std::move(ev.pred),
                         std::move(ev.score)};
  }
  return out;
}

std::pair<double, double> project_prototypes_stream(
    Model& model, const std::vector<EpochWindow>& windows, int threads) {
  if (windows.empty()) throw DataError("projection: no windows");
  const int m = model.bank.num;
  const int n = static_cast<int>(windows.size());
  const int nthreads = effective_threads(threads);

  struct PerWindow {
    std::vector<double> best;  // per prototype
    std::vector<int> patch;
    double r2_sum = 0.0;
    int patches = 0;
  };
  std::vector<PerWindow> acc(static_cast<size_t>(n));

#pragma omp parallel for schedule(static) num_threads(nthreads)
  for (int i = 0; i < n; ++i) {
    const FeatureMap fm =
        model.features.forward(windows[static_cast<size_t>(i)].signal, RunMode::Eval,
                               0, nullptr);
    const Mat dist = distance_map(fm, model.bank);
    PerWindow& a = acc[static_cast<size_t>(i)];
    a.best.assign(static_cast<size_t>(m), std::numeric_limits<double>::infinity());
    a.patch.assign(static_cast<size_t>(m), 0);
    a.patches = dist.cols;
    for (int p = 0; p < dist.cols; ++p) {
      double col_best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < m; ++j) {
        const double d = dist.at(j, p);
        if (d < a.best[static_cast<size_t>(j)]) {
          a.best[static_cast<size_t>(j)] = d;
          a.patch[static_cast<size_t>(j)] = p;
        }
        col_best = std::min(col_best, d);
      }
      a.r2_sum += col_best;
    }
  }

  // Reduce in window order (ties resolve to the earliest window, and window
  // lists are ordered by subject and epoch).
  std::vector<int> win(static_cast<size_t>(m), -1);
  std::vector<double> best(static_cast<size_t>(m),
                           std::numeric_limits<double>::infinity());
  std::vector<int> patch(static_cast<size_t>(m), 0);
  double r2_total = 0.0;
  int64_t patch_count_total = 0;
  for (int i = 0; i < n; ++i) {
    const PerWindow& a = acc[static_cast<size_t>(i)];
    r2_total += a.r2_sum;
    patch_count_total += a.patches;
    for (int j = 0; j < m; ++j) {
      if (a.best[static_cast<size_t>(j)] < best[static_cast<size_t>(j)]) {
        best[static_cast<size_t>(j)] = a.best[static_cast<size_t>(j)];
        win[static_cast<size_t>(j)] = i;
        patch[static_cast<size_t>(j)] = a.patch[static_cast<size_t>(j)];
      }
    }
  }

  double r1_pre = 0.0;
  for (double v : best) r1_pre += v;
  r1_pre /= m;
  const double r2_pre = r2_total / static_cast<double>(patch_count_total);

  // Copy the winning patches into the bank (recomputing only those windows).
  for (int j = 0; j < m; ++j) {
    const auto& w = windows[static_cast<size_t>(win[static_cast<size_t>(j)])];
    const FeatureMap fm = model.features.forward(w.signal, RunMode::Eval, 0, nullptr);
    double* wj = model.bank.w.row(j);
    const int c = model.bank.channels;
    for (int k = 0; k < model.bank.patch_len; ++k) {
      const double* sv = fm.values.row(patch[static_cast<size_t>(j)] + k);
      for (int q = 0; q < c; ++q) wj[k * c + q] = sv[q];
    }
    auto& meta = model.bank.meta[static_cast<size_t>(j)];
    meta.projected = true;
    meta.source = {{w.subject_id, w.epoch_index}, patch[static_cast<size_t>(j)],
                   best[static_cast<size_t>(j)]};
  }
  return {r1_pre, r2_pre};
}

// --- train_fold -------------------------------------------------------------------

TrainResult train_fold(const ModelConfig& mcfg, const TrainConfig& cfg,
                       const std::vector<EpochWindow>& train_windows,
                       const std::vector<EpochWindow>& val_windows,
                       const std::filesystem::path* log_file,
                       const std::function<void(const EpochLog&)>& on_epoch) {
  mcfg.validate();
  cfg.validate();
  if (train_windows.empty() || val_windows.empty())
    throw DataError("train_fold: empty train or validation window set");
  {
    std::set<std::string> train_subj, val_subj;
    for (const auto& w : train_windows) train_subj.insert(w.subject_id);
    for (const auto& w : val_windows) val_subj.insert(w.subject_id);
    for (const auto& s : val_subj)
      if (train_subj.count(s))
        throw ConfigError("train and validation subjects overlap: " + s);
  }

  std::ofstream log;
  if (log_file) {
    log.open(*log_file, std::ios::trunc);
    if (!log) throw IoError("cannot open training log " + log_file->string());
  }

  TrainResult result;
  Model& model = result.model;
  model.init(mcfg, cfg.seed);

  StepGradients grads;
  grads.init_like(model);
  AdamState adam;
  adam.lr = cfg.learning_rate;
  adam.beta1 = cfg.beta1;
  adam.beta2 = cfg.beta2;
  adam.eps = cfg.adam_eps;
  ParamTable params = model.param_table();
  adam.init(params);

  // Per-window gradient sinks, reduced in window order after each step so the
  // result does not depend on the thread count.
  const int nthreads = effective_threads(cfg.threads);
  std::vector<FeatureExtractor> wsink(static_cast<size_t>(cfg.batch_size));
  std::vector<ParamTable> wsink_tables(wsink.size());
  for (size_t i = 0; i < wsink.size(); ++i) {
    wsink[i] = model.features;
    wsink[i].visit_params(wsink_tables[i]);
    for (auto& e : wsink_tables[i]) std::fill(e.data->begin(), e.data->end(), 0.0);
  }
  ParamTable batch_feature_table;
  grads.features.visit_params(batch_feature_table);

  Model best = model;
  Model last_finite = model;
  TrainingSummary& summary = result.summary;

  std::vector<size_t> order(train_windows.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, {kTagShuffle, static_cast<uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    double train_total_sum = 0.0;
    int steps = 0;
    bool diverged = false;
    std::string divergence_note;

    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end =
          std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      const int bsize = static_cast<int>(end - begin);
      if (bsize < 2) continue;  // batch statistics need at least two windows

      std::vector<uint64_t> dropout_seeds(static_cast<size_t>(bsize));
      std::vector<uint8_t> labels(static_cast<size_t>(bsize));
      for (int i = 0; i < bsize; ++i) {
        const size_t wi = order[begin + static_cast<size_t>(i)];
        dropout_seeds[static_cast<size_t>(i)] = derive_seed(
            cfg.seed, {kTagDropout, static_cast<uint64_t>(epoch),
                       static_cast<uint64_t>(steps), static_cast<uint64_t>(wi)});
        labels[static_cast<size_t>(i)] = train_windows[wi].label;
      }

      // Phase 1: forward features (parallel over windows, no trace).
      std::vector<FeatureMap> feats(static_cast<size_t>(bsize));
#pragma omp parallel for schedule(static) num_threads(nthreads)
      for (int i = 0; i < bsize; ++i) {
        const size_t wi = order[begin + static_cast<size_t>(i)];
        feats[static_cast<size_t>(i)] = model.features.forward(
            train_windows[wi].signal, RunMode::Train,
            dropout_seeds[static_cast<size_t>(i)], nullptr);
      }

      // Phase 2: head forward/backward (serial, batch-coupled).
      grads.zero();
      std::vector<Mat> dfeats;
      LossBreakdown breakdown;
      try {
        auto out = head_batch_train(model.bank, model.head, feats, labels,
                                    cfg.weights, mcfg.eps_div,
                                    /*update_running=*/true, &dfeats, &grads.bank,
                                    &grads.head);
        breakdown = out.loss;
      } catch (const NumericError& e) {
        diverged = true;
        divergence_note = e.what();
      }
      if (!diverged && !std::isfinite(breakdown.total)) {
        diverged = true;
        divergence_note = "non-finite total loss";
      }
      if (diverged) {
        summary.diverged = true;
        summary.note = divergence_note;
        break;
      }

      append_jsonl(log_file ? &log : nullptr,
                   {{"type", "step"},
                    {"epoch", epoch},
                    {"step", steps},
                    {"l_class", breakdown.l_class},
                    {"l_dist", breakdown.l_dist},
                    {"l_r1", breakdown.l_r1},
                    {"l_r2", breakdown.l_r2},
                    {"l_l1", breakdown.l_l1},
                    {"total", breakdown.total}});

      // Phase 3: recompute features with traces and backpropagate per window.
#pragma omp parallel for schedule(static) num_threads(nthreads)
      for (int i = 0; i < bsize; ++i) {
        const size_t wi = order[begin + static_cast<size_t>(i)];
        FeatureTrace trace;
        model.features.forward(train_windows[wi].signal, RunMode::Train,
                               dropout_seeds[static_cast<size_t>(i)], &trace);
        model.features.backward(trace, dfeats[static_cast<size_t>(i)],
                                wsink[static_cast<size_t>(i)]);
      }
      for (int i = 0; i < bsize; ++i) {
        for (size_t k = 0; k < batch_feature_table.size(); ++k) {
          Vec& dst = *batch_feature_table[k].data;
          Vec& src = *wsink_tables[static_cast<size_t>(i)][k].data;
          for (size_t q = 0; q < dst.size(); ++q) dst[q] += src[q];
          std::fill(src.begin(), src.end(), 0.0);
        }
      }

      adam.step(params, grads.table);
      train_total_sum += breakdown.total;
      ++steps;
    }

    if (summary.diverged) {
      model = last_finite;
      break;
    }

    EpochLog el;
    el.epoch = epoch;
    el.train_total_mean = steps > 0 ? train_total_sum / steps : 0.0;

    if (cfg.projection_period > 0 && epoch % cfg.projection_period == 0) {
      auto [r1_full, r2_full] =
          project_prototypes_stream(model, train_windows, cfg.threads);
      el.projected = true;
      el.full_r1 = r1_full;
      el.full_r2 = r2_full;
    }

    el.val_loss = evaluate_loss(model, val_windows, cfg.weights, cfg.batch_size,
                                cfg.threads);
    {
      auto preds = predict_windows(model, val_windows, cfg.threads);
      int correct = 0;
      for (const auto& p : preds)
        if (p.pred.predicted == p.label) ++correct;
      el.val_accuracy = static_cast<double>(correct) / preds.size();
    }

    append_jsonl(log_file ? &log : nullptr,
                 {{"type", "epoch"},
                  {"epoch", epoch},
                  {"train_total_mean", el.train_total_mean},
                  {"val_total", el.val_loss.total},
                  {"val_class", el.val_loss.l_class},
                  {"val_accuracy", el.val_accuracy},
                  {"learning_rate", cfg.learning_rate},
                  {"projected", el.projected}});
    if (on_epoch) on_epoch(el);

    summary.epochs_trained = epoch;
    last_finite = model;

    if (el.val_loss.total < summary.best_val_loss) {
      summary.best_val_loss = el.val_loss.total;
      summary.best_epoch = epoch;
      best = model;
    } else if (epoch - summary.best_epoch >= cfg.patience) {
      summary.stopped_early = true;
      break;
    }
  }

  if (!summary.diverged) model = best;

  if (cfg.final_projection && !summary.diverged) {
    project_prototypes_stream(model, train_windows, cfg.threads);
    summary.projected = true;
  }
  return result;
}

// --- cross-validation ----------------------------------------------------------------

CrossValidationResult cross_validate(
    const Dataset& dataset, const FoldAssignment& folds, const ModelConfig& mcfg,
    const TrainConfig& cfg,
    const std::function<void(int fold, const TrainResult&)>& save_fold) {
  std::vector<Recording> normalized;
  normalized.reserve(dataset.recordings.size());
  for (const auto& r : dataset.recordings) normalized.push_back(normalize_recording(r));

  CrossValidationResult out;
  for (int f = 0; f < folds.fold_count; ++f) {
    FoldInfo info;
    info.fold = f;
    info.fold_count = folds.fold_count;
    info.val_subject_count =
        static_cast<int>(folds.validation_subjects[static_cast<size_t>(f)].size());
    info.test_subjects = folds.test_subjects(f);
    info.val_subjects = folds.validation_subjects[static_cast<size_t>(f)];
    info.train_subjects = folds.train_subjects(f);

    auto train_w = subject_windows(normalized, info.train_subjects, mcfg.data);
    auto val_w = subject_windows(normalized, info.val_subjects, mcfg.data);
    auto test_w = subject_windows(normalized, info.test_subjects, mcfg.data);

    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = derive_seed(cfg.seed, {0x666f6c64ULL, static_cast<uint64_t>(f)});
    TrainResult tr = train_fold(mcfg, fold_cfg, train_w, val_w);

    auto preds = predict_windows(tr.model, test_w, cfg.threads);
    std::vector<uint8_t> y, yhat;
    for (const auto& p : preds) {
      y.push_back(p.label);
      yhat.push_back(static_cast<uint8_t>(p.pred.predicted));
    }
    FoldOutcome fo;
    fo.info = info;
    fo.summary = tr.summary;
    fo.confusion = confusion(y, yhat);
    fo.metrics = metrics(fo.confusion);
    out.aggregate += fo.confusion;
    out.folds.push_back(std::move(fo));
    if (save_fold) save_fold(f, tr);
  }
  out.aggregate_metrics = metrics(out.aggregate);
  return out;
}

// --- ensembling --------------------------------------------------------------------------

void Ensemble::validate() const {
  if (members.empty()) throw ConfigError("ensemble: no members");
  const auto& first = members.front().cfg;
  for (const auto& m : members) {
    if (m.cfg.data.num_classes != first.data.num_classes)
      throw ConfigError("ensemble: members disagree on the class count");
    if (m.cfg.data.window_samples() != first.data.window_samples())
      throw ConfigError("ensemble: members disagree on the input window contract");
  }
}

StagePrediction ensemble_predict(const Ensemble& e, std::span<const double> signal) {
  e.validate();
  const int nc = e.members.front().cfg.data.num_classes;
  StagePrediction out;
  out.logits.assign(static_cast<size_t>(nc), 0.0);
  for (const auto& m : e.members) {
    const auto ev = m.evaluate_window(signal);
    for (int c = 0; c < nc; ++c)
      out.logits[static_cast<size_t>(c)] += ev.pred.logits[static_cast<size_t>(c)];
  }
  out.activations.assign(static_cast<size_t>(nc), 0.0);
  double total = 0.0;
  for (int c = 0; c < nc; ++c) {
    const double a = 1.0 / (1.0 + std::exp(-out.logits[static_cast<size_t>(c)]));
    out.activations[static_cast<size_t>(c)] = a;
    total += a;
  }
  out.probabilities.assign(static_cast<size_t>(nc), 0.0);
  for (int c = 0; c < nc; ++c)
    out.probabilities[static_cast<size_t>(c)] =
        out.activations[static_cast<size_t>(c)] / total;
  out.predicted = 0;
  for (int c = 1; c < nc; ++c)
    if (out.activations[static_cast<size_t>(c)] >
        out.activations[static_cast<size_t>(out.predicted)])
      out.predicted = c;
  return out;
}

std::vector<PredictionRecord> ensemble_predict_windows(
    const Ensemble& e, const std::vector<EpochWindow>& windows, int threads) {
  e.validate();
  std::vector<PredictionRecord> out(windows.size());
  const int nthreads = effective_threads(threads);
  const int n = static_cast<int>(windows.size());
#pragma omp parallel for schedule(static) num_threads(nthreads)
  for (int i = 0; i < n; ++i) {
    const auto& w = windows[static_cast<size_t>(i)];
    PredictionRecord r;
    r.ref = {w.subject_id, w.epoch_index};
    r.label = w.label;
    r.pred = ensemble_predict(e, w.signal);
    out[static_cast<size_t>(i)] = std::move(r);
  }
  return out;
}

}  // namespace wavestage
