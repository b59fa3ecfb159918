#include "wavestage/model.hpp"

#include <cmath>
#include <limits>

#include "wavestage/errors.hpp"

namespace wavestage {

void ModelConfig::validate() const {
  data.validate();
  features.validate();
  if (num_prototypes < data.num_classes)
    throw ConfigError("need at least one prototype per class (M >= 5)");
  if (proto_len < 1) throw ConfigError("proto_len (K1) must be >= 1");
  if (eps_sim <= 0.0 || eps_sim >= 1.0) throw ConfigError("eps_sim must lie in (0,1)");
  if (eps_div <= 0.0) throw ConfigError("eps_div must be positive");
}

void Model::init(const ModelConfig& c, uint64_t seed) {
  c.validate();
  cfg = c;
  Rng feat_rng(derive_seed(seed, {0x66656174ULL}));  // "feat"
  features.init(c.features, feat_rng);
  if (c.proto_len > feature_positions())
    throw ConfigError("proto_len (K1) exceeds the latent length K");
  Rng bank_rng(derive_seed(seed, {0x62616e6bULL}));  // "bank"
  bank.init(c.num_prototypes, c.proto_len, c.features.channels, bank_rng);
  Rng head_rng(derive_seed(seed, {0x68656164ULL}));  // "head"
  head.init(c.num_prototypes, c.data.num_classes, c.eps_sim, head_rng);
}

ParamTable Model::param_table() {
  ParamTable t;
  features.visit_params(t);
  bank.visit_params(t);
  head.visit_params(t);
  return t;
}

ParamTable Model::buffer_table() {
  ParamTable t;
  head.visit_buffers(t);
  return t;
}

void Model::zero_params() {
  for (auto& e : param_table()) std::fill(e.data->begin(), e.data->end(), 0.0);
  for (auto& e : buffer_table()) std::fill(e.data->begin(), e.data->end(), 0.0);
}

int Model::feature_positions() const {
  return features.feature_len(cfg.data.window_samples());
}

FeatureMap Model::extract(std::span<const double> x) const {
  if (x.size() != static_cast<size_t>(cfg.data.window_samples()))
    throw DataError("window length does not match E*F*L");
  return features.forward(x, RunMode::Eval, 0, nullptr);
}

Model::WindowEval Model::evaluate_window(std::span<const double> x) const {
  return head_eval(bank, head, extract(x));
}

Model::WindowEval head_eval(const PrototypeBank& bank, const DecisionHead& head,
                            const FeatureMap& fm) {
  const Mat dist = distance_map(fm, bank);
  const Mat sim = similarity_map(dist, head.eps_sim);
  const Vec ws = wscore_eval(sim, head);
  const Vec ps = pscore_eval(sim, head);
  Model::WindowEval ev;
  ev.score.reserve(ws.size() + ps.size());
  ev.score.insert(ev.score.end(), ws.begin(), ws.end());
  ev.score.insert(ev.score.end(), ps.begin(), ps.end());
  ev.pred = decide(ev.score, head);
  return ev;
}

HeadBatchOutput head_batch_train(const PrototypeBank& bank, DecisionHead& head,
                                 const std::vector<FeatureMap>& feats,
                                 std::span<const uint8_t> labels,
                                 const LossWeights& weights, double eps_div,
                                 bool update_running, std::vector<Mat>* dfeats,
                                 PrototypeBank* gbank, DecisionHead* ghead) {
  const size_t n = feats.size();
  if (n == 0) throw NumericError("head batch: empty batch");
  if (labels.size() != n) throw NumericError("head batch: label count mismatch");
  const int m = bank.num;

  // Forward: distances, similarities, pooled estimator inputs.
  std::vector<Mat> dist(n), sim(n);
  std::vector<Vec> wraw(n), praw(n);
  std::vector<std::vector<int>> wargmax(n);
  for (size_t b = 0; b < n; ++b) {
    dist[b] = distance_map(feats[b], bank);
    sim[b] = similarity_map(dist[b], head.eps_sim);
    wraw[b] = max_pool_rows(sim[b], &wargmax[b]);
    praw[b] = mean_pool_rows(sim[b]);
  }

  BatchNormVec::BatchStats wstats, pstats;
  std::vector<Vec> wbn_out, pbn_out;
  head.wbn.forward_train(wraw, wbn_out, wstats, update_running);
  head.pbn.forward_train(praw, pbn_out, pstats, update_running);

  std::vector<Vec> score(n);
  for (size_t b = 0; b < n; ++b) {
    score[b].assign(static_cast<size_t>(2 * m), 0.0);
    for (int j = 0; j < m; ++j) {
      score[b][static_cast<size_t>(j)] = std::max(0.0, wbn_out[b][static_cast<size_t>(j)]);
      score[b][static_cast<size_t>(m + j)] =
          std::max(0.0, pbn_out[b][static_cast<size_t>(j)]);
    }
  }

  HeadBatchOutput out;
  out.preds.resize(n);
  out.scores = score;
  std::vector<Vec> probs(n);
  for (size_t b = 0; b < n; ++b) {
    out.preds[b] = decide(score[b], head);
    probs[b] = out.preds[b].probabilities;
  }

  // R1/R2 minima over the batch's patch population, reusing the distance maps.
  // Scan order is (window, patch), matching a flattened patch list.
  std::vector<std::pair<int, int>> r1_argmin(static_cast<size_t>(m), {-1, -1});
  Vec r1_min(static_cast<size_t>(m), std::numeric_limits<double>::infinity());
  double r2_total = 0.0;
  size_t patch_total = 0;
  std::vector<std::vector<int>> r2_argmin(n);
  for (size_t b = 0; b < n; ++b) {
    const int p_count = dist[b].cols;
    r2_argmin[b].assign(static_cast<size_t>(p_count), 0);
    patch_total += static_cast<size_t>(p_count);
    for (int p = 0; p < p_count; ++p) {
      double best = std::numeric_limits<double>::infinity();
      int bj = 0;
      for (int j = 0; j < m; ++j) {
        const double d = dist[b].at(j, p);
        if (d < best) {
          best = d;
          bj = j;
        }
        if (d < r1_min[static_cast<size_t>(j)]) {
          r1_min[static_cast<size_t>(j)] = d;
          r1_argmin[static_cast<size_t>(j)] = {static_cast<int>(b), p};
        }
      }
      r2_total += best;
      r2_argmin[b][static_cast<size_t>(p)] = bj;
    }
  }
  double l_r1 = 0.0;
  for (int j = 0; j < m; ++j) l_r1 += r1_min[static_cast<size_t>(j)];
  l_r1 /= m;
  const double l_r2 = r2_total / static_cast<double>(patch_total);

  bool clamped = false;
  const double l_class = class_loss(probs, labels, &clamped);
  const double l_dist = diversity_loss(bank, eps_div);
  const double l_l1 = l1_loss(head);
  out.loss = total_loss(l_class, l_dist, l_r1, l_r2, l_l1, weights, clamped);

  if (!dfeats && !gbank && !ghead) return out;

  // ---- backward ----
  std::vector<Vec> dprobs;
  class_loss_backward(probs, labels, weights.lambda_class, dprobs);

  std::vector<Vec> dscore(n);
  for (size_t b = 0; b < n; ++b) {
    Vec dlogits;
    prediction_backward(out.preds[b], dprobs[b], dlogits);
    // FC backward
    dscore[b].assign(static_cast<size_t>(2 * m), 0.0);
    for (int c = 0; c < head.num_classes; ++c) {
      const double dl = dlogits[static_cast<size_t>(c)];
      if (ghead) ghead->fc_b[static_cast<size_t>(c)] += dl;
      for (int i = 0; i < 2 * m; ++i) {
        if (ghead) ghead->fc_w.at(i, c) += dl * score[b][static_cast<size_t>(i)];
        dscore[b][static_cast<size_t>(i)] += dl * head.fc_w.at(i, c);
      }
    }
  }
  if (ghead) l1_loss_backward(head, weights.lambda_l1, ghead->fc_w);

  // ReLU backward, split into the two estimator paths.
  std::vector<Vec> d_wbn(n), d_pbn(n);
  for (size_t b = 0; b < n; ++b) {
    d_wbn[b].assign(static_cast<size_t>(m), 0.0);
    d_pbn[b].assign(static_cast<size_t>(m), 0.0);
    for (int j = 0; j < m; ++j) {
      if (wbn_out[b][static_cast<size_t>(j)] > 0.0)
        d_wbn[b][static_cast<size_t>(j)] = dscore[b][static_cast<size_t>(j)];
      if (pbn_out[b][static_cast<size_t>(j)] > 0.0)
        d_pbn[b][static_cast<size_t>(j)] = dscore[b][static_cast<size_t>(m + j)];
    }
  }

  std::vector<Vec> d_wraw, d_praw;
  BatchNormVec wbn_sink, pbn_sink;
  wbn_sink.init(m);
  pbn_sink.init(m);
  std::fill(wbn_sink.gamma.begin(), wbn_sink.gamma.end(), 0.0);
  std::fill(pbn_sink.gamma.begin(), pbn_sink.gamma.end(), 0.0);
  head.wbn.backward(wraw, wstats, d_wbn, d_wraw, wbn_sink);
  head.pbn.backward(praw, pstats, d_pbn, d_praw, pbn_sink);
  if (ghead) {
    for (int j = 0; j < m; ++j) {
      ghead->wbn.gamma[static_cast<size_t>(j)] += wbn_sink.gamma[static_cast<size_t>(j)];
      ghead->wbn.beta[static_cast<size_t>(j)] += wbn_sink.beta[static_cast<size_t>(j)];
      ghead->pbn.gamma[static_cast<size_t>(j)] += pbn_sink.gamma[static_cast<size_t>(j)];
      ghead->pbn.beta[static_cast<size_t>(j)] += pbn_sink.beta[static_cast<size_t>(j)];
    }
  }

  // Pooling backward into the similarity maps, then into the distance maps,
  // where the R1/R2 argmin contributions join.
  const double r2_scale = weights.lambda_r2 / static_cast<double>(patch_total);
  for (size_t b = 0; b < n; ++b) {
    Mat dsim(sim[b].rows, sim[b].cols);
    for (int j = 0; j < m; ++j) {
      dsim.at(j, wargmax[b][static_cast<size_t>(j)]) += d_wraw[b][static_cast<size_t>(j)];
      const double spread = d_praw[b][static_cast<size_t>(j)] / sim[b].cols;
      for (int p = 0; p < sim[b].cols; ++p) dsim.at(j, p) += spread;
    }
    Mat ddist;
    similarity_backward(dist[b], head.eps_sim, dsim, ddist);

    for (int p = 0; p < dist[b].cols; ++p)
      ddist.at(r2_argmin[b][static_cast<size_t>(p)], p) += r2_scale;
    for (int j = 0; j < m; ++j)
      if (r1_argmin[static_cast<size_t>(j)].first == static_cast<int>(b))
        ddist.at(j, r1_argmin[static_cast<size_t>(j)].second) +=
            weights.lambda_r1 / m;

    Mat* df = nullptr;
    if (dfeats) {
      if (dfeats->size() != n) dfeats->resize(n);
      (*dfeats)[b] = Mat(feats[b].k(), feats[b].c());
      df = &(*dfeats)[b];
    }
    distance_map_backward(feats[b], bank, ddist, df, gbank ? &gbank->w : nullptr);
  }

  if (gbank) diversity_loss_backward(bank, eps_div, weights.lambda_dist, gbank->w);

  return out;
}

}  // namespace wavestage
