#include "wavestage/decision.hpp"

#include <cmath>

#include "wavestage/errors.hpp"

namespace wavestage {

void BatchNormVec::init(int d) {
  dim = d;
  gamma.assign(static_cast<size_t>(d), 1.0);
  beta.assign(static_cast<size_t>(d), 0.0);
  run_mean.assign(static_cast<size_t>(d), 0.0);
  run_var.assign(static_cast<size_t>(d), 1.0);
}

void BatchNormVec::forward_train(const std::vector<Vec>& x, std::vector<Vec>& y,
                                 BatchStats& stats, bool update_running) {
  const size_t n = x.size();
  if (n < 1) throw NumericError("batch norm: empty batch");
  stats.mean.assign(static_cast<size_t>(dim), 0.0);
  stats.inv_sd.assign(static_cast<size_t>(dim), 0.0);
  for (const auto& v : x)
    for (int c = 0; c < dim; ++c) stats.mean[static_cast<size_t>(c)] += v[static_cast<size_t>(c)];
  for (int c = 0; c < dim; ++c) stats.mean[static_cast<size_t>(c)] /= static_cast<double>(n);

  Vec var(static_cast<size_t>(dim), 0.0);
  for (const auto& v : x)
    for (int c = 0; c < dim; ++c) {
      const double d = v[static_cast<size_t>(c)] - stats.mean[static_cast<size_t>(c)];
      var[static_cast<size_t>(c)] += d * d;
    }
  for (int c = 0; c < dim; ++c) {
    var[static_cast<size_t>(c)] /= static_cast<double>(n);
    stats.inv_sd[static_cast<size_t>(c)] = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);
  }

  if (update_running) {
    for (int c = 0; c < dim; ++c) {
      run_mean[static_cast<size_t>(c)] =
          (1.0 - momentum) * run_mean[static_cast<size_t>(c)] +
          momentum * stats.mean[static_cast<size_t>(c)];
      run_var[static_cast<size_t>(c)] =
          (1.0 - momentum) * run_var[static_cast<size_t>(c)] +
          momentum * var[static_cast<size_t>(c)];
    }
  }

  y.resize(n);
  for (size_t i = 0; i < n; ++i) {
    y[i].assign(static_cast<size_t>(dim), 0.0);
    for (int c = 0; c < dim; ++c)
      y[i][static_cast<size_t>(c)] =
          gamma[static_cast<size_t>(c)] *
              (x[i][static_cast<size_t>(c)] - stats.mean[static_cast<size_t>(c)]) *
              stats.inv_sd[static_cast<size_t>(c)] +
          beta[static_cast<size_t>(c)];
  }
}

void BatchNormVec::forward_eval(const Vec& x, Vec& y) const {
  y.assign(static_cast<size_t>(dim), 0.0);
  for (int c = 0; c < dim; ++c) {
    const double inv = 1.0 / std::sqrt(run_var[static_cast<size_t>(c)] + eps);
    y[static_cast<size_t>(c)] =
        gamma[static_cast<size_t>(c)] * (x[static_cast<size_t>(c)] - run_mean[static_cast<size_t>(c)]) * inv +
        beta[static_cast<size_t>(c)];
  }
}

void BatchNormVec::backward(const std::vector<Vec>& x, const BatchStats& stats,
                            const std::vector<Vec>& dy, std::vector<Vec>& dx,
                            BatchNormVec& g) const {
  const size_t n = x.size();
  dx.resize(n);
  for (int c = 0; c < dim; ++c) {
    const double mu = stats.mean[static_cast<size_t>(c)];
    const double inv = stats.inv_sd[static_cast<size_t>(c)];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double xhat = (x[i][static_cast<size_t>(c)] - mu) * inv;
      sum_dy += dy[i][static_cast<size_t>(c)];
      sum_dy_xhat += dy[i][static_cast<size_t>(c)] * xhat;
    }
    g.gamma[static_cast<size_t>(c)] += sum_dy_xhat;
    g.beta[static_cast<size_t>(c)] += sum_dy;
    const double gc = gamma[static_cast<size_t>(c)];
    for (size_t i = 0; i < n; ++i) {
      if (dx[i].size() != static_cast<size_t>(dim))
        dx[i].assign(static_cast<size_t>(dim), 0.0);
      const double xhat = (x[i][static_cast<size_t>(c)] - mu) * inv;
      dx[i][static_cast<size_t>(c)] =
          gc * inv *
          (dy[i][static_cast<size_t>(c)] - sum_dy / static_cast<double>(n) -
           xhat * sum_dy_xhat / static_cast<double>(n));
    }
  }
}

void BatchNormVec::visit_params(const std::string& prefix, ParamTable& t) {
  t.push_back({prefix + ".gamma", &gamma, {dim}});
  t.push_back({prefix + ".beta", &beta, {dim}});
}

void BatchNormVec::visit_buffers(const std::string& prefix, ParamTable& t) {
  t.push_back({prefix + ".running_mean", &run_mean, {dim}});
  t.push_back({prefix + ".running_var", &run_var, {dim}});
}

void DecisionHead::init(int prototypes, int classes, double eps, Rng& rng) {
  if (prototypes < 1) throw ConfigError("decision head needs at least 1 prototype");
  m = prototypes;
  num_classes = classes;
  eps_sim = eps;
  wbn.init(m);
  pbn.init(m);
  fc_w = Mat(2 * m, classes);
  const double a = 1.0 / std::sqrt(static_cast<double>(2 * m));
  for (auto& v : fc_w.d) v = rng.uniform(-a, a);
  fc_b.assign(static_cast<size_t>(classes), 0.0);
}

void DecisionHead::visit_params(ParamTable& t) {
  wbn.visit_params("head.wbn", t);
  pbn.visit_params("head.pbn", t);
  t.push_back({"head.fc.weight", &fc_w.d, {2 * m, num_classes}});
  t.push_back({"head.fc.bias", &fc_b, {num_classes}});
}

void DecisionHead::visit_buffers(ParamTable& t) {
  wbn.visit_buffers("head.wbn", t);
  pbn.visit_buffers("head.pbn", t);
}

Mat similarity_map(const Mat& dist, double eps_sim) {
  if (eps_sim <= 0.0 || eps_sim >= 1.0)
    throw ConfigError("eps_sim must lie in (0, 1)");
  Mat sim(dist.rows, dist.cols);
  for (size_t i = 0; i < dist.d.size(); ++i) {
    const double d = dist.d[i];
    sim.d[i] = std::log((d + 1.0) / (d + eps_sim));
  }
  return sim;
}

void similarity_backward(const Mat& dist, double eps_sim, const Mat& dsim,
                         Mat& ddist) {
  ddist = Mat(dist.rows, dist.cols);
  for (size_t i = 0; i < dist.d.size(); ++i) {
    const double d = dist.d[i];
    ddist.d[i] = dsim.d[i] * (1.0 / (d + 1.0) - 1.0 / (d + eps_sim));
  }
}

Vec max_pool_rows(const Mat& sim, std::vector<int>* argmax) {
  Vec out(static_cast<size_t>(sim.rows), 0.0);
  if (argmax) argmax->assign(static_cast<size_t>(sim.rows), 0);
  for (int j = 0; j < sim.rows; ++j) {
    const double* r = sim.row(j);
    int best = 0;
    for (int p = 1; p < sim.cols; ++p)
      if (r[p] > r[best]) best = p;
    out[static_cast<size_t>(j)] = r[best];
    if (argmax) (*argmax)[static_cast<size_t>(j)] = best;
  }
  return out;
}

Vec mean_pool_rows(const Mat& sim) {
  Vec out(static_cast<size_t>(sim.rows), 0.0);
  for (int j = 0; j < sim.rows; ++j) {
    const double* r = sim.row(j);
    double s = 0.0;
    for (int p = 0; p < sim.cols; ++p) s += r[p];
    out[static_cast<size_t>(j)] = s / sim.cols;
  }
  return out;
}

namespace {
Vec relu_vec(Vec v) {
  for (auto& x : v)
    if (x < 0.0) x = 0.0;
  return v;
}
}  // namespace

Vec wscore_eval(const Mat& sim, const DecisionHead& head) {
  Vec pooled = max_pool_rows(sim);
  Vec y;
  head.wbn.forward_eval(pooled, y);
  return relu_vec(std::move(y));
}

Vec pscore_eval(const Mat& sim, const DecisionHead& head) {
  Vec pooled = mean_pool_rows(sim);
  Vec y;
  head.pbn.forward_eval(pooled, y);
  return relu_vec(std::move(y));
}

StagePrediction decide(const Vec& score, const DecisionHead& head) {
  if (score.size() != static_cast<size_t>(2 * head.m))
    throw NumericError("decide: score length must be 2M");
  StagePrediction pred;
  const int nc = head.num_classes;
  pred.logits.assign(static_cast<size_t>(nc), 0.0);
  for (int c = 0; c < nc; ++c) {
    double s = head.fc_b[static_cast<size_t>(c)];
    for (int i = 0; i < 2 * head.m; ++i)
      s += score[static_cast<size_t>(i)] * head.fc_w.at(i, c);
    pred.logits[static_cast<size_t>(c)] = s;
  }
  pred.activations.assign(static_cast<size_t>(nc), 0.0);
  double total = 0.0;
  for (int c = 0; c < nc; ++c) {
    const double a = 1.0 / (1.0 + std::exp(-pred.logits[static_cast<size_t>(c)]));
    pred.activations[static_cast<size_t>(c)] = a;
    total += a;
  }
  pred.probabilities.assign(static_cast<size_t>(nc), 0.0);
  for (int c = 0; c < nc; ++c)
    pred.probabilities[static_cast<size_t>(c)] =
        pred.activations[static_cast<size_t>(c)] / total;
  pred.predicted = 0;
  for (int c = 1; c < nc; ++c)
    if (pred.activations[static_cast<size_t>(c)] >
        pred.activations[static_cast<size_t>(pred.predicted)])
      pred.predicted = c;
  return pred;
}

Mat contribution_matrix(const Vec& score, const DecisionHead& head) {
  Mat contrib(2 * head.m, head.num_classes);
  for (int i = 0; i < 2 * head.m; ++i)
    for (int c = 0; c < head.num_classes; ++c)
      contrib.at(i, c) = score[static_cast<size_t>(i)] * head.fc_w.at(i, c);
  return contrib;
}

void prediction_backward(const StagePrediction& pred, const Vec& dprobs,
                         Vec& dlogits) {
  const int nc = static_cast<int>(pred.logits.size());
  double total = 0.0;
  for (int c = 0; c < nc; ++c) total += pred.activations[static_cast<size_t>(c)];

  // probabilities = activations / total
  double dot = 0.0;
  for (int c = 0; c < nc; ++c)
    dot += dprobs[static_cast<size_t>(c)] * pred.activations[static_cast<size_t>(c)];
  Vec dact(static_cast<size_t>(nc), 0.0);
  for (int c = 0; c < nc; ++c)
    dact[static_cast<size_t>(c)] =
        dprobs[static_cast<size_t>(c)] / total - dot / (total * total);

  dlogits.assign(static_cast<size_t>(nc), 0.0);
  for (int c = 0; c < nc; ++c) {
    const double a = pred.activations[static_cast<size_t>(c)];
    dlogits[static_cast<size_t>(c)] = dact[static_cast<size_t>(c)] * a * (1.0 - a);
  }
}

}  // namespace wavestage
