#include "wavestage/layers.hpp"

#include <Eigen/Core>
#include <cmath>

#include "wavestage/errors.hpp"

namespace wavestage {

namespace {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

void init_kaiming_uniform(Vec& w, int fan_in, Rng& rng) {
  const double a = std::sqrt(6.0 / fan_in);
  for (auto& v : w) v = rng.uniform(-a, a);
}

// --- Conv1d -----------------------------------------------------------------

void Conv1d::init(int in_channels, int out_channels, int k, int s, bool bias,
                  Rng& rng) {
  in_ch = in_channels;
  out_ch = out_channels;
  kernel = k;
  stride = s;
  has_bias = bias;
  w = Mat(out_ch, in_ch * kernel);
  init_kaiming_uniform(w.d, in_ch * kernel, rng);
  b.assign(static_cast<size_t>(out_ch), 0.0);
}

void Conv1d::forward(const Mat& in, Mat& out) const {
  if (in.rows != in_ch) throw NumericError("conv1d: channel mismatch");
  if (in.cols < kernel) throw NumericError("conv1d: input shorter than kernel");
  const int t_out = out_len(in.cols);
  out = Mat(out_ch, t_out);

  // im2col: rows = in_ch * kernel, cols = t_out.
  Mat cols(in_ch * kernel, t_out);
  for (int c = 0; c < in_ch; ++c) {
    const double* src = in.row(c);
    for (int k = 0; k < kernel; ++k) {
      double* dst = cols.row(c * kernel + k);
      for (int t = 0; t < t_out; ++t) dst[t] = src[t * stride + k];
    }
  }
  MapM o(out.d.data(), out.rows, out.cols);
  CMapM wm(w.d.data(), w.rows, w.cols);
  CMapM cm(cols.d.data(), cols.rows, cols.cols);
  o.noalias() = wm * cm;
  if (has_bias)
    for (int oc = 0; oc < out_ch; ++oc) {
      double* r = out.row(oc);
      for (int t = 0; t < t_out; ++t) r[t] += b[static_cast<size_t>(oc)];
    }
}

void Conv1d::backward(const Mat& in, const Mat& dout, Mat* din, Conv1d& g) const {
  const int t_out = dout.cols;

  Mat cols(in_ch * kernel, t_out);
  for (int c = 0; c < in_ch; ++c) {
    const double* src = in.row(c);
    for (int k = 0; k < kernel; ++k) {
      double* dst = cols.row(c * kernel + k);
      for (int t = 0; t < t_out; ++t) dst[t] = src[t * stride + k];
    }
  }

  CMapM dy(dout.d.data(), dout.rows, dout.cols);
  CMapM cm(cols.d.data(), cols.rows, cols.cols);
  MapM gw(g.w.d.data(), g.w.rows, g.w.cols);
  gw.noalias() += dy * cm.transpose();
  if (has_bias)
    for (int oc = 0; oc < out_ch; ++oc) {
      const double* r = dout.row(oc);
      double s = 0.0;
      for (int t = 0; t < t_out; ++t) s += r[t];
      g.b[static_cast<size_t>(oc)] += s;
    }

  if (din) {
    Mat dcols(in_ch * kernel, t_out);
    MapM dc(dcols.d.data(), dcols.rows, dcols.cols);
    CMapM wm(w.d.data(), w.rows, w.cols);
    dc.noalias() = wm.transpose() * dy;
    *din = Mat(in.rows, in.cols);
    for (int c = 0; c < in_ch; ++c) {
      double* dst = din->row(c);
      for (int k = 0; k < kernel; ++k) {
        const double* src = dcols.row(c * kernel + k);
        for (int t = 0; t < t_out; ++t) dst[t * stride + k] += src[t];
      }
    }
  }
}

void Conv1d::visit_params(const std::string& prefix, ParamTable& t) {
  t.push_back({prefix + ".weight", &w.d, {out_ch, in_ch, kernel}});
  if (has_bias) t.push_back({prefix + ".bias", &b, {out_ch}});
}

// --- DepthwiseConv1d ---------------------------------------------------------

void DepthwiseConv1d::init(int ch, int k, Rng& rng) {
  if (k % 2 == 0) throw ConfigError("depthwise kernel must be odd");
  channels = ch;
  kernel = k;
  w = Mat(channels, kernel);
  init_kaiming_uniform(w.d, kernel, rng);
  b.assign(static_cast<size_t>(channels), 0.0);
}

void DepthwiseConv1d::forward(const Mat& in, Mat& out) const {
  if (in.rows != channels) throw NumericError("depthwise conv: channel mismatch");
  const int t = in.cols;
  const int half = kernel / 2;
  out = Mat(channels, t);
  for (int c = 0; c < channels; ++c) {
    const double* x = in.row(c);
    const double* wk = w.row(c);
    double* y = out.row(c);
    const double bias = b[static_cast<size_t>(c)];
    for (int i = 0; i < t; ++i) {
      double s = bias;
      const int k_lo = std::max(0, half - i);
      const int k_hi = std::min(kernel, t + half - i);
      for (int k = k_lo; k < k_hi; ++k) s += wk[k] * x[i + k - half];
      y[i] = s;
    }
  }
}

void DepthwiseConv1d::backward(const Mat& in, const Mat& dout, Mat& din,
                               DepthwiseConv1d& g) const {
  const int t = in.cols;
  const int half = kernel / 2;
  din = Mat(channels, t);
  for (int c = 0; c < channels; ++c) {
    const double* x = in.row(c);
    const double* wk = w.row(c);
    const double* dy = dout.row(c);
    double* dx = din.row(c);
    double* gw = g.w.row(c);
    double gb = 0.0;
    for (int i = 0; i < t; ++i) {
      const double d = dy[i];
      gb += d;
      const int k_lo = std::max(0, half - i);
      const int k_hi = std::min(kernel, t + half - i);
      for (int k = k_lo; k < k_hi; ++k) {
        gw[k] += d * x[i + k - half];
        dx[i + k - half] += d * wk[k];
      }
    }
    g.b[static_cast<size_t>(c)] += gb;
  }
}

void DepthwiseConv1d::visit_params(const std::string& prefix, ParamTable& t) {
  t.push_back({prefix + ".weight", &w.d, {channels, kernel}});
  t.push_back({prefix + ".bias", &b, {channels}});
}

// --- InstanceNorm ------------------------------------------------------------

void InstanceNorm::init(int ch) {
  channels = ch;
  gamma.assign(static_cast<size_t>(ch), 1.0);
  beta.assign(static_cast<size_t>(ch), 0.0);
}

void InstanceNorm::forward(const Mat& in, Mat& out, Stats& stats) const {
  if (in.rows != channels) throw NumericError("instance norm: channel mismatch");
  const int t = in.cols;
  out = Mat(channels, t);
  stats.mean.assign(static_cast<size_t>(channels), 0.0);
  stats.inv_sd.assign(static_cast<size_t>(channels), 0.0);
  for (int c = 0; c < channels; ++c) {
    const double* x = in.row(c);
    double mu = 0.0;
    for (int i = 0; i < t; ++i) mu += x[i];
    mu /= t;
    double var = 0.0;
    for (int i = 0; i < t; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= t;
    const double inv = 1.0 / std::sqrt(var + eps);
    stats.mean[static_cast<size_t>(c)] = mu;
    stats.inv_sd[static_cast<size_t>(c)] = inv;
    const double gc = gamma[static_cast<size_t>(c)];
    const double bc = beta[static_cast<size_t>(c)];
    double* y = out.row(c);
    for (int i = 0; i < t; ++i) y[i] = gc * (x[i] - mu) * inv + bc;
  }
}

void InstanceNorm::backward(const Mat& in, const Stats& stats, const Mat& dout,
                            Mat& din, InstanceNorm& g) const {
  const int t = in.cols;
  din = Mat(channels, t);
  for (int c = 0; c < channels; ++c) {
    const double* x = in.row(c);
    const double* dy = dout.row(c);
    double* dx = din.row(c);
    const double mu = stats.mean[static_cast<size_t>(c)];
    const double inv = stats.inv_sd[static_cast<size_t>(c)];
    const double gc = gamma[static_cast<size_t>(c)];

    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int i = 0; i < t; ++i) {
      const double xhat = (x[i] - mu) * inv;
      sum_dy += dy[i];
      sum_dy_xhat += dy[i] * xhat;
    }
    g.gamma[static_cast<size_t>(c)] += sum_dy_xhat;
    g.beta[static_cast<size_t>(c)] += sum_dy;

    const double m = static_cast<double>(t);
    for (int i = 0; i < t; ++i) {
      const double xhat = (x[i] - mu) * inv;
      dx[i] = gc * inv * (dy[i] - sum_dy / m - xhat * sum_dy_xhat / m);
    }
  }
}

void InstanceNorm::visit_params(const std::string& prefix, ParamTable& t) {
  t.push_back({prefix + ".gamma", &gamma, {channels}});
  t.push_back({prefix + ".beta", &beta, {channels}});
}

// --- LayerNorm ---------------------------------------------------------------

void LayerNorm::init(int ch) {
  channels = ch;
  gamma.assign(static_cast<size_t>(ch), 1.0);
  beta.assign(static_cast<size_t>(ch), 0.0);
}

void LayerNorm::forward(const Mat& in, Mat& out, Stats& stats) const {
  if (in.rows != channels) throw NumericError("layer norm: channel mismatch");
  const int t = in.cols;
  out = Mat(channels, t);
  stats.mean.assign(static_cast<size_t>(t), 0.0);
  stats.inv_sd.assign(static_cast<size_t>(t), 0.0);
  for (int i = 0; i < t; ++i) {
    double mu = 0.0;
    for (int c = 0; c < channels; ++c) mu += in.at(c, i);
    mu /= channels;
    double var = 0.0;
    for (int c = 0; c < channels; ++c) {
      const double d = in.at(c, i) - mu;
      var += d * d;
    }
    var /= channels;
    const double inv = 1.0 / std::sqrt(var + eps);
    stats.mean[static_cast<size_t>(i)] = mu;
    stats.inv_sd[static_cast<size_t>(i)] = inv;
    for (int c = 0; c < channels; ++c)
      out.at(c, i) =
          gamma[static_cast<size_t>(c)] * (in.at(c, i) - mu) * inv +
          beta[static_cast<size_t>(c)];
  }
}

void LayerNorm::backward(const Mat& in, const Stats& stats, const Mat& dout,
                         Mat& din, LayerNorm& g) const {
  const int t = in.cols;
  din = Mat(channels, t);
  for (int i = 0; i < t; ++i) {
    const double mu = stats.mean[static_cast<size_t>(i)];
    const double inv = stats.inv_sd[static_cast<size_t>(i)];
    double sum_gdy = 0.0, sum_gdy_xhat = 0.0;
    for (int c = 0; c < channels; ++c) {
      const double xhat = (in.at(c, i) - mu) * inv;
      const double gdy = dout.at(c, i) * gamma[static_cast<size_t>(c)];
      sum_gdy += gdy;
      sum_gdy_xhat += gdy * xhat;
      g.gamma[static_cast<size_t>(c)] += dout.at(c, i) * xhat;
      g.beta[static_cast<size_t>(c)] += dout.at(c, i);
    }
    const double m = static_cast<double>(channels);
    for (int c = 0; c < channels; ++c) {
      const double xhat = (in.at(c, i) - mu) * inv;
      const double gdy = dout.at(c, i) * gamma[static_cast<size_t>(c)];
      din.at(c, i) = inv * (gdy - sum_gdy / m - xhat * sum_gdy_xhat / m);
    }
  }
}

void LayerNorm::visit_params(const std::string& prefix, ParamTable& t) {
  t.push_back({prefix + ".gamma", &gamma, {channels}});
  t.push_back({prefix + ".beta", &beta, {channels}});
}

// --- GELU ---------------------------------------------------------------------

void gelu_forward(const Mat& in, Mat& out) {
  out = Mat(in.rows, in.cols);
  for (size_t i = 0; i < in.d.size(); ++i) {
    const double x = in.d[i];
    out.d[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
}

void gelu_backward(const Mat& in, const Mat& dout, Mat& din) {
  din = Mat(in.rows, in.cols);
  for (size_t i = 0; i < in.d.size(); ++i) {
    const double x = in.d[i];
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    din.d[i] = dout.d[i] * (cdf + x * pdf);
  }
}

// --- MaxPool1d -----------------------------------------------------------------

void MaxPool1d::forward(const Mat& in, Mat& out, std::vector<int>& argmax) const {
  const int t_out = out_len(in.cols);
  if (t_out <= 0) throw NumericError("max pool: input shorter than kernel");
  out = Mat(in.rows, t_out);
  argmax.assign(static_cast<size_t>(in.rows) * t_out, 0);
  for (int c = 0; c < in.rows; ++c) {
    const double* x = in.row(c);
    double* y = out.row(c);
    int* am = argmax.data() + static_cast<size_t>(c) * t_out;
    for (int i = 0; i < t_out; ++i) {
      int best = i * stride;
      double bv = x[best];
      for (int k = 1; k < kernel; ++k) {
        const int idx = i * stride + k;
        if (x[idx] > bv) {
          bv = x[idx];
          best = idx;
        }
      }
      y[i] = bv;
      am[i] = best;
    }
  }
}

void MaxPool1d::backward(const std::vector<int>& argmax, const Mat& dout,
                         Mat& din) const {
  // din must be pre-sized by the caller (it knows the input length).
  din.zero();
  const int t_out = dout.cols;
  for (int c = 0; c < dout.rows; ++c) {
    const double* dy = dout.row(c);
    const int* am = argmax.data() + static_cast<size_t>(c) * t_out;
    double* dx = din.row(c);
    for (int i = 0; i < t_out; ++i) dx[am[i]] += dy[i];
  }
}

// --- Dropout --------------------------------------------------------------------

void Dropout::forward_train(const Mat& in, Mat& out, std::vector<uint8_t>& mask,
                            Rng& rng) const {
  out = Mat(in.rows, in.cols);
  mask.assign(in.d.size(), 1);
  if (p <= 0.0) {
    out.d = in.d;
    return;
  }
  const double scale = 1.0 / (1.0 - p);
  for (size_t i = 0; i < in.d.size(); ++i) {
    if (rng.uniform() < p) {
      mask[i] = 0;
      out.d[i] = 0.0;
    } else {
      out.d[i] = in.d[i] * scale;
    }
  }
}

void Dropout::backward(const std::vector<uint8_t>& mask, const Mat& dout,
                       Mat& din) const {
  din = Mat(dout.rows, dout.cols);
  const double scale = p > 0.0 ? 1.0 / (1.0 - p) : 1.0;
  for (size_t i = 0; i < dout.d.size(); ++i)
    din.d[i] = mask[i] ? dout.d[i] * scale : 0.0;
}

// --- SEBlock ----------------------------------------------------------------------

void SEBlock::init(int ch, int reduction, Rng& rng) {
  if (reduction < 1 || ch % reduction != 0)
    throw ConfigError("SE reduction must divide the channel count");
  channels = ch;
  reduced = ch / reduction;
  w1 = Mat(reduced, channels);
  init_kaiming_uniform(w1.d, channels, rng);
  b1.assign(static_cast<size_t>(reduced), 0.0);
  w2 = Mat(channels, reduced);
  init_kaiming_uniform(w2.d, reduced, rng);
  b2.assign(static_cast<size_t>(channels), 0.0);
}

void SEBlock::forward(const Mat& in, Mat& out, Trace& tr,
                      const Vec* gate_override) const {
  const int t = in.cols;
  tr.squeeze.assign(static_cast<size_t>(channels), 0.0);
  for (int c = 0; c < channels; ++c) {
    const double* x = in.row(c);
    double s = 0.0;
    for (int i = 0; i < t; ++i) s += x[i];
    tr.squeeze[static_cast<size_t>(c)] = s / t;
  }
  tr.hidden.assign(static_cast<size_t>(reduced), 0.0);
  for (int r = 0; r < reduced; ++r) {
    double s = b1[static_cast<size_t>(r)];
    const double* wr = w1.row(r);
    for (int c = 0; c < channels; ++c) s += wr[c] * tr.squeeze[static_cast<size_t>(c)];
    tr.hidden[static_cast<size_t>(r)] = s > 0.0 ? s : 0.0;
  }
  tr.gate.assign(static_cast<size_t>(channels), 0.0);
  if (gate_override) {
    tr.gate = *gate_override;
  } else {
    for (int c = 0; c < channels; ++c) {
      double s = b2[static_cast<size_t>(c)];
      const double* wr = w2.row(c);
      for (int r = 0; r < reduced; ++r) s += wr[r] * tr.hidden[static_cast<size_t>(r)];
      tr.gate[static_cast<size_t>(c)] = 1.0 / (1.0 + std::exp(-s));
    }
  }
  out = Mat(in.rows, t);
  for (int c = 0; c < channels; ++c) {
    const double gc = tr.gate[static_cast<size_t>(c)];
    const double* x = in.row(c);
    double* y = out.row(c);
    for (int i = 0; i < t; ++i) y[i] = gc * x[i];
  }
}

void SEBlock::backward(const Mat& in, const Trace& tr, const Mat& dout, Mat& din,
                       SEBlock& g) const {
  const int t = in.cols;
  din = Mat(in.rows, t);

  Vec dgate(static_cast<size_t>(channels), 0.0);
  for (int c = 0; c < channels; ++c) {
    const double gc = tr.gate[static_cast<size_t>(c)];
    const double* x = in.row(c);
    const double* dy = dout.row(c);
    double* dx = din.row(c);
    double s = 0.0;
    for (int i = 0; i < t; ++i) {
      dx[i] = gc * dy[i];
      s += dy[i] * x[i];
    }
    dgate[static_cast<size_t>(c)] = s;
  }

  // through the sigmoid
  Vec dz2(static_cast<size_t>(channels), 0.0);
  for (int c = 0; c < channels; ++c) {
    const double gc = tr.gate[static_cast<size_t>(c)];
    dz2[static_cast<size_t>(c)] = dgate[static_cast<size_t>(c)] * gc * (1.0 - gc);
  }
  // fc2
  Vec dhidden(static_cast<size_t>(reduced), 0.0);
  for (int c = 0; c < channels; ++c) {
    const double d = dz2[static_cast<size_t>(c)];
    g.b2[static_cast<size_t>(c)] += d;
    const double* wr = w2.row(c);
    double* gw = g.w2.row(c);
    for (int r = 0; r < reduced; ++r) {
      gw[r] += d * tr.hidden[static_cast<size_t>(r)];
      dhidden[static_cast<size_t>(r)] += d * wr[r];
    }
  }
  // ReLU
  for (int r = 0; r < reduced; ++r)
    if (tr.hidden[static_cast<size_t>(r)] <= 0.0) dhidden[static_cast<size_t>(r)] = 0.0;
  // fc1
  Vec dsqueeze(static_cast<size_t>(channels), 0.0);
  for (int r = 0; r < reduced; ++r) {
    const double d = dhidden[static_cast<size_t>(r)];
    g.b1[static_cast<size_t>(r)] += d;
    const double* wr = w1.row(r);
    double* gw = g.w1.row(r);
    for (int c = 0; c < channels; ++c) {
      gw[c] += d * tr.squeeze[static_cast<size_t>(c)];
      dsqueeze[static_cast<size_t>(c)] += d * wr[c];
    }
  }
  // squeeze (mean over time)
  for (int c = 0; c < channels; ++c) {
    const double d = dsqueeze[static_cast<size_t>(c)] / t;
    double* dx = din.row(c);
    for (int i = 0; i < t; ++i) dx[i] += d;
  }
}

void SEBlock::visit_params(const std::string& prefix, ParamTable& t) {
  t.push_back({prefix + ".fc1.weight", &w1.d, {reduced, channels}});
  t.push_back({prefix + ".fc1.bias", &b1, {reduced}});
  t.push_back({prefix + ".fc2.weight", &w2.d, {channels, reduced}});
  t.push_back({prefix + ".fc2.bias", &b2, {channels}});
}

}  // namespace wavestage
