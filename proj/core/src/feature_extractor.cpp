#include "wavestage/feature_extractor.hpp"

#include <cmath>

#include "wavestage/errors.hpp"

namespace wavestage {

void FeatureExtractorConfig::validate() const {
  if (small_branch.filters != large_branch.filters)
    throw ConfigError("both branches must produce the same channel count");
  if (small_branch.kernel == large_branch.kernel)
    throw ConfigError("branches must use distinct kernel sizes");
  if (channels < 1 || blocks < 1 || units_per_block < 1)
    throw ConfigError("channels, blocks and units_per_block must be >= 1");
  if (se_reduction < 1 || channels % se_reduction != 0)
    throw ConfigError("se_reduction must divide the channel count");
  if (depthwise_kernel % 2 == 0) throw ConfigError("depthwise kernel must be odd");
  if (mrcnn_dropout < 0.0 || mrcnn_dropout >= 1.0)
    throw ConfigError("mrcnn_dropout must lie in [0, 1)");
}

// --- MrcnnBranch ------------------------------------------------------------

void MrcnnBranch::init(const MrcnnBranchConfig& c, Rng& rng) {
  cfg = c;
  conv.init(1, c.filters, c.kernel, c.stride, /*bias=*/false, rng);
  norm.init(c.filters);
  pool.kernel = c.pool_kernel;
  pool.stride = c.pool_stride;
}

int MrcnnBranch::out_len(int t_in) const {
  return pool.out_len(conv.out_len(t_in));
}

void MrcnnBranch::forward(const Mat& in, BranchTrace& tr) const {
  conv.forward(in, tr.conv_out);
  norm.forward(tr.conv_out, tr.norm_out, tr.norm_stats);
  Mat activated;
  gelu_forward(tr.norm_out, activated);
  pool.forward(activated, tr.pooled, tr.pool_idx);
}

void MrcnnBranch::backward(const Mat& in, const BranchTrace& tr, const Mat& dout,
                           MrcnnBranch& g) const {
  Mat d_act(tr.norm_out.rows, tr.norm_out.cols);
  pool.backward(tr.pool_idx, dout, d_act);
  Mat d_norm;
  gelu_backward(tr.norm_out, d_act, d_norm);
  Mat d_conv;
  norm.backward(tr.conv_out, tr.norm_stats, d_norm, d_conv, g.norm);
  conv.backward(in, d_conv, nullptr, g.conv);
}

void MrcnnBranch::visit_params(const std::string& prefix, ParamTable& t) {
  conv.visit_params(prefix + ".conv", t);
  norm.visit_params(prefix + ".norm", t);
}

// --- AfrStage ----------------------------------------------------------------

void AfrStage::init(int in_channels, int out_channels, int se_reduction, Rng& rng) {
  in_ch = in_channels;
  out_ch = out_channels;
  c1.init(in_ch, out_ch, 1, 1, /*bias=*/false, rng);
  n1.init(out_ch);
  c2.init(out_ch, out_ch, 1, 1, /*bias=*/false, rng);
  n2.init(out_ch);
  se.init(out_ch, se_reduction, rng);
  has_proj = in_ch != out_ch;
  if (has_proj) proj.init(in_ch, out_ch, 1, 1, /*bias=*/false, rng);
}

void AfrStage::forward(const Mat& in, AfrTrace& tr, const Vec* gate_override) const {
  c1.forward(in, tr.c1_out);
  n1.forward(tr.c1_out, tr.n1_out, tr.n1_stats);
  gelu_forward(tr.n1_out, tr.gelu1_out);
  c2.forward(tr.gelu1_out, tr.c2_out);
  n2.forward(tr.c2_out, tr.n2_out, tr.n2_stats);
  Mat gated;
  se.forward(tr.n2_out, gated, tr.se, gate_override);

  tr.out = Mat(out_ch, in.cols);
  if (has_proj) {
    Mat res;
    proj.forward(in, res);
    for (size_t i = 0; i < tr.out.d.size(); ++i)
      tr.out.d[i] = gated.d[i] + res.d[i];
  } else {
    for (size_t i = 0; i < tr.out.d.size(); ++i)
      tr.out.d[i] = gated.d[i] + in.d[i];
  }
}

void AfrStage::backward(const Mat& in, const AfrTrace& tr, const Mat& dout,
                        Mat& din, AfrStage& g) const {
  Mat d_gated = dout;  // residual add splits the gradient
  Mat d_n2;
  se.backward(tr.n2_out, tr.se, d_gated, d_n2, g.se);
  Mat d_c2;
  n2.backward(tr.c2_out, tr.n2_stats, d_n2, d_c2, g.n2);
  Mat d_gelu1;
  c2.backward(tr.gelu1_out, d_c2, &d_gelu1, g.c2);
  Mat d_n1;
  gelu_backward(tr.n1_out, d_gelu1, d_n1);
  Mat d_c1;
  n1.backward(tr.c1_out, tr.n1_stats, d_n1, d_c1, g.n1);
  c1.backward(in, d_c1, &din, g.c1);

  if (has_proj) {
    Mat d_res;
    proj.backward(in, dout, &d_res, g.proj);
    for (size_t i = 0; i < din.d.size(); ++i) din.d[i] += d_res.d[i];
  } else {
    for (size_t i = 0; i < din.d.size(); ++i) din.d[i] += dout.d[i];
  }
}

void AfrStage::visit_params(const std::string& prefix, ParamTable& t) {
  c1.visit_params(prefix + ".c1", t);
  n1.visit_params(prefix + ".n1", t);
  c2.visit_params(prefix + ".c2", t);
  n2.visit_params(prefix + ".n2", t);
  se.visit_params(prefix + ".se", t);
  if (has_proj) proj.visit_params(prefix + ".proj", t);
}

// --- ConvUnit ------------------------------------------------------------------

void ConvUnit::init(int channels, int hidden, int dw_kernel, Rng& rng) {
  std_conv.init(channels, hidden, 1, 1, /*bias=*/true, rng);
  dw.init(hidden, dw_kernel, rng);
  pw.init(hidden, channels, 1, 1, /*bias=*/true, rng);
}

void ConvUnit::forward(const Mat& in, UnitTrace& tr) const {
  std_conv.forward(in, tr.std_out);
  gelu_forward(tr.std_out, tr.gelu_a);
  dw.forward(tr.gelu_a, tr.dw_out);
  pw.forward(tr.dw_out, tr.pw_out);
  gelu_forward(tr.pw_out, tr.out);
}

void ConvUnit::backward(const Mat& in, const UnitTrace& tr, const Mat& dout,
                        Mat& din, ConvUnit& g) const {
  Mat d_pw;
  gelu_backward(tr.pw_out, dout, d_pw);
  Mat d_dw;
  pw.backward(tr.dw_out, d_pw, &d_dw, g.pw);
  Mat d_gelu_a;
  dw.backward(tr.gelu_a, d_dw, d_gelu_a, g.dw);
  Mat d_std;
  gelu_backward(tr.std_out, d_gelu_a, d_std);
  std_conv.backward(in, d_std, &din, g.std_conv);
}

void ConvUnit::visit_params(const std::string& prefix, ParamTable& t) {
  std_conv.visit_params(prefix + ".std", t);
  dw.visit_params(prefix + ".dw", t);
  pw.visit_params(prefix + ".pw", t);
}

// --- ConvBlock --------------------------------------------------------------------

void ConvBlock::init(int channels, int hidden, int dw_kernel, int num_units,
                     Rng& rng) {
  entry.init(channels, channels, 1, 1, /*bias=*/true, rng);
  units.resize(static_cast<size_t>(num_units));
  for (auto& u : units) u.init(channels, hidden, dw_kernel, rng);
  ln.init(channels);
}

void ConvBlock::forward(const Mat& in, BlockTrace& tr) const {
  entry.forward(in, tr.entry_out);
  tr.units.resize(units.size());
  const Mat* cur = &tr.entry_out;
  for (size_t u = 0; u < units.size(); ++u) {
    units[u].forward(*cur, tr.units[u]);
    cur = &tr.units[u].out;
  }
  tr.sum_pre_ln = Mat(in.rows, in.cols);
  for (size_t i = 0; i < tr.sum_pre_ln.d.size(); ++i)
    tr.sum_pre_ln.d[i] = in.d[i] + cur->d[i];
  ln.forward(tr.sum_pre_ln, tr.out, tr.ln_stats);
}

void ConvBlock::backward(const Mat& in, const BlockTrace& tr, const Mat& dout,
                         Mat& din, ConvBlock& g) const {
  Mat d_sum;
  ln.backward(tr.sum_pre_ln, tr.ln_stats, dout, d_sum, g.ln);

  Mat d_chain = d_sum;  // gradient flowing through the unit chain
  for (size_t u = units.size(); u-- > 0;) {
    const Mat& unit_in = u == 0 ? tr.entry_out : tr.units[u - 1].out;
    Mat d_unit_in;
    units[u].backward(unit_in, tr.units[u], d_chain, d_unit_in, g.units[u]);
    d_chain = std::move(d_unit_in);
  }
  entry.backward(in, d_chain, &din, g.entry);
  for (size_t i = 0; i < din.d.size(); ++i) din.d[i] += d_sum.d[i];  // residual
}

void ConvBlock::visit_params(const std::string& prefix, ParamTable& t) {
  entry.visit_params(prefix + ".entry", t);
  for (size_t u = 0; u < units.size(); ++u)
    units[u].visit_params(prefix + ".unit" + std::to_string(u), t);
  ln.visit_params(prefix + ".ln", t);
}

// --- FeatureExtractor ----------------------------------------------------------

void FeatureExtractor::init(const FeatureExtractorConfig& c, Rng& rng) {
  c.validate();
  cfg = c;
  small.init(c.small_branch, rng);
  large.init(c.large_branch, rng);
  fused_dropout.p = c.mrcnn_dropout;
  afr.init(c.small_branch.filters, c.channels, c.se_reduction, rng);
  blocks.resize(static_cast<size_t>(c.blocks));
  for (auto& b : blocks)
    b.init(c.channels, c.unit_hidden, c.depthwise_kernel, rng);
}

int FeatureExtractor::small_len(int input_samples) const {
  return small.out_len(input_samples);
}

int FeatureExtractor::feature_len(int input_samples) const {
  return small.out_len(input_samples) + large.out_len(input_samples);
}

void FeatureExtractor::mrcnn_forward(const Mat& input, BranchTrace& ts,
                                     BranchTrace& tl, Mat& fused_pre_dropout) const {
  small.forward(input, ts);
  large.forward(input, tl);
  const int ch = cfg.small_branch.filters;
  fused_pre_dropout = Mat(ch, ts.pooled.cols + tl.pooled.cols);
  for (int c = 0; c < ch; ++c) {
    double* dst = fused_pre_dropout.row(c);
    const double* s = ts.pooled.row(c);
    const double* l = tl.pooled.row(c);
    for (int i = 0; i < ts.pooled.cols; ++i) dst[i] = s[i];
    for (int i = 0; i < tl.pooled.cols; ++i) dst[ts.pooled.cols + i] = l[i];
  }
}

FeatureMap FeatureExtractor::forward(std::span<const double> x, RunMode mode,
                                     uint64_t dropout_seed,
                                     FeatureTrace* trace) const {
  FeatureTrace local;
  FeatureTrace& tr = trace ? *trace : local;

  tr.input = Mat(1, static_cast<int>(x.size()));
  std::copy(x.begin(), x.end(), tr.input.d.begin());

  Mat fused;
  mrcnn_forward(tr.input, tr.small, tr.large, fused);

  if (mode == RunMode::Train && fused_dropout.p > 0.0) {
    Rng rng(dropout_seed);
    fused_dropout.forward_train(fused, tr.fused, tr.dropout_mask, rng);
  } else {
    tr.fused = std::move(fused);
    tr.dropout_mask.clear();
  }

  afr.forward(tr.fused, tr.afr);

  tr.blocks.resize(blocks.size());
  const Mat* cur = &tr.afr.out;
  for (size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].forward(*cur, tr.blocks[b]);
    cur = &tr.blocks[b].out;
  }

  FeatureMap fm;
  fm.values = transposed(*cur);  // K x C
  return fm;
}

void FeatureExtractor::backward(const FeatureTrace& tr, const Mat& dfeat_time_major,
                                FeatureExtractor& g) const {
  Mat d_cur = transposed(dfeat_time_major);  // back to channel-major

  for (size_t b = blocks.size(); b-- > 0;) {
    const Mat& in = b == 0 ? tr.afr.out : tr.blocks[b - 1].out;
    Mat d_in;
    blocks[b].backward(in, tr.blocks[b], d_cur, d_in, g.blocks[b]);
    d_cur = std::move(d_in);
  }

  Mat d_fused;
  afr.backward(tr.fused, tr.afr, d_cur, d_fused, g.afr);

  if (!tr.dropout_mask.empty()) {
    Mat d_pre;
    fused_dropout.backward(tr.dropout_mask, d_fused, d_pre);
    d_fused = std::move(d_pre);
  }

  // split the fused gradient back into the two branches
  const int ch = cfg.small_branch.filters;
  const int ks = tr.small.pooled.cols;
  const int kl = tr.large.pooled.cols;
  Mat d_small(ch, ks), d_large(ch, kl);
  for (int c = 0; c < ch; ++c) {
    const double* src = d_fused.row(c);
    double* s = d_small.row(c);
    double* l = d_large.row(c);
    for (int i = 0; i < ks; ++i) s[i] = src[i];
    for (int i = 0; i < kl; ++i) l[i] = src[ks + i];
  }
  small.backward(tr.input, tr.small, d_small, g.small);
  large.backward(tr.input, tr.large, d_large, g.large);
}

PatchField FeatureExtractor::patch_time_field(int position, int patch_len,
                                              int sampling_hz,
                                              int input_samples) const {
  const int ks = small.out_len(input_samples);
  const auto field_of = [&](const MrcnnBranchConfig& b, int pos) {
    const int start = pos * b.pool_stride * b.stride;
    const int end = (pos * b.pool_stride + b.pool_kernel - 1) * b.stride + b.kernel;
    return std::pair<int, int>{start, end};
  };
  int lo, hi;
  if (position < ks) {
    const int last = std::min(position + patch_len - 1, ks - 1);
    lo = field_of(cfg.small_branch, position).first;
    hi = field_of(cfg.small_branch, last).second;
  } else {
    lo = field_of(cfg.large_branch, position - ks).first;
    hi = field_of(cfg.large_branch, position - ks + patch_len - 1).second;
  }
  hi = std::min(hi, input_samples);
  PatchField f;
  f.onset_s = static_cast<double>(lo) / sampling_hz;
  f.span_s = static_cast<double>(hi - lo) / sampling_hz;
  return f;
}

void FeatureExtractor::visit_params(ParamTable& t) {
  small.visit_params("features.small", t);
  large.visit_params("features.large", t);
  afr.visit_params("features.afr", t);
  for (size_t b = 0; b < blocks.size(); ++b)
    blocks[b].visit_params("features.block" + std::to_string(b), t);
}

}  // namespace wavestage
