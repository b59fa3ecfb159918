#pragma once

#include <span>
#include <string>
#include <vector>

#include "wavestage/layers.hpp"
#include "wavestage/nd.hpp"

namespace wavestage {

// Latent representation handed to the wave-sensing stage: time-major,
// rows = K time positions, cols = C channels.
struct FeatureMap {
  Mat values;  // K x C
  int k() const { return values.rows; }
  int c() const { return values.cols; }
};

struct MrcnnBranchConfig {
  int filters = 64;
  int kernel = 50;
  int stride = 6;
  int pool_kernel = 4;
  int pool_stride = 4;
  double dropout = 0.0;  // per-branch dropout after pooling (off by default)
};

struct FeatureExtractorConfig {
  MrcnnBranchConfig small_branch{64, 50, 6, 4, 4, 0.0};
  MrcnnBranchConfig large_branch{64, 400, 50, 4, 4, 0.0};
  double mrcnn_dropout = 0.5;  // applied to the fused map

  int channels = 64;      // C after the AFR 1x1 reduction
  int se_reduction = 16;

  int blocks = 2;           // B
  int units_per_block = 2;  // R
  int unit_hidden = 64;     // channel count of the unit's standard conv
  int depthwise_kernel = 7;

  void validate() const;
};

enum class RunMode { Train, Eval };

// --- traces ------------------------------------------------------------------

struct BranchTrace {
  Mat conv_out;
  InstanceNorm::Stats norm_stats;
  Mat norm_out;
  std::vector<int> pool_idx;
  Mat pooled;  // branch output (pool of GELU(norm_out))
};

struct AfrTrace {
  Mat c1_out;
  InstanceNorm::Stats n1_stats;
  Mat n1_out;
  Mat gelu1_out;
  Mat c2_out;
  InstanceNorm::Stats n2_stats;
  Mat n2_out;
  SEBlock::Trace se;
  Mat out;  // se-scaled path + residual
};

struct UnitTrace {
  Mat std_out;
  Mat gelu_a;
  Mat dw_out;
  Mat pw_out;
  Mat out;  // GELU(pw_out)
};

struct BlockTrace {
  Mat entry_out;
  std::vector<UnitTrace> units;
  Mat sum_pre_ln;
  LayerNorm::Stats ln_stats;
  Mat out;
};

struct FeatureTrace {
  Mat input;  // 1 x T
  BranchTrace small, large;
  std::vector<uint8_t> dropout_mask;
  Mat fused;  // post-dropout, input to the AFR
  AfrTrace afr;
  std::vector<BlockTrace> blocks;
};

// --- stages -------------------------------------------------------------------

struct MrcnnBranch {
  MrcnnBranchConfig cfg;
  Conv1d conv;
  InstanceNorm norm;
  MaxPool1d pool;

  void init(const MrcnnBranchConfig& c, Rng& rng);
  int out_len(int t_in) const;
  void forward(const Mat& in, BranchTrace& tr) const;
  void backward(const Mat& in, const BranchTrace& tr, const Mat& dout,
                MrcnnBranch& g) const;
  void visit_params(const std::string& prefix, ParamTable& t);
};

// Adaptive recalibration: two 1x1 convolutions with per-window normalization,
// a squeeze-and-excitation gate, and a residual connection. The output equals
// gate-scaled path plus residual (no outer activation).
struct AfrStage {
  int in_ch = 0, out_ch = 0;
  Conv1d c1, c2;
  InstanceNorm n1, n2;
  SEBlock se;
  bool has_proj = false;
  Conv1d proj;  // 1x1 residual projection when in_ch != out_ch

  void init(int in_channels, int out_channels, int se_reduction, Rng& rng);
  void forward(const Mat& in, AfrTrace& tr, const Vec* gate_override = nullptr) const;
  void backward(const Mat& in, const AfrTrace& tr, const Mat& dout, Mat& din,
                AfrStage& g) const;
  void visit_params(const std::string& prefix, ParamTable& t);
};

// One stacked convolutional unit: 1x1 standard conv -> GELU -> depthwise ->
// pointwise -> GELU. Shape-preserving.
struct ConvUnit {
  Conv1d std_conv;  // 1x1, channels -> hidden
  DepthwiseConv1d dw;
  Conv1d pw;  // 1x1, hidden -> channels

  void init(int channels, int hidden, int dw_kernel, Rng& rng);
  void forward(const Mat& in, UnitTrace& tr) const;
  void backward(const Mat& in, const UnitTrace& tr, const Mat& dout, Mat& din,
                ConvUnit& g) const;
  void visit_params(const std::string& prefix, ParamTable& t);
};

// Block: entry 1x1 conv -> R units -> residual add -> layer norm. The
// residual output is the input of the next block, so (K, C) is preserved.
struct ConvBlock {
  Conv1d entry;
  std::vector<ConvUnit> units;
  LayerNorm ln;

  void init(int channels, int hidden, int dw_kernel, int num_units, Rng& rng);
  void forward(const Mat& in, BlockTrace& tr) const;
  void backward(const Mat& in, const BlockTrace& tr, const Mat& dout, Mat& din,
                ConvBlock& g) const;
  void visit_params(const std::string& prefix, ParamTable& t);
};

// --- full extractor -------------------------------------------------------------

// Direct (first-stage) receptive field of one feature position, used when a
// latent patch is mapped back to signal time. Positions below the small
// branch's length come from the small branch; the rest from the large branch.
struct PatchField {
  double onset_s = 0.0;
  double span_s = 0.0;
};

class FeatureExtractor {
public:
  FeatureExtractorConfig cfg;
  MrcnnBranch small, large;
  Dropout fused_dropout;
  AfrStage afr;
  std::vector<ConvBlock> blocks;

  void init(const FeatureExtractorConfig& c, Rng& rng);

  // Feature-map time length for a given input sample count.
  int feature_len(int input_samples) const;
  int small_len(int input_samples) const;

  // Forward pass over one window. In Train mode the fused-map dropout mask is
  // drawn from `dropout_seed`, so a recompute with the same seed reproduces
  // the pass exactly. `trace`, when given, stores every intermediate needed
  // by backward().
  FeatureMap forward(std::span<const double> x, RunMode mode, uint64_t dropout_seed,
                     FeatureTrace* trace) const;

  // Accumulates parameter gradients for one window into `g` given the trace
  // of the matching forward pass and d(loss)/d(feature map).
  void backward(const FeatureTrace& trace, const Mat& dfeat_time_major,
                FeatureExtractor& g) const;

  // Intermediate-stage entry points (exposed for stage-level tests).
  void mrcnn_forward(const Mat& input, BranchTrace& ts, BranchTrace& tl,
                     Mat& fused_pre_dropout) const;

  PatchField patch_time_field(int position, int patch_len, int sampling_hz,
                              int input_samples) const;

  void visit_params(ParamTable& t);
};

}  // namespace wavestage
