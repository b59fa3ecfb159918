#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wavestage/nd.hpp"
#include "wavestage/rng.hpp"

namespace wavestage {

// 1-D network building blocks, double precision throughout. Tensors are
// channel-major (rows = channels, cols = time). Every layer exposes an
// explicit backward; parameter gradients accumulate into a second instance of
// the same layer type (the "gradient sink"), which keeps concurrent
// per-window backward passes free of shared mutable state.
//
// visit_params enumerates (name, array, shape) in a fixed order; the model
// builds its checkpoint directory and optimizer state from that enumeration.

struct ParamEntry {
  std::string name;
  Vec* data;
  std::vector<int> shape;
};

using ParamTable = std::vector<ParamEntry>;

void init_kaiming_uniform(Vec& w, int fan_in, Rng& rng);

// --- convolution ------------------------------------------------------------

// Valid (no padding) 1-D convolution with stride. weight layout is
// [out_ch][in_ch * k] row-major.
struct Conv1d {
  int in_ch = 0, out_ch = 0, kernel = 0, stride = 1;
  bool has_bias = true;
  Mat w;
  Vec b;

  void init(int in_channels, int out_channels, int k, int s, bool bias, Rng& rng);
  int out_len(int t_in) const { return (t_in - kernel) / stride + 1; }

  void forward(const Mat& in, Mat& out) const;
  // din may be null when the input gradient is not needed (first layer).
  void backward(const Mat& in, const Mat& dout, Mat* din, Conv1d& g) const;
  void visit_params(const std::string& prefix, ParamTable& t);
};

// Depthwise 1-D convolution, stride 1, odd kernel, explicit symmetric zero
// padding so the time length is preserved.
struct DepthwiseConv1d {
  int channels = 0, kernel = 3;
  Mat w;  // [channels][kernel]
  Vec b;

  void init(int ch, int k, Rng& rng);
  void forward(const Mat& in, Mat& out) const;
  void backward(const Mat& in, const Mat& dout, Mat& din, DepthwiseConv1d& g) const;
  void visit_params(const std::string& prefix, ParamTable& t);
};

// --- normalization ----------------------------------------------------------

// Per-channel normalization over the time axis of a single window
// (batch-independent). Population variance, affine per channel.
struct InstanceNorm {
  int channels = 0;
  double eps = 1e-5;
  Vec gamma, beta;

  struct Stats {
    Vec mean, inv_sd;
  };

  void init(int ch);
  void forward(const Mat& in, Mat& out, Stats& stats) const;
  void backward(const Mat& in, const Stats& stats, const Mat& dout, Mat& din,
                InstanceNorm& g) const;
  void visit_params(const std::string& prefix, ParamTable& t);
};

// Normalization across channels at each time position; affine per channel.
struct LayerNorm {
  int channels = 0;
  double eps = 1e-5;
  Vec gamma, beta;

  struct Stats {
    Vec mean, inv_sd;  // one per time position
  };

  void init(int ch);
  void forward(const Mat& in, Mat& out, Stats& stats) const;
  void backward(const Mat& in, const Stats& stats, const Mat& dout, Mat& din,
                LayerNorm& g) const;
  void visit_params(const std::string& prefix, ParamTable& t);
};

// --- elementwise and pooling ------------------------------------------------

void gelu_forward(const Mat& in, Mat& out);
void gelu_backward(const Mat& in, const Mat& dout, Mat& din);

struct MaxPool1d {
  int kernel = 4, stride = 4;
  int out_len(int t_in) const { return (t_in - kernel) / stride + 1; }
  // First maximum wins on ties, which keeps the argmax deterministic.
  void forward(const Mat& in, Mat& out, std::vector<int>& argmax) const;
  void backward(const std::vector<int>& argmax, const Mat& dout, Mat& din) const;
};

// Inverted dropout; the mask is drawn from the caller's RNG so a later
// recompute pass can reproduce it exactly.
struct Dropout {
  double p = 0.5;
  void forward_train(const Mat& in, Mat& out, std::vector<uint8_t>& mask,
                     Rng& rng) const;
  void backward(const std::vector<uint8_t>& mask, const Mat& dout, Mat& din) const;
};

// --- squeeze-and-excitation --------------------------------------------------

// Channel gate: global average pool -> FC(C->C/r) -> ReLU -> FC(C/r->C) ->
// sigmoid -> scale. Gate values are strictly inside (0, 1).
struct SEBlock {
  int channels = 0, reduced = 0;
  Mat w1;  // [reduced][channels]
  Vec b1;
  Mat w2;  // [channels][reduced]
  Vec b2;

  struct Trace {
    Vec squeeze;  // per-channel mean
    Vec hidden;   // post-ReLU
    Vec gate;     // post-sigmoid
  };

  void init(int ch, int reduction, Rng& rng);
  // gate_override, when non-null, replaces the computed gate (test hook).
  void forward(const Mat& in, Mat& out, Trace& tr,
               const Vec* gate_override = nullptr) const;
  void backward(const Mat& in, const Trace& tr, const Mat& dout, Mat& din,
                SEBlock& g) const;
  void visit_params(const std::string& prefix, ParamTable& t);
};

}  // namespace wavestage
