#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace wavestage {

using Vec = std::vector<double>;

// Dense row-major 2-D array. Feature tensors use rows = channels and
// cols = time unless stated otherwise; the latent feature map handed to the
// wave-sensing stage is time-major (rows = time positions, cols = channels).
struct Mat {
  int rows = 0;
  int cols = 0;
  Vec d;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c, 0.0) {}

  double& at(int r, int c) {
    assert(r >= 0 && r < rows && c >= 0 && c < cols);
    return d[static_cast<size_t>(r) * cols + c];
  }
  double at(int r, int c) const {
    assert(r >= 0 && r < rows && c >= 0 && c < cols);
    return d[static_cast<size_t>(r) * cols + c];
  }
  double* row(int r) { return d.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return d.data() + static_cast<size_t>(r) * cols; }

  size_t size() const { return d.size(); }
  void zero() { std::fill(d.begin(), d.end(), 0.0); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

inline Mat transposed(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (int r = 0; r < a.rows; ++r)
    for (int c = 0; c < a.cols; ++c) t.at(c, r) = a.at(r, c);
  return t;
}

}  // namespace wavestage
