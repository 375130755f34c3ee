#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rt {

using index_t = std::int64_t;

// Dense column vector of 64-bit reals. All kernels in this library use
// fixed double precision; there is no mixed-precision path.
using Vec = std::vector<double>;

// Row-major dense matrix.
struct Mat {
  index_t rows = 0;
  index_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(index_t r, index_t c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r * c), fill) {}

  double& at(index_t r, index_t c) { return data[static_cast<std::size_t>(r * cols + c)]; }
  double at(index_t r, index_t c) const { return data[static_cast<std::size_t>(r * cols + c)]; }
  const double* row(index_t r) const { return data.data() + r * cols; }
  double* row(index_t r) { return data.data() + r * cols; }

  static Mat identity(index_t n);
};

// Two-layer MLP: w_out * act(w_in * v + b_in) + b_out.
struct MlpParams {
  Mat w_in;    // hidden x d
  Vec b_in;    // hidden
  Mat w_out;   // d x hidden
  Vec b_out;   // d
  index_t hidden() const { return w_in.rows; }
  index_t dim() const { return w_in.cols; }
};

[[noreturn]] void throw_shape_error(const std::string& what);

// Denominator guard for RMS normalization: sqrt(mean(x^2) + kRmsEpsilon).
inline constexpr double kRmsEpsilon = 1e-8;

Vec matvec(const Mat& m, const Vec& v);
// m^T * v without materializing the transpose.
Vec matvec_transposed(const Mat& m, const Vec& v);
Mat matmul(const Mat& a, const Mat& b);

// x / sqrt(mean(x^2) + eps), optionally followed by an elementwise gain.
// With gain == nullptr this is the analysis-mode normalization whose output
// has norm sqrt(D) up to the epsilon guard.
Vec rms_norm(const Vec& v, const Vec* gain = nullptr);
// Slice variant used for per-head query/key normalization: normalizes
// v[off, off+len) in place; gain (when present) is indexed by absolute position.
void rms_norm_slice_inplace(Vec& v, index_t off, index_t len, const Vec* gain);

double gelu(double x);
double gelu_derivative(double x);

Vec mlp_apply(const MlpParams& p, const Vec& v);

// Small helpers shared across modules.
double dot(const Vec& a, const Vec& b);
double dot_slice(const Vec& a, const Vec& b_head, index_t off);
void axpy(double alpha, const Vec& x, Vec& y);             // y += alpha * x
void add_outer(Mat& m, const Vec& u, const Vec& v);        // m += u v^T
double max_abs_diff(const Vec& a, const Vec& b);
double max_abs(const Vec& a);
bool all_finite(const Vec& v);

}  // namespace rt
