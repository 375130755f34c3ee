#include "rt/core_math.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>

namespace rt {

Mat Mat::identity(index_t n) {
  Mat m(n, n);
  for (index_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

void throw_shape_error(const std::string& what) {
  throw std::invalid_argument("shape error: " + what);
}

Vec matvec(const Mat& m, const Vec& v) {
  if (m.cols != static_cast<index_t>(v.size()))
    throw_shape_error("matvec: " + std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                      " times vector of dim " + std::to_string(v.size()));
  Vec out(static_cast<std::size_t>(m.rows));
  for (index_t r = 0; r < m.rows; ++r) {
    const double* row = m.row(r);
    double acc = 0.0;
    for (index_t c = 0; c < m.cols; ++c) acc += row[c] * v[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(r)] = acc;
  }
  return out;
}

Vec matvec_transposed(const Mat& m, const Vec& v) {
  if (m.rows != static_cast<index_t>(v.size()))
    throw_shape_error("matvec_transposed: " + std::to_string(m.rows) + "x" +
                      std::to_string(m.cols) + "^T times vector of dim " +
                      std::to_string(v.size()));
  Vec out(static_cast<std::size_t>(m.cols), 0.0);
  for (index_t r = 0; r < m.rows; ++r) {
    const double* row = m.row(r);
    const double s = v[static_cast<std::size_t>(r)];
    for (index_t c = 0; c < m.cols; ++c) out[static_cast<std::size_t>(c)] += s * row[c];
  }
  return out;
}

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) throw_shape_error("matmul: inner dimensions disagree");
  Mat out(a.rows, b.cols);
  for (index_t i = 0; i < a.rows; ++i) {
    for (index_t k = 0; k < a.cols; ++k) {
      const double s = a.at(i, k);
      if (s == 0.0) continue;
      const double* brow = b.row(k);
      double* orow = out.row(i);
      for (index_t j = 0; j < b.cols; ++j) orow[j] += s * brow[j];
    }
  }
  return out;
}

Vec rms_norm(const Vec& v, const Vec* gain) {
  if (v.empty()) throw_shape_error("rms_norm: empty vector");
  if (gain && gain->size() != v.size()) throw_shape_error("rms_norm: gain dim mismatch");
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double r = std::sqrt(ss / static_cast<double>(v.size()) + kRmsEpsilon);
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = v[i] / r;
    if (gain) out[i] *= (*gain)[i];
  }
  return out;
}

void rms_norm_slice_inplace(Vec& v, index_t off, index_t len, const Vec* gain) {
  double ss = 0.0;
  for (index_t i = 0; i < len; ++i) {
    const double x = v[static_cast<std::size_t>(off + i)];
    ss += x * x;
  }
  const double r = std::sqrt(ss / static_cast<double>(len) + kRmsEpsilon);
  for (index_t i = 0; i < len; ++i) {
    double y = v[static_cast<std::size_t>(off + i)] / r;
    if (gain) y *= (*gain)[static_cast<std::size_t>(off + i)];
    v[static_cast<std::size_t>(off + i)] = y;
  }
}

namespace {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace

double gelu(double x) {
  const double inner = kGeluScale * (x + kGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

double gelu_derivative(double x) {
  const double inner = kGeluScale * (x + kGeluCubic * x * x * x);
  const double t = std::tanh(inner);
  const double sech2 = 1.0 - t * t;
  const double dinner = kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner;
}

Vec mlp_apply(const MlpParams& p, const Vec& v) {
  if (p.w_in.cols != static_cast<index_t>(v.size()))
    throw_shape_error("mlp_apply: input dim mismatch");
  if (p.w_in.rows != static_cast<index_t>(p.b_in.size()) ||
      p.w_out.cols != p.w_in.rows ||
      p.w_out.rows != static_cast<index_t>(p.b_out.size()))
    throw_shape_error("mlp_apply: inconsistent parameter shapes");
  Vec h = matvec(p.w_in, v);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = gelu(h[i] + p.b_in[i]);
  Vec out = matvec(p.w_out, h);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.b_out[i];
  return out;
}

double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw_shape_error("dot: dim mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double dot_slice(const Vec& a, const Vec& b_head, index_t off) {
  double acc = 0.0;
  for (std::size_t i = 0; i < b_head.size(); ++i)
    acc += a[static_cast<std::size_t>(off) + i] * b_head[i];
  return acc;
}

void axpy(double alpha, const Vec& x, Vec& y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

void add_outer(Mat& m, const Vec& u, const Vec& v) {
  for (index_t r = 0; r < m.rows; ++r) {
    const double s = u[static_cast<std::size_t>(r)];
    if (s == 0.0) continue;
    double* row = m.row(r);
    for (index_t c = 0; c < m.cols; ++c) row[c] += s * v[static_cast<std::size_t>(c)];
  }
}

double max_abs_diff(const Vec& a, const Vec& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(const Vec& a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

bool all_finite(const Vec& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace rt
