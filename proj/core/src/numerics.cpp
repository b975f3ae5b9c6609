#include "mos/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <set>
#include <string>

#include "mos/errors.hpp"

namespace mos {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ArgumentError("Matrix: element count " + std::to_string(data_.size()) +
                        " does not match shape " + std::to_string(rows_) + "x" +
                        std::to_string(cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(const std::vector<Vector>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols()) throw ArgumentError("Matrix::from_rows: ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

Vector Matrix::row_vector(std::size_t r) const {
  auto s = row(r);
  return Vector(s.begin(), s.end());
}

// ---- RngStream --------------------------------------------------------------

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed),
      stream_id_(stream_id),
      engine_(splitmix64(splitmix64(seed) ^ splitmix64(stream_id + 0x632be59bd9b4e019ULL))) {}

double RngStream::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::size_t RngStream::index(std::size_t n) {
  if (n == 0) throw ArgumentError("RngStream::index: empty range");
  // Rejection sampling keeps the draw unbiased for any n.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x = 0;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

std::size_t RngStream::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("categorical: invalid weight");
    total += w;
  }
  if (total <= 0.0) throw DomainError("categorical: all weights are zero");
  const double target = uniform() * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last_positive = i;
    if (target < acc) return i;
  }
  return last_positive;
}

// ---- vector arithmetic ------------------------------------------------------

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ArgumentError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ArgumentError("squared_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

Vector scaled(std::span<const double> a, double s) {
  Vector out(a.begin(), a.end());
  for (double& v : out) v *= s;
  return out;
}

void axpy(double s, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ArgumentError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += s * x[i];
}

bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

Vector matvec(const Matrix& w, std::span<const double> x) {
  if (w.cols() != x.size()) {
    throw ArgumentError("matvec: matrix has " + std::to_string(w.cols()) +
                        " columns but input has length " + std::to_string(x.size()));
  }
  Vector y(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double* row = w.data().data() + r * w.cols();
    double s = 0.0;
    for (std::size_t c = 0; c < w.cols(); ++c) s += row[c] * x[c];
    y[r] = s;
  }
  return y;
}

Vector matvec_transposed(const Matrix& w, std::span<const double> x) {
  if (w.rows() != x.size()) throw ArgumentError("matvec_transposed: length mismatch");
  Vector y(w.cols(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double* row = w.data().data() + r * w.cols();
    const double xr = x[r];
    for (std::size_t c = 0; c < w.cols(); ++c) y[c] += row[c] * xr;
  }
  return y;
}

void add_outer(Matrix& w, std::span<const double> a, std::span<const double> b, double s) {
  if (w.rows() != a.size() || w.cols() != b.size()) throw ArgumentError("add_outer: shape mismatch");
  for (std::size_t r = 0; r < a.size(); ++r) {
    const double ar = s * a[r];
    double* row = w.data().data() + r * w.cols();
    for (std::size_t c = 0; c < b.size(); ++c) row[c] += ar * b[c];
  }
}

// ---- primitives -------------------------------------------------------------

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ArgumentError("cosine_similarity: length mismatch");
  const double na = norm(a);
  if (!(na > 1e-12)) throw DomainError("cosine_similarity: first argument has zero norm");
  const double nb = norm(b);
  if (!(nb > 1e-12)) throw DomainError("cosine_similarity: second argument has zero norm");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Vector softmax(std::span<const double> v) {
  double max_value = kMasked;
  bool any = false;
  for (double x : v) {
    if (is_masked(x)) continue;
    if (!std::isfinite(x)) throw DomainError("softmax: non-finite entry");
    if (!any || x > max_value) max_value = x;
    any = true;
  }
  if (!any) throw DomainError("softmax: every entry is masked");
  Vector out(v.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (is_masked(v[i])) continue;
    out[i] = std::exp(v[i] - max_value);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k) {
  if (k < 1 || k > v.size()) {
    throw ArgumentError("keep_top_k: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(v.size()) + "]");
  }
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  order.resize(k);
  return order;
}

Vector keep_top_k(std::span<const double> v, std::size_t k) {
  Vector out(v.size(), kMasked);
  for (std::size_t i : top_k_indices(v, k)) out[i] = v[i];
  return out;
}

KMeansResult kmeans(const std::vector<Vector>& points, std::size_t k, std::size_t max_iters,
                    RngStream& rng) {
  if (k == 0) throw ArgumentError("kmeans: k must be positive");
  if (max_iters == 0) throw ArgumentError("kmeans: max_iters must be positive");
  if (points.empty()) throw ArgumentError("kmeans: no points");
  const std::size_t dim = points.front().size();
  for (const Vector& p : points) {
    if (p.size() != dim) throw ArgumentError("kmeans: points have differing dimensions");
  }
  std::set<Vector> distinct(points.begin(), points.end());
  if (distinct.size() < k) {
    throw ArgumentError("kmeans: k=" + std::to_string(k) + " exceeds the " +
                        std::to_string(distinct.size()) + " distinct points");
  }

  const std::size_t n = points.size();
  KMeansResult result;

  // k-means++ seeding.
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  result.centroids.push_back(points[rng.index(n)]);
  for (std::size_t c = 1; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(points[i], result.centroids.back()));
    }
    result.centroids.push_back(points[rng.categorical(nearest)]);
  }

  std::vector<std::size_t> assignment(n, 0);
  std::vector<double> dist(n, 0.0);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    std::vector<std::size_t> next(n, 0);
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(points[i], result.centroids[c]);
        if (d < best) {
          best = d;
          next[i] = c;
        }
      }
      dist[i] = best;
      cost += best;
    }
    result.cost_history.push_back(cost);
    result.iterations = iter + 1;
    const bool converged = iter > 0 && next == assignment;
    assignment = std::move(next);
    if (converged) break;

    std::vector<Vector> sums(k, Vector(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      axpy(1.0, points[i], sums[assignment[i]]);
      ++counts[assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        result.centroids[c] = scaled(sums[c], 1.0 / static_cast<double>(counts[c]));
        continue;
      }
      // Empty cluster: move it onto the point farthest from its own centroid.
      std::size_t far = 0;
      double far_dist = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[assignment[i]] > 1 && dist[i] > far_dist) {
          far_dist = dist[i];
          far = i;
        }
      }
      result.centroids[c] = points[far];
      --counts[assignment[far]];
      dist[far] = 0.0;
    }
  }
  result.assignments = std::move(assignment);
  return result;
}

Vector finite_diff_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                            double eps) {
  if (!(eps > 0.0)) throw ArgumentError("finite_diff_gradient: eps must be positive");
  Vector grad(x.size(), 0.0);
  Vector probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = f(probe);
    probe[i] = x[i] - eps;
    const double down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw DomainError("finite_diff_gradient: non-finite evaluation at coordinate " +
                        std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace mos
