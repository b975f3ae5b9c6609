#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mos {

using Vector = std::vector<double>;

// Reserved mask value produced by keep_top_k and consumed by softmax. It is
// never the result of arithmetic inside this library.
inline constexpr double kMasked = -std::numeric_limits<double>::infinity();

inline bool is_masked(double v) { return v == kMasked; }

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(const std::vector<Vector>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Vector row_vector(std::size_t r) const;

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Deterministic random stream. The engine (mt19937_64) is fully specified by
// the standard; the distribution transforms below are written out by hand
// because std:: distributions differ across standard libraries.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller; caches the second variate.
  double normal();
  // Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }
  // Index drawn proportionally to nonnegative weights (at least one positive).
  std::size_t categorical(std::span<const double> weights);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---- vector arithmetic ------------------------------------------------------

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
double squared_distance(std::span<const double> a, std::span<const double> b);
Vector scaled(std::span<const double> a, double s);
// y += s * x
void axpy(double s, std::span<const double> x, std::span<double> y);
bool all_finite(std::span<const double> a);

// y = W x, W is (out x in).
Vector matvec(const Matrix& w, std::span<const double> x);
// y = W^T x, W is (out x in), x has length out.
Vector matvec_transposed(const Matrix& w, std::span<const double> x);
// W += s * a b^T
void add_outer(Matrix& w, std::span<const double> a, std::span<const double> b, double s = 1.0);

// ---- primitives -------------------------------------------------------------

// a.b / (|a||b|), clamped to [-1, 1]. Throws DomainError when either input has
// norm <= 1e-12.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Max-subtracted softmax. kMasked entries map to exactly 0. Throws DomainError
// when every entry is masked or any unmasked entry is not finite.
Vector softmax(std::span<const double> v);

// Keeps the k largest entries in place and masks the rest. Ties go to the
// lower index. Throws ArgumentError unless 1 <= k <= v.size().
Vector keep_top_k(std::span<const double> v, std::size_t k);

// Indices of the k largest entries, ordered by descending value with lower
// index first among ties.
std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k);

struct KMeansResult {
  std::vector<Vector> centroids;
  std::vector<std::size_t> assignments;
  // Within-cluster sum of squared distances after each assignment step.
  std::vector<double> cost_history;
  std::size_t iterations = 0;
};

// Lloyd's algorithm with k-means++ seeding drawn from `rng`. Stops on an
// assignment fixpoint or after max_iters assignment steps.
KMeansResult kmeans(const std::vector<Vector>& points, std::size_t k, std::size_t max_iters,
                    RngStream& rng);

inline constexpr std::size_t kDefaultKMeansIters = 50;

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
Vector finite_diff_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                            double eps);

// Shortest text that round-trips the double exactly ("%.17g").
std::string format_real(double v);

}  // namespace mos
