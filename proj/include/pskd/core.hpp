// SPDX-License-Identifier: Apache-2.0
//
// Core domain types shared by every module: boxes, embeddings, probability
// vectors, similarity matrices, hyperparameter bundles, and a splittable
// deterministic RNG. All real arithmetic is double precision.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pskd {

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Axis-aligned box in continuous pixel coordinates, stored as
// (left, top, width, height). `identity` is an optional non-negative label;
// annotations use -1 on disk for unlabeled figures but in memory that maps
// to std::nullopt.
struct BoundingBox {
  double x = 0;
  double y = 0;
  double w = 0;
  double h = 0;
  std::optional<int> identity = std::nullopt;

  void validate() const {
    check(std::isfinite(x) && std::isfinite(y), "BoundingBox: non-finite position");
    check(std::isfinite(w) && std::isfinite(h) && w > 0 && h > 0,
          "BoundingBox: width and height must be positive");
    if (identity) check(*identity >= 0, "BoundingBox: identity must be non-negative");
  }

  double right() const { return x + w; }
  double bottom() const { return y + h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return w * h; }
};

// Intersection-over-union of two valid boxes. Disjoint boxes give 0.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  a.validate();
  b.validate();
  const double ix = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

// Dense row-major matrix of doubles. Small enough that a flat vector wins
// over anything fancier.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {
    check(r >= 0 && c >= 0, "Matrix: negative dimension");
  }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
};

// d-dimensional Re-ID feature vector.
struct Embedding {
  std::vector<double> values;

  int dim() const { return static_cast<int>(values.size()); }
  void validate() const {
    check(!values.empty(), "Embedding: empty");
    for (double v : values) check(std::isfinite(v), "Embedding: non-finite entry");
  }
};

enum class EmbeddingSource { kStudentHead, kTeacherModel };

// A batch of B same-dimension embeddings, tagged with its producer.
struct EmbeddingBatch {
  std::vector<Embedding> rows;
  EmbeddingSource source = EmbeddingSource::kStudentHead;

  int batch_size() const { return static_cast<int>(rows.size()); }
  int dim() const { return rows.empty() ? 0 : rows.front().dim(); }

  void validate() const {
    check(!rows.empty(), "EmbeddingBatch: batch size must be >= 1");
    const int d = rows.front().dim();
    for (const auto& r : rows) {
      r.validate();
      check(r.dim() == d, "EmbeddingBatch: inconsistent embedding dimension");
    }
  }

  Matrix as_matrix() const {
    Matrix m(batch_size(), dim());
    for (int i = 0; i < batch_size(); ++i)
      for (int j = 0; j < dim(); ++j) m.at(i, j) = rows[i].values[j];
    return m;
  }
};

// Softmax class distribution over C identity classes.
struct ProbabilityVector {
  std::vector<double> probs;

  int num_classes() const { return static_cast<int>(probs.size()); }

  void validate() const {
    check(!probs.empty(), "ProbabilityVector: empty");
    double sum = 0;
    for (double p : probs) {
      check(std::isfinite(p) && p > 0.0 && p <= 1.0,
            "ProbabilityVector: entries must lie in (0, 1]");
      sum += p;
    }
    check(std::abs(sum - 1.0) <= 1e-6, "ProbabilityVector: entries must sum to 1");
  }
};

// B x B matrix whose rows are L2-normalized (zero rows allowed for
// degenerate inputs, see l2_normalize_rows).
struct SimilarityMatrix {
  Matrix entries;

  int size() const { return entries.rows; }
};

struct RowNormalizeResult {
  SimilarityMatrix matrix;
  int degenerate_rows = 0;  // rows whose norm fell below 1e-12, emitted as zeros
};

// Row-wise L2 normalization. Zero-norm rows map to zero rows and are counted
// rather than rejected: collapsed early-training embeddings must not abort a
// run.
inline RowNormalizeResult l2_normalize_rows(const Matrix& m) {
  check(m.rows == m.cols, "l2_normalize_rows: matrix must be square");
  for (double v : m.data) check(std::isfinite(v), "l2_normalize_rows: non-finite entry");
  RowNormalizeResult out;
  out.matrix.entries = Matrix(m.rows, m.cols);
  constexpr double kEps = 1e-12;
  for (int r = 0; r < m.rows; ++r) {
    double sq = 0;
    for (int c = 0; c < m.cols; ++c) sq += m.at(r, c) * m.at(r, c);
    const double norm = std::sqrt(sq);
    if (norm < kEps) {
      ++out.degenerate_rows;
      continue;  // row stays zero
    }
    for (int c = 0; c < m.cols; ++c) out.matrix.entries.at(r, c) = m.at(r, c) / norm;
  }
  return out;
}

// Scalar weights of the training objective:
// total = l_det + lambda * (l_reid + beta_p*l_p + beta_pr*l_pr + beta_tr*l_tr).
// `margin` is the triplet hinge margin m. `normalize_embeddings` optionally
// L2-normalizes embeddings before triplet distances (off by default; raw
// embeddings are the literal reading).
struct LossConfig {
  double lambda = 0.1;
  double beta_p = 0.1;
  double beta_pr = 1.0;
  double beta_tr = 1.0;
  double margin = 0.3;
  bool normalize_embeddings = false;

  void validate() const {
    check(lambda >= 0 && beta_p >= 0 && beta_pr >= 0 && beta_tr >= 0,
          "LossConfig: weights must be >= 0");
    check(margin >= 0, "LossConfig: margin must be >= 0");
  }
};

// Spatial-augmentation geometry constants. `alpha` is the maximum crop-range
// expansion in pixels, `delta_p` the zero-padding length entering the range
// formula, (patch_h, patch_w) the fixed teacher patch size, and `stride` the
// pixels-per-cell of the trunk feature map.
struct AugConfig {
  double alpha = 6.0;
  double delta_p = 2.0;
  int patch_h = 32;
  int patch_w = 16;
  int stride = 4;

  void validate() const {
    check(alpha > 0 && delta_p > 0, "AugConfig: alpha and delta_p must be positive");
    check(patch_h > 0 && patch_w > 0, "AugConfig: patch size must be positive");
    check(stride > 0, "AugConfig: stride must be positive");
  }
};

namespace detail {
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
}  // namespace detail

// Deterministic splittable RNG (splitmix64 core). Identical seeds give
// bit-identical streams. split() derives an independent child stream and
// advances the parent, so each consumer owns its own sequence.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range.
  int uniform_int(int lo, int hi) {
    check(hi >= lo, "Rng::uniform_int: empty range");
    const uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  // Standard normal via Box-Muller (fresh pair per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  Rng split(uint64_t salt) {
    const uint64_t s = next_u64();
    return Rng(detail::mix64(s ^ detail::mix64(salt)));
  }

 private:
  uint64_t state_;
};

}  // namespace pskd
