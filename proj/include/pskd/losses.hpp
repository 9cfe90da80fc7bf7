// SPDX-License-Identifier: Apache-2.0
//
// Distillation and task losses as differentiable scalar graph nodes.
//
// Student inputs are graph Values; teacher inputs are plain Tensors, so
// gradients cannot reach the teacher by construction. Each loss also has a
// plain-double overload matching the batch domain types, which evaluates
// the same graph path without gradients.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pskd/autodiff.hpp"
#include "pskd/core.hpp"

namespace pskd {

struct LossDiagnostics {
  long long clamped_teacher_probs = 0;
  long long degenerate_rows = 0;
};

// Per-term values of one objective evaluation. `total` always satisfies the
// recombination l_det + lambda*(l_reid + beta_p*l_p + beta_pr*l_pr +
// beta_tr*l_tr) for the config used.
struct LossBreakdown {
  double l_det = 0;
  double l_reid = 0;
  double l_p = 0;
  double l_pr = 0;
  double l_tr = 0;
  double total = 0;
};

namespace detail {

inline ad::Tensor clamp_teacher_probs(ad::Tensor q, LossDiagnostics* diag) {
  constexpr double kFloor = 1e-12;
  for (double& v : q.data) {
    if (v <= kFloor) {
      v = kFloor;
      if (diag) ++diag->clamped_teacher_probs;
    }
  }
  return q;
}

inline ad::Tensor log_tensor(const ad::Tensor& t) {
  ad::Tensor out = t;
  for (double& v : out.data) v = std::log(v);
  return out;
}

inline ad::Tensor batch_to_tensor(const std::vector<ProbabilityVector>& b) {
  const int n = static_cast<int>(b.size());
  const int c = b.front().num_classes();
  ad::Tensor t({n, c});
  for (int i = 0; i < n; ++i) {
    check(b[i].num_classes() == c, "probability batch: class count mismatch");
    for (int j = 0; j < c; ++j) t.at2(i, j) = b[i].probs[j];
  }
  return t;
}

inline ad::Tensor batch_to_tensor(const EmbeddingBatch& b) {
  b.validate();
  ad::Tensor t({b.batch_size(), b.dim()});
  for (int i = 0; i < b.batch_size(); ++i)
    for (int j = 0; j < b.dim(); ++j) t.at2(i, j) = b.rows[i].values[j];
  return t;
}

// Mean over rows of KL(p_row || q_row) with q constant.
inline ad::Value kl_rows_mean(const ad::Value& p, const ad::Tensor& q_clamped) {
  check(p->val.shape == q_clamped.shape, "prob_kd: student/teacher shape mismatch");
  const int b = p->val.dim(0);
  check(b >= 1, "prob_kd: batch must be >= 1");
  const ad::Tensor logq = log_tensor(q_clamped);
  ad::Value term = ad::mul(p, ad::sub_const(ad::log_op(p), logq));
  return ad::scale(ad::sum(term), 1.0 / b);
}

// Row-normalized self-similarity of a constant batch.
inline ad::Tensor similarity_of(const ad::Tensor& f, LossDiagnostics* diag) {
  const int b = f.dim(0), d = f.dim(1);
  Matrix outer(b, b);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < b; ++j) {
      double s = 0;
      for (int k = 0; k < d; ++k) s += f.at2(i, k) * f.at2(j, k);
      outer.at(i, j) = s;
    }
  RowNormalizeResult norm = l2_normalize_rows(outer);
  if (diag) diag->degenerate_rows += norm.degenerate_rows;
  ad::Tensor t({b, b});
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < b; ++j) t.at2(i, j) = norm.matrix.entries.at(i, j);
  return t;
}

inline ad::Tensor row_normalized(const ad::Tensor& f) {
  ad::Tensor out = f;
  const int b = f.dim(0), d = f.dim(1);
  for (int i = 0; i < b; ++i) {
    double sq = 0;
    for (int k = 0; k < d; ++k) sq += f.at2(i, k) * f.at2(i, k);
    const double norm = std::sqrt(sq);
    if (norm < 1e-12) continue;
    for (int k = 0; k < d; ++k) out.at2(i, k) /= norm;
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Probability-aware distillation: mean KL(student || teacher) over the batch,
// teacher treated as a constant soft target. Teacher entries at or below
// 1e-12 are clamped and counted.
// ---------------------------------------------------------------------------

inline ad::Value prob_kd(const ad::Value& student_probs, const ad::Tensor& teacher_probs,
                         LossDiagnostics* diag = nullptr) {
  return detail::kl_rows_mean(student_probs, detail::clamp_teacher_probs(teacher_probs, diag));
}

inline double prob_kd(const std::vector<ProbabilityVector>& student,
                      const std::vector<ProbabilityVector>& teacher,
                      LossDiagnostics* diag = nullptr) {
  check(!student.empty() && student.size() == teacher.size(),
        "prob_kd: batch sizes must match and be >= 1");
  for (const auto& p : student) p.validate();
  for (const auto& q : teacher) q.validate();
  check(student.front().num_classes() == teacher.front().num_classes(),
        "prob_kd: class count mismatch");
  ad::Value p = ad::constant(detail::batch_to_tensor(student));
  return ad::scalar(prob_kd(p, detail::batch_to_tensor(teacher), diag));
}

// Shifted-window variant: mean over the batch of
// KL(p || q) + KL(p_shifted || q_shifted).
inline ad::Value prob_kd_fsa(const ad::Value& student_probs, const ad::Value& student_shifted,
                             const ad::Tensor& teacher_probs, const ad::Tensor& teacher_shifted,
                             LossDiagnostics* diag = nullptr) {
  check(student_probs->val.shape == student_shifted->val.shape,
        "prob_kd_fsa: shifted/unshifted student shape mismatch");
  return ad::add(prob_kd(student_probs, teacher_probs, diag),
                 prob_kd(student_shifted, teacher_shifted, diag));
}

inline double prob_kd_fsa(
    const std::vector<std::pair<ProbabilityVector, ProbabilityVector>>& student,
    const std::vector<std::pair<ProbabilityVector, ProbabilityVector>>& teacher,
    LossDiagnostics* diag = nullptr) {
  check(!student.empty() && student.size() == teacher.size(),
        "prob_kd_fsa: batch sizes must match and be >= 1");
  std::vector<ProbabilityVector> s0, s1, t0, t1;
  for (const auto& [a, b] : student) {
    s0.push_back(a);
    s1.push_back(b);
  }
  for (const auto& [a, b] : teacher) {
    t0.push_back(a);
    t1.push_back(b);
  }
  return prob_kd(s0, t0, diag) + prob_kd(s1, t1, diag);
}

// ---------------------------------------------------------------------------
// Pair-wise relation distillation: squared Frobenius distance between the
// row-normalized self-similarity matrices of the two batches, divided by B^2
// (the per-element mean). Invariant to uniform positive scaling of either
// batch.
// ---------------------------------------------------------------------------

inline ad::Value pairwise_relation_kd(const ad::Value& student, const ad::Tensor& teacher,
                                      LossDiagnostics* diag = nullptr) {
  check(student->val.shape.size() == 2 && student->val.shape == teacher.shape,
        "pairwise_relation_kd: batch shape mismatch");
  const int b = student->val.dim(0);
  check(b >= 2, "pairwise_relation_kd: batch must be >= 2");
  ad::Value sim_h = ad::row_l2_normalize(ad::matmul_nt(student, student));
  if (diag)
    for (int i = 0; i < b; ++i) {
      bool zero = true;
      for (int j = 0; j < b && zero; ++j) zero = sim_h->val.at2(i, j) == 0.0;
      if (zero) ++diag->degenerate_rows;
    }
  const ad::Tensor sim_m = detail::similarity_of(teacher, diag);
  return ad::scale(ad::sq_diff_sum(sim_h, sim_m), 1.0 / (static_cast<double>(b) * b));
}

inline double pairwise_relation_kd(const EmbeddingBatch& student, const EmbeddingBatch& teacher,
                                   LossDiagnostics* diag = nullptr) {
  ad::Tensor s = detail::batch_to_tensor(student);
  ad::Tensor t = detail::batch_to_tensor(teacher);
  check(s.shape == t.shape, "pairwise_relation_kd: batch shape mismatch");
  return ad::scalar(pairwise_relation_kd(ad::constant(s), t, diag));
}

// ---------------------------------------------------------------------------
// Triplet-wise relation distillation with batch-hard negative mining:
// mean_i hinge(m + |f_i^H - f_i^M| - min_{j != i} |f_i^H - f_j^M|).
// Ties in the hardest negative resolve to the lowest index.
// ---------------------------------------------------------------------------

inline ad::Value triplet_relation_kd(const ad::Value& student, const ad::Tensor& teacher,
                                     double margin, bool normalize = false) {
  check(student->val.shape.size() == 2 && student->val.shape == teacher.shape,
        "triplet_relation_kd: batch shape mismatch");
  check(student->val.dim(0) >= 2, "triplet_relation_kd: batch must be >= 2 (no negatives)");
  check(margin >= 0, "triplet_relation_kd: margin must be >= 0");
  ad::Value f = normalize ? ad::row_l2_normalize(student) : student;
  const ad::Tensor g = normalize ? detail::row_normalized(teacher) : teacher;
  ad::Value dists = ad::pairwise_dist_to_const(f, g);
  ad::Value pos = ad::diag_vec(dists);
  ad::Value neg = ad::hard_min_offdiag(dists);
  return ad::mean(ad::relu(ad::add_scalar(ad::sub(pos, neg), margin)));
}

inline double triplet_relation_kd(const EmbeddingBatch& student, const EmbeddingBatch& teacher,
                                  double margin, bool normalize = false) {
  ad::Tensor s = detail::batch_to_tensor(student);
  ad::Tensor t = detail::batch_to_tensor(teacher);
  check(s.shape == t.shape, "triplet_relation_kd: batch shape mismatch");
  return ad::scalar(triplet_relation_kd(ad::constant(s), t, margin, normalize));
}

// ---------------------------------------------------------------------------
// Identity cross-entropy over logits.
// ---------------------------------------------------------------------------

inline ad::Value reid_ce(const ad::Value& logits, const std::vector<int>& labels) {
  check(logits->val.shape.size() == 2, "reid_ce: logits must be a {B,C} matrix");
  const int b = logits->val.dim(0), c = logits->val.dim(1);
  check(static_cast<int>(labels.size()) == b, "reid_ce: label count mismatch");
  for (int y : labels) check(y >= 0 && y < c, "reid_ce: label out of range");
  return ad::scale(ad::sum(ad::pick_rows(ad::log_softmax_rows(logits), labels)), -1.0 / b);
}

inline double reid_ce(const std::vector<std::vector<double>>& logits,
                      const std::vector<int>& labels) {
  check(!logits.empty(), "reid_ce: empty batch");
  const int c = static_cast<int>(logits.front().size());
  ad::Tensor z({static_cast<int>(logits.size()), c});
  for (size_t i = 0; i < logits.size(); ++i) {
    check(static_cast<int>(logits[i].size()) == c, "reid_ce: ragged logits");
    for (int j = 0; j < c; ++j) z.at2(static_cast<int>(i), j) = logits[i][j];
  }
  return ad::scalar(reid_ce(ad::constant(z), labels));
}

// ---------------------------------------------------------------------------
// Total objective.
// ---------------------------------------------------------------------------

inline LossBreakdown total_loss(double l_det, double l_reid, double l_p, double l_pr,
                                double l_tr, const LossConfig& cfg) {
  cfg.validate();
  const std::pair<const char*, double> parts[] = {
      {"l_det", l_det}, {"l_reid", l_reid}, {"l_p", l_p}, {"l_pr", l_pr}, {"l_tr", l_tr}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("total_loss: non-finite term ") + name);
  LossBreakdown out;
  out.l_det = l_det;
  out.l_reid = l_reid;
  out.l_p = l_p;
  out.l_pr = l_pr;
  out.l_tr = l_tr;
  out.total = l_det + cfg.lambda * (l_reid + cfg.beta_p * l_p + cfg.beta_pr * l_pr +
                                    cfg.beta_tr * l_tr);
  return out;
}

// Graph-side combination with the same coefficients.
inline ad::Value total_loss_value(const ad::Value& l_det, const ad::Value& l_reid,
                                  const ad::Value& l_p, const ad::Value& l_pr,
                                  const ad::Value& l_tr, const LossConfig& cfg) {
  ad::Value reid_part = ad::add(l_reid, ad::add(ad::scale(l_p, cfg.beta_p),
                                                ad::add(ad::scale(l_pr, cfg.beta_pr),
                                                        ad::scale(l_tr, cfg.beta_tr))));
  return ad::add(l_det, ad::scale(reid_part, cfg.lambda));
}

}  // namespace pskd
