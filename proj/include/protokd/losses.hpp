#pragma once

// Training objectives and their gradients with respect to embeddings/logits.
//
// Conventions: every episode-level loss is a mean over queries, distances are
// unsquared Euclidean (see euclidean_distance), and the teacher side of a
// distillation loss is a constant.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "protokd/linalg.hpp"
#include "protokd/model.hpp"

namespace protokd {

/// Query and support embeddings of one episode with local labels in [0, n_way).
struct EpisodeEmbeddings {
  Matrix query;                   // |Q| x D
  std::vector<int> query_labels;  // |Q|
  Matrix support;                 // N*K x D
  std::vector<int> support_labels;
  int n_way = 0;
  int k_shot = 0;
  double tau = 1.0;

  [[nodiscard]] std::size_t n_query() const noexcept { return query.rows(); }
  [[nodiscard]] std::size_t dim() const noexcept { return query.cols(); }

  void validate() const {
    detail::require(n_way >= 1 && k_shot >= 1, "EpisodeEmbeddings: n_way and k_shot must be positive");
    detail::require(tau > 0.0, "EpisodeEmbeddings: tau must be positive");
    detail::require(query.rows() == query_labels.size(), "EpisodeEmbeddings: query label count mismatch");
    detail::require(support.rows() == support_labels.size(), "EpisodeEmbeddings: support label count mismatch");
    detail::require(query.rows() >= 1, "EpisodeEmbeddings: no queries");
    detail::require(query.cols() == support.cols(), "EpisodeEmbeddings: query/support dims differ");
    std::vector<int> count(static_cast<std::size_t>(n_way), 0);
    for (int y : support_labels) {
      detail::require(y >= 0 && y < n_way, "EpisodeEmbeddings: support label out of range");
      ++count[static_cast<std::size_t>(y)];
    }
    for (int c : count) detail::require(c == k_shot, "EpisodeEmbeddings: class without exactly k_shot supports");
    for (int y : query_labels) detail::require(y >= 0 && y < n_way, "EpisodeEmbeddings: query label out of range");
  }
};

struct Prototypes {
  std::vector<Vector> centers;
};

/// Per-class mean of the support embeddings. Each coordinate is accumulated in
/// sorted order so the result does not depend on support ordering.
inline Prototypes compute_prototypes(const EpisodeEmbeddings& ep) {
  ep.validate();
  const std::size_t d = ep.dim();
  const auto n_way = static_cast<std::size_t>(ep.n_way);
  std::vector<std::vector<std::size_t>> members(n_way);
  for (std::size_t j = 0; j < ep.support_labels.size(); ++j)
    members[static_cast<std::size_t>(ep.support_labels[j])].push_back(j);

  Prototypes protos;
  protos.centers.assign(n_way, Vector(d));
  std::vector<double> column;
  for (std::size_t k = 0; k < n_way; ++k) {
    for (std::size_t c = 0; c < d; ++c) {
      column.clear();
      for (std::size_t j : members[k]) column.push_back(ep.support(j, c));
      std::sort(column.begin(), column.end());
      double s = 0.0;
      for (double v : column) s += v;
      protos.centers[k][c] = s / static_cast<double>(members[k].size());
    }
  }
  return protos;
}

/// Distances from one embedding to every prototype.
inline std::vector<double> prototype_distances(std::span<const double> f, const Prototypes& protos) {
  std::vector<double> d(protos.centers.size());
  for (std::size_t k = 0; k < d.size(); ++k) d[k] = euclidean_distance(f, protos.centers[k].span());
  return d;
}

/// (f - c) / ||f - c|| with the same regularized norm as euclidean_distance.
inline Vector unit_direction(std::span<const double> f, std::span<const double> c, double dist) {
  Vector delta(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) delta[i] = (f[i] - c[i]) / dist;
  return delta;
}

struct ScResult {
  double loss = 0.0;
  Matrix query_grads;    // closed-form gradient, mean-normalized, includes 1/tau
  Matrix support_grads;  // through the prototypes
};

/// Supervised contrastive loss: mean over queries of -ln p(y | x) where p is a
/// softmax over negative query-prototype distances.
///
/// Query gradient: (1 / |Q|) (1 / tau) sum_k w_k (f - c_k) / ||f - c_k||,
/// w_y = 1 - p_y, w_k = -p_k otherwise.
inline ScResult sc_loss(const EpisodeEmbeddings& ep, const Prototypes& protos) {
  ep.validate();
  detail::require(protos.centers.size() == static_cast<std::size_t>(ep.n_way), "sc_loss: prototype count != n_way");
  const std::size_t nq = ep.n_query();
  const double inv_q = 1.0 / static_cast<double>(nq);
  const auto n_way = static_cast<std::size_t>(ep.n_way);

  ScResult r;
  r.query_grads = Matrix(nq, ep.dim());
  std::vector<Vector> center_grads(n_way, Vector(ep.dim()));
  for (std::size_t i = 0; i < nq; ++i) {
    auto f = ep.query.row(i);
    const auto d = prototype_distances(f, protos);
    const ProbVector p = softmax_neg_dist(d, ep.tau);
    const auto y = static_cast<std::size_t>(ep.query_labels[i]);
    r.loss += -std::log(p[y]);
    auto gi = r.query_grads.row(i);
    for (std::size_t k = 0; k < n_way; ++k) {
      const double w = (k == y ? 1.0 : 0.0) - p[k];
      const Vector delta = unit_direction(f, protos.centers[k].span(), d[k]);
      const double scale = w * inv_q / ep.tau;
      axpy(scale, delta.span(), gi);
      axpy(-scale, delta.span(), center_grads[k].span());
    }
  }
  r.loss *= inv_q;

  r.support_grads = Matrix(ep.support.rows(), ep.dim());
  const double inv_k = 1.0 / static_cast<double>(ep.k_shot);
  for (std::size_t j = 0; j < ep.support.rows(); ++j)
    axpy(inv_k, center_grads[static_cast<std::size_t>(ep.support_labels[j])].span(), r.support_grads.row(j));
  return r;
}

namespace detail {

/// Gradient of KL_S(p, q) with respect to the logits that produced p (q fixed):
/// a_j = p_j (g_j - sum_k p_k g_k), g_k = ln(p_k / q_k) + 1 - q_k / p_k.
inline std::vector<double> skl_grad_wrt_logits(const ProbVector& p, const ProbVector& q) {
  const std::size_t n = p.n();
  std::vector<double> g(n);
  double mean = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    g[k] = std::log(p[k] / q[k]) + 1.0 - q[k] / p[k];
    mean += p[k] * g[k];
  }
  for (std::size_t k = 0; k < n; ++k) g[k] = p[k] * (g[k] - mean);
  return g;
}

}  // namespace detail

struct SklResult {
  double loss = 0.0;
  Matrix grad_logits;  // w.r.t. student logits
};

/// Batch mean of KL_S(softmax(student_i), softmax(teacher_i)).
inline SklResult skl_loss(const Matrix& student_logits, const Matrix& teacher_logits) {
  detail::require(student_logits.rows() == teacher_logits.rows() && student_logits.cols() == teacher_logits.cols(),
                  "skl_loss: student/teacher logit shapes differ");
  detail::require(student_logits.rows() >= 1, "skl_loss: empty batch");
  const double inv_n = 1.0 / static_cast<double>(student_logits.rows());
  SklResult r;
  r.grad_logits = Matrix(student_logits.rows(), student_logits.cols());
  for (std::size_t i = 0; i < student_logits.rows(); ++i) {
    const ProbVector p = softmax(student_logits.row(i));
    const ProbVector q = softmax(teacher_logits.row(i));
    r.loss += symmetric_kl(p, q);
    const auto a = detail::skl_grad_wrt_logits(p, q);
    axpy(inv_n, a, r.grad_logits.row(i));
  }
  r.loss *= inv_n;
  return r;
}

inline SklResult skl_loss(const std::vector<Vector>& student_logits, const std::vector<Vector>& teacher_logits) {
  detail::require(student_logits.size() == teacher_logits.size() && !student_logits.empty(),
                  "skl_loss: batch sizes differ");
  const std::size_t c = student_logits.front().dim();
  Matrix s(student_logits.size(), c), t(teacher_logits.size(), c);
  for (std::size_t i = 0; i < student_logits.size(); ++i) {
    detail::require(student_logits[i].dim() == c && teacher_logits[i].dim() == c, "skl_loss: logit dims differ");
    std::copy(student_logits[i].begin(), student_logits[i].end(), s.row(i).begin());
    std::copy(teacher_logits[i].begin(), teacher_logits[i].end(), t.row(i).begin());
  }
  return skl_loss(s, t);
}

struct NnsklResult {
  double loss = 0.0;
  Matrix exact_query_grads;
  Matrix exact_support_grads;
  /// sum_k r_k (f - c_k) / ||f - c_k||, r_k = (||f - c_k|| - ||f - c'_k||) / K,
  /// with c'_k the teacher prototype. Per query, without the 1/|Q| mean.
  Matrix approx_query_grads;
};

/// Mean over queries of KL_S(p_student, p_teacher), each p being a softmax over
/// negative distances from that model's query embedding to its own prototypes.
inline NnsklResult nnskl_loss(const EpisodeEmbeddings& student, const EpisodeEmbeddings& teacher) {
  student.validate();
  teacher.validate();
  if (student.n_way != teacher.n_way || student.k_shot != teacher.k_shot ||
      student.query_labels != teacher.query_labels || student.support_labels != teacher.support_labels ||
      student.dim() != teacher.dim() || student.tau != teacher.tau)
    throw std::invalid_argument("nnskl_loss: student and teacher episodes differ in structure");

  const Prototypes cs = compute_prototypes(student);
  const Prototypes ct = compute_prototypes(teacher);
  const std::size_t nq = student.n_query();
  const auto n_way = static_cast<std::size_t>(student.n_way);
  const double inv_q = 1.0 / static_cast<double>(nq);
  const double inv_k = 1.0 / static_cast<double>(student.k_shot);
  const double tau = student.tau;

  NnsklResult r;
  r.exact_query_grads = Matrix(nq, student.dim());
  r.approx_query_grads = Matrix(nq, student.dim());
  std::vector<Vector> center_grads(n_way, Vector(student.dim()));
  for (std::size_t i = 0; i < nq; ++i) {
    auto f = student.query.row(i);
    const auto ds = prototype_distances(f, cs);
    const auto dt = prototype_distances(teacher.query.row(i), ct);
    const ProbVector p = softmax_neg_dist(ds, tau);
    const ProbVector q = softmax_neg_dist(dt, tau);
    r.loss += symmetric_kl(p, q);

    // logits are -d / tau, so dL/dd_k = -a_k / tau.
    const auto a = detail::skl_grad_wrt_logits(p, q);
    auto gi = r.exact_query_grads.row(i);
    auto ai = r.approx_query_grads.row(i);
    for (std::size_t k = 0; k < n_way; ++k) {
      const Vector delta = unit_direction(f, cs.centers[k].span(), ds[k]);
      const double dl_dd = -a[k] / tau * inv_q;
      axpy(dl_dd, delta.span(), gi);
      axpy(-dl_dd, delta.span(), center_grads[k].span());

      const double rk = inv_k * (ds[k] - euclidean_distance(f, ct.centers[k].span()));
      axpy(rk, delta.span(), ai);
    }
  }
  r.loss *= inv_q;

  r.exact_support_grads = Matrix(student.support.rows(), student.dim());
  for (std::size_t j = 0; j < student.support.rows(); ++j)
    axpy(inv_k, center_grads[static_cast<std::size_t>(student.support_labels[j])].span(),
         r.exact_support_grads.row(j));
  return r;
}

struct PretrainLossResult {
  double loss = 0.0;         // batch-mean cross-entropy
  double regularizer = 0.0;  // 0.5 * weight_decay * ||params||^2, applied by the optimizer
  Matrix grad_logits;        // (softmax - onehot) / batch
};

inline PretrainLossResult pretrain_loss(const Matrix& logits, const std::vector<int>& labels,
                                        const ModelParams& params, double weight_decay) {
  detail::require(logits.rows() == labels.size() && !labels.empty(), "pretrain_loss: label count != batch size");
  detail::require(logits.cols() == params.n_classes(), "pretrain_loss: logit dim != class count");
  const double inv_n = 1.0 / static_cast<double>(labels.size());
  PretrainLossResult r;
  r.grad_logits = Matrix(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols())
      throw std::invalid_argument("pretrain_loss: label " + std::to_string(y) + " out of range");
    auto z = logits.row(i);
    const auto top = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    const double mx = z[top];
    // log1p over the non-max terms keeps confident predictions accurate
    double rest = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k)
      if (k != top) rest += std::exp(z[k] - mx);
    const double log_sum = std::log1p(rest);
    const double lse = mx + log_sum;
    r.loss += (mx - z[static_cast<std::size_t>(y)]) + log_sum;
    auto g = r.grad_logits.row(i);
    for (std::size_t k = 0; k < z.size(); ++k) g[k] = std::exp(z[k] - lse) * inv_n;
    g[static_cast<std::size_t>(y)] -= inv_n;
  }
  r.loss *= inv_n;

  double sq = 0.0;
  for_each_tensor(params, [&sq](const std::string&, std::span<const double> t) { sq += squared_norm(t); });
  r.regularizer = 0.5 * weight_decay * sq;
  return r;
}

inline double meta_loss(double sc, double skl, double nnskl, double lambda1 = 1.0, double lambda2 = 1.0) {
  return sc + lambda1 * skl + lambda2 * nnskl;
}

}  // namespace protokd
