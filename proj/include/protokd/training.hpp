#pragma once

// Optimizer, whole-classification pre-training, and episodic meta-training
// with distillation from a validation-selected teacher.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "protokd/episodes.hpp"
#include "protokd/losses.hpp"
#include "protokd/model.hpp"
#include "protokd/rng.hpp"

namespace protokd {

// ---------------------------------------------------------------------------
// SGD with momentum and weight decay

struct OptimizerState {
  ParamGrads momentum_buffers;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

inline OptimizerState make_optimizer(const ModelParams& params, double lr, double momentum, double weight_decay) {
  detail::require(lr > 0.0, "optimizer: lr must be positive");
  detail::require(momentum >= 0.0 && momentum < 1.0, "optimizer: momentum must be in [0, 1)");
  detail::require(weight_decay >= 0.0, "optimizer: weight_decay must be non-negative");
  return {ParamGrads::zeros_like(params), lr, momentum, weight_decay};
}

namespace detail {

template <class P>
std::vector<std::span<double>> mutable_tensors(P& p) {
  std::vector<std::span<double>> out;
  for_each_tensor(p, [&out](const std::string&, std::span<double> t) { out.push_back(t); });
  return out;
}

template <class P>
std::vector<std::span<const double>> const_tensors(const P& p) {
  std::vector<std::span<const double>> out;
  for_each_tensor(p, [&out](const std::string&, std::span<const double> t) { out.push_back(t); });
  return out;
}

}  // namespace detail

/// Per tensor: g' = g + wd * w;  buf = momentum * buf + g';  w -= lr * buf.
inline void sgd_step(ModelParams& params, const ParamGrads& grads, OptimizerState& state) {
  auto w = detail::mutable_tensors(params);
  auto g = detail::const_tensors(grads);
  auto b = detail::mutable_tensors(state.momentum_buffers);
  if (w.size() != g.size() || w.size() != b.size())
    throw std::invalid_argument("sgd_step: gradient layout does not match parameters");
  for (std::size_t t = 0; t < w.size(); ++t) {
    if (w[t].size() != g[t].size() || w[t].size() != b[t].size())
      throw std::invalid_argument("sgd_step: tensor " + std::to_string(t) + " shape mismatch");
    for (std::size_t i = 0; i < w[t].size(); ++i) {
      const double gi = g[t][i] + state.weight_decay * w[t][i];
      b[t][i] = state.momentum * b[t][i] + gi;
      w[t][i] -= state.lr * b[t][i];
    }
  }
}

/// Raised when a loss or gradient becomes non-finite. Carries the student
/// parameters from just before the failing step.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, ModelParams last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  [[nodiscard]] const ModelParams& last_good() const noexcept { return last_good_; }

 private:
  ModelParams last_good_;
};

namespace detail {

inline bool all_finite(const ParamGrads& g) {
  bool ok = true;
  for_each_tensor(g, [&ok](const std::string&, std::span<const double> t) {
    for (double v : t) ok = ok && std::isfinite(v);
  });
  return ok;
}

/// Head index of every base sample: position of its class among the sorted base classes.
inline std::vector<int> base_head_labels(const Dataset& ds, std::span<const std::size_t> samples) {
  const auto& base = ds.classes(Split::base);
  std::vector<int> out;
  out.reserve(samples.size());
  for (std::size_t s : samples) {
    const auto it = std::lower_bound(base.begin(), base.end(), ds.class_ids()[s]);
    if (it == base.end() || *it != ds.class_ids()[s]) throw std::invalid_argument("sample is not in the base split");
    out.push_back(static_cast<int>(it - base.begin()));
  }
  return out;
}

inline void require_finite_embeddings(const Matrix& m, const char* what, const ModelParams& params) {
  for (double v : m.span())
    if (!std::isfinite(v)) throw TrainingDiverged(std::string("non-finite ") + what, params);
}

/// k draws without replacement from `pool` (partial Fisher-Yates on a copy).
inline std::vector<std::size_t> draw_without_replacement(std::vector<std::size_t> pool, std::size_t k, Rng& rng) {
  detail::require(k <= pool.size(), "draw: batch larger than pool");
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  pool.resize(k);
  return pool;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pre-training: cross-entropy over base classes with L2 weight decay

struct PretrainConfig {
  std::vector<std::size_t> hidden_dims{64, 64, 32};  // last entry is the embedding dim
  int epochs = 10;
  int batch_size = 64;
  double lr = 0.02;  // cosine-annealed to 0 over the run
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int val_episodes = 100;  // 5-way 1-shot on the val split; 0 disables
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct PretrainLog {
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct PretrainResult {
  ModelParams params;
  std::vector<PretrainLog> logs;
};

/// Seed passed to init_params by pretrain for a given run seed.
inline std::uint64_t init_seed_for(std::uint64_t seed) { return Rng(seed).split("init").next_u64(); }

inline std::vector<std::size_t> model_dims(std::size_t input_dim, const std::vector<std::size_t>& hidden) {
  std::vector<std::size_t> dims{input_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  return dims;
}

inline PretrainResult pretrain(const Dataset& ds, const PretrainConfig& cfg) {
  detail::require(ds.n_classes(Split::base) >= 2, "pretrain: need at least 2 base classes");
  detail::require(cfg.epochs >= 0 && cfg.batch_size >= 1, "pretrain: bad epoch/batch configuration");
  detail::require(!cfg.hidden_dims.empty(), "pretrain: no layer dims");

  PretrainResult result;
  result.params = init_params(model_dims(ds.dim(), cfg.hidden_dims), ds.n_classes(Split::base), init_seed_for(cfg.seed));
  if (cfg.epochs == 0) return result;

  ModelParams& params = result.params;
  OptimizerState opt = make_optimizer(params, cfg.lr, cfg.momentum, cfg.weight_decay);
  const Rng root(cfg.seed);
  Rng shuffle_rng = root.split("shuffle");
  const Rng val_rng = root.split("validation");

  std::vector<std::size_t> order = ds.samples_in(Split::base);
  const std::size_t n = order.size();
  const std::size_t batches = (n + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size);
  const double total_steps = static_cast<double>(batches) * cfg.epochs;
  std::size_t step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i + 1 < n; ++i) std::swap(order[i], order[i + shuffle_rng.below(n - i)]);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      const std::size_t lo = b * static_cast<std::size_t>(cfg.batch_size);
      const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const auto labels = detail::base_head_labels(ds, idx);

      const ForwardTrace trace = embed_batch(params, ds.gather(idx));
      const Matrix logits = classify_logits_batch(params, trace.output);
      const PretrainLossResult ce = pretrain_loss(logits, labels, params, cfg.weight_decay);
      if (!std::isfinite(ce.loss))
        throw TrainingDiverged("pretrain: non-finite loss at epoch " + std::to_string(epoch), params);
      loss_sum += ce.loss * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        auto row = logits.row(i);
        if (std::max_element(row.begin(), row.end()) - row.begin() == labels[i]) ++correct;
      }

      ParamGrads grads = ParamGrads::zeros_like(params);
      const Matrix d_embed = backprop_head(params, trace.output, ce.grad_logits, grads);
      grads.extractor = backprop_embedding_grad(params, trace, d_embed).extractor;

      opt.lr = 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      if (opt.lr <= 0.0) continue;
      sgd_step(params, grads, opt);
    }

    PretrainLog log;
    log.epoch = epoch;
    log.loss = loss_sum / static_cast<double>(n);
    log.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    log.val_acc = std::nan("");
    if (cfg.val_episodes >= 2 && ds.n_classes(Split::val) >= 5) {
      EvalSettings ev{cfg.val_episodes, 5, 1, 15, cfg.threads};
      log.val_acc = evaluate_accuracy(params, ds, Split::val, ev, val_rng).mean_acc;
    }
    result.logs.push_back(log);
  }
  return result;
}

/// Fraction of base samples whose head argmax is their class.
inline double base_train_accuracy(const ModelParams& params, const Dataset& ds) {
  const auto idx = ds.samples_in(Split::base);
  const auto labels = detail::base_head_labels(ds, idx);
  const Matrix logits = classify_logits_batch(params, embed_only(params, ds.gather(idx)));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto row = logits.row(i);
    if (std::max_element(row.begin(), row.end()) - row.begin() == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// ---------------------------------------------------------------------------
// Meta-training

enum class NnsklGradMode { exact, paper_approx };

struct TrainConfig {
  int epochs = 40;
  int iters_per_epoch = 50;
  int n_way = 20;
  int k_shot = 1;
  int q_per_class = 15;
  double lambda1 = 1.0;  // SKL weight
  double lambda2 = 1.0;  // NNSKL weight
  int skl_batch_size = 64;
  int val_episodes = 200;
  int val_n_way = 5;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double tau = 1.0;
  std::uint64_t seed = 0;
  NnsklGradMode nnskl_grad = NnsklGradMode::exact;
  unsigned threads = 1;

  void validate() const {
    auto req = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(std::string("TrainConfig: ") + what);
    };
    req(epochs >= 0, "epochs must be non-negative");
    req(iters_per_epoch >= 1 && n_way >= 2 && k_shot >= 1 && q_per_class >= 1, "counts must be positive");
    req(lambda1 >= 0.0 && lambda2 >= 0.0, "lambdas must be non-negative");
    req(skl_batch_size >= 1, "skl_batch_size must be positive");
    req(val_episodes >= 2 && val_n_way >= 2, "validation needs >= 2 episodes and >= 2 ways");
    req(tau > 0.0, "tau must be positive");
  }
};

struct EpochLog {
  int epoch = 0;
  double mean_sc = 0.0;
  double mean_skl = 0.0;
  double mean_nnskl = 0.0;
  double mean_meta = 0.0;
  double val_acc_1shot = 0.0;
  double val_acc_kshot = 0.0;
  bool teacher_replaced = false;
  double teacher_val_acc = 0.0;
  /// Mean cosine between the exact and approximate NNSKL query gradients over
  /// iterations where both are nonzero; NaN when there were none. Diagnostic
  /// only, not part of the CSV log.
  double nnskl_grad_cosine = std::numeric_limits<double>::quiet_NaN();
};

struct ValidationScores {
  double one_shot = 0.0;
  double k_shot = 0.0;  // the teacher-selection metric
};

/// Called with the model to score and the epoch (0 for the initial teacher).
using Validator = std::function<ValidationScores(const ModelParams&, int epoch)>;
using EpochObserver = std::function<void(const EpochLog&, const ModelParams& student, const TeacherSnapshot& teacher)>;

/// Validation on the val split using the same episodes every epoch.
inline Validator default_validator(const Dataset& ds, const TrainConfig& cfg) {
  const Rng val_rng = Rng(cfg.seed).split("validation");
  return [&ds, cfg, val_rng](const ModelParams& p, int) {
    const EvalSettings kshot{cfg.val_episodes, cfg.val_n_way, cfg.k_shot, cfg.q_per_class, cfg.threads};
    ValidationScores s;
    s.k_shot = evaluate_accuracy(p, ds, Split::val, kshot, val_rng).mean_acc;
    if (cfg.k_shot == 1) {
      s.one_shot = s.k_shot;
    } else {
      EvalSettings one = kshot;
      one.k_shot = 1;
      s.one_shot = evaluate_accuracy(p, ds, Split::val, one, val_rng).mean_acc;
    }
    return s;
  };
}

/// A teacher is replaced only on strict improvement; ties keep the incumbent.
inline bool should_replace_teacher(double student_acc, double teacher_acc) { return student_acc > teacher_acc; }

/// Effective n_way for meta-training: the configured value, capped at the
/// number of base classes.
inline int effective_n_way(const Dataset& ds, const TrainConfig& cfg) {
  return std::min(cfg.n_way, static_cast<int>(ds.n_classes(Split::base)));
}

struct IterationReport {
  double sc = 0.0;
  double skl = 0.0;
  double nnskl = 0.0;
  double meta = 0.0;
  /// Cosine between the exact and approximate NNSKL query gradients; NaN when
  /// NNSKL is off or either gradient vanishes (e.g. teacher == student).
  double nnskl_grad_cosine = std::numeric_limits<double>::quiet_NaN();
  ParamGrads grads;
};

/// Losses and the full student gradient of one meta-training iteration.
/// `skl_batch` is ignored when lambda1 == 0; the teacher is ignored when both
/// lambdas are 0.
inline IterationReport meta_iteration(const ModelParams& student, const ModelParams& teacher, const Dataset& ds,
                                      const Episode& episode, const Matrix* skl_inputs, const TrainConfig& cfg) {
  IterationReport rep;
  const Matrix inputs = episode_inputs(ds, episode);
  const ForwardTrace trace = embed_batch(student, inputs);
  detail::require_finite_embeddings(trace.output, "episode embeddings", student);
  const EpisodeEmbeddings emb = episode_embeddings(episode, trace.output, cfg.tau);
  const ScResult sc = sc_loss(emb, compute_prototypes(emb));
  rep.sc = sc.loss;

  const std::size_t ns = emb.support.rows();
  Matrix g(trace.batch(), student.embed_dim());
  for (std::size_t j = 0; j < ns; ++j) std::copy(sc.support_grads.row(j).begin(), sc.support_grads.row(j).end(), g.row(j).begin());
  for (std::size_t i = 0; i < emb.n_query(); ++i)
    std::copy(sc.query_grads.row(i).begin(), sc.query_grads.row(i).end(), g.row(ns + i).begin());

  if (cfg.lambda2 > 0.0) {
    const EpisodeEmbeddings temb = episode_embeddings(episode, embed_only(teacher, inputs), cfg.tau);
    const NnsklResult nn = nnskl_loss(emb, temb);
    rep.nnskl = nn.loss;
    if (squared_norm(nn.exact_query_grads.span()) > 0.0 && squared_norm(nn.approx_query_grads.span()) > 0.0)
      rep.nnskl_grad_cosine = cosine_similarity(nn.exact_query_grads.span(), nn.approx_query_grads.span());
    if (cfg.nnskl_grad == NnsklGradMode::exact) {
      for (std::size_t j = 0; j < ns; ++j) axpy(cfg.lambda2, nn.exact_support_grads.row(j), g.row(j));
      for (std::size_t i = 0; i < emb.n_query(); ++i) axpy(cfg.lambda2, nn.exact_query_grads.row(i), g.row(ns + i));
    } else {
      const double scale = cfg.lambda2 / static_cast<double>(emb.n_query());
      for (std::size_t i = 0; i < emb.n_query(); ++i) axpy(scale, nn.approx_query_grads.row(i), g.row(ns + i));
    }
  }
  rep.grads = backprop_embedding_grad(student, trace, g);

  if (cfg.lambda1 > 0.0) {
    detail::require(skl_inputs != nullptr, "meta_iteration: SKL batch required when lambda1 > 0");
    const ForwardTrace st = embed_batch(student, *skl_inputs);
    detail::require_finite_embeddings(st.output, "SKL batch embeddings", student);
    const Matrix s_logits = classify_logits_batch(student, st.output);
    const Matrix t_logits = classify_logits_batch(teacher, embed_only(teacher, *skl_inputs));
    const SklResult skl = skl_loss(s_logits, t_logits);
    rep.skl = skl.loss;
    ParamGrads skl_grads = ParamGrads::zeros_like(student);
    const Matrix d_embed = backprop_head(student, st.output, skl.grad_logits, skl_grads);
    skl_grads.extractor = backprop_embedding_grad(student, st, d_embed).extractor;
    rep.grads.add_scaled(cfg.lambda1, skl_grads);
  }
  rep.meta = meta_loss(rep.sc, rep.skl, rep.nnskl, cfg.lambda1, cfg.lambda2);
  return rep;
}

struct MetatrainResult {
  ModelParams final_params;
  TeacherSnapshot best;
  std::vector<EpochLog> logs;
};

/// Episodic meta-training. Per iteration: sample a base-split episode, embed
/// it with student and teacher, add SC, lambda2 * NNSKL and (on an independent
/// non-episodic base batch) lambda1 * SKL, then take one SGD step on the
/// student. Per epoch: validate the student and promote it to teacher on
/// strict improvement. The initial student is the initial teacher.
inline MetatrainResult metatrain(const ModelParams& initial, const Dataset& ds, const TrainConfig& cfg,
                                 Validator validator = {}, const EpochObserver& observer = {}) {
  cfg.validate();
  initial.validate();
  detail::require(initial.input_dim() == ds.dim(), "metatrain: model input dim != dataset dim");
  if (!validator) validator = default_validator(ds, cfg);

  TrainConfig run_cfg = cfg;
  run_cfg.n_way = effective_n_way(ds, cfg);

  const Rng root(cfg.seed);
  Rng episode_rng = root.split("episodes");
  Rng skl_rng = root.split("skl");
  const std::vector<std::size_t> base_pool = ds.samples_in(Split::base);
  detail::require(static_cast<std::size_t>(cfg.skl_batch_size) <= base_pool.size(), "metatrain: skl_batch_size exceeds base split");

  ModelParams student = initial;
  OptimizerState opt = make_optimizer(student, cfg.lr, cfg.momentum, cfg.weight_decay);
  const ValidationScores init_scores = validator(initial, 0);
  MetatrainResult result{ModelParams{}, snapshot(initial, init_scores.k_shot, 0), {}};

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    double cosine_sum = 0.0;
    int cosine_count = 0;
    for (int it = 0; it < cfg.iters_per_epoch; ++it) {
      const Episode episode = sample_episode(ds, Split::base, run_cfg.n_way, cfg.k_shot, cfg.q_per_class, episode_rng);
      std::optional<Matrix> skl_inputs;
      if (cfg.lambda1 > 0.0)
        skl_inputs = ds.gather(detail::draw_without_replacement(base_pool, static_cast<std::size_t>(cfg.skl_batch_size), skl_rng));

      auto diverged = [&](const std::exception& e) {
        return TrainingDiverged("metatrain: " + std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                    " iteration " + std::to_string(it),
                                student);
      };
      IterationReport rep;
      try {
        rep = meta_iteration(student, result.best.params(), ds, episode, skl_inputs ? &*skl_inputs : nullptr, run_cfg);
      } catch (const TrainingDiverged& e) {
        throw diverged(e);
      } catch (const NonFiniteError& e) {
        // distances can overflow while the embeddings are still finite
        throw diverged(e);
      }
      if (!std::isfinite(rep.meta) || !detail::all_finite(rep.grads)) {
        std::ostringstream msg;
        msg << "metatrain: non-finite loss or gradient at epoch " << epoch << " iteration " << it
            << " (sc=" << rep.sc << " skl=" << rep.skl << " nnskl=" << rep.nnskl << " meta=" << rep.meta << ")";
        throw TrainingDiverged(msg.str(), student);
      }
      log.mean_sc += rep.sc;
      log.mean_skl += rep.skl;
      log.mean_nnskl += rep.nnskl;
      log.mean_meta += rep.meta;
      if (!std::isnan(rep.nnskl_grad_cosine)) {
        cosine_sum += rep.nnskl_grad_cosine;
        ++cosine_count;
      }
      sgd_step(student, rep.grads, opt);
    }
    const double n_iters = cfg.iters_per_epoch;
    log.mean_sc /= n_iters;
    log.mean_skl /= n_iters;
    log.mean_nnskl /= n_iters;
    log.mean_meta /= n_iters;
    if (cosine_count > 0) log.nnskl_grad_cosine = cosine_sum / cosine_count;

    const ValidationScores scores = validator(student, epoch);
    log.val_acc_1shot = scores.one_shot;
    log.val_acc_kshot = scores.k_shot;
    log.teacher_replaced = should_replace_teacher(scores.k_shot, result.best.val_accuracy());
    if (log.teacher_replaced) result.best = snapshot(student, scores.k_shot, epoch);
    log.teacher_val_acc = result.best.val_accuracy();
    result.logs.push_back(log);
    if (observer) observer(log, student, result.best);
  }
  result.final_params = std::move(student);
  return result;
}

}  // namespace protokd
