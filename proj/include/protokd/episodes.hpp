#pragma once

// Labeled datasets with base/val/novel class splits, N-way K-shot episode
// sampling, the nearest-centroid classifier and few-shot accuracy evaluation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "protokd/io.hpp"
#include "protokd/linalg.hpp"
#include "protokd/losses.hpp"
#include "protokd/model.hpp"
#include "protokd/rng.hpp"

namespace protokd {

enum class Split { base, val, novel };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::base: return "base";
    case Split::val: return "val";
    case Split::novel: return "novel";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "base") return Split::base;
  if (s == "val") return Split::val;
  if (s == "novel") return Split::novel;
  return std::nullopt;
}

class Dataset {
 public:
  Dataset() = default;

  /// Validates that every labeled class has exactly one split and that every
  /// split entry has samples.
  Dataset(Matrix features, std::vector<int> class_ids, std::map<int, Split> splits)
      : features_(std::move(features)), class_ids_(std::move(class_ids)), splits_(std::move(splits)) {
    detail::require(features_.rows() == class_ids_.size(), "Dataset: feature rows != label count");
    detail::require_finite(features_.span(), "Dataset");
    for (std::size_t i = 0; i < class_ids_.size(); ++i) {
      const int c = class_ids_[i];
      if (!splits_.contains(c))
        throw std::invalid_argument("Dataset: class " + std::to_string(c) + " has no split assignment");
      by_class_[c].push_back(i);
    }
    for (const auto& [c, s] : splits_) {
      if (!by_class_.contains(c))
        throw std::invalid_argument("Dataset: split lists class " + std::to_string(c) + " with no samples");
      split_classes_[static_cast<std::size_t>(s)].push_back(c);
    }
  }

  [[nodiscard]] const Matrix& features() const noexcept { return features_; }
  [[nodiscard]] const std::vector<int>& class_ids() const noexcept { return class_ids_; }
  [[nodiscard]] const std::map<int, Split>& splits() const noexcept { return splits_; }
  [[nodiscard]] std::size_t size() const noexcept { return class_ids_.size(); }
  [[nodiscard]] std::size_t dim() const noexcept { return features_.cols(); }

  /// Sorted class ids of a split.
  [[nodiscard]] const std::vector<int>& classes(Split s) const noexcept {
    return split_classes_[static_cast<std::size_t>(s)];
  }
  [[nodiscard]] std::size_t n_classes(Split s) const noexcept { return classes(s).size(); }

  /// Sample indices of a class in ascending order.
  [[nodiscard]] const std::vector<std::size_t>& samples_of(int class_id) const {
    auto it = by_class_.find(class_id);
    if (it == by_class_.end()) throw std::invalid_argument("Dataset: unknown class " + std::to_string(class_id));
    return it->second;
  }

  /// All sample indices in a split, ascending.
  [[nodiscard]] std::vector<std::size_t> samples_in(Split s) const {
    std::vector<std::size_t> out;
    for (int c : classes(s)) {
      const auto& idx = samples_of(c);
      out.insert(out.end(), idx.begin(), idx.end());
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  [[nodiscard]] Matrix gather(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), dim());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      auto src = features_.row(indices[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.features_ == b.features_ && a.class_ids_ == b.class_ids_ && a.splits_ == b.splits_;
  }

 private:
  Matrix features_;
  std::vector<int> class_ids_;
  std::map<int, Split> splits_;
  std::map<int, std::vector<std::size_t>> by_class_;
  std::vector<int> split_classes_[3];
};

struct LabeledIndex {
  std::size_t sample = 0;
  int label = 0;  // local label in [0, n_way)

  friend bool operator==(const LabeledIndex&, const LabeledIndex&) = default;
};

struct Episode {
  std::vector<LabeledIndex> support;  // class-major, k_shot per class
  std::vector<LabeledIndex> query;    // class-major, q_per_class per class
  int n_way = 0;
  int k_shot = 0;
  int q_per_class = 0;
  std::vector<int> class_map;  // local label -> global class id

  friend bool operator==(const Episode&, const Episode&) = default;
};

/// Uniformly picks n_way classes of `split` without replacement, then
/// k_shot + q_per_class samples of each class without replacement.
inline Episode sample_episode(const Dataset& ds, Split split, int n_way, int k_shot, int q_per_class, Rng& rng) {
  detail::require(n_way >= 1 && k_shot >= 1 && q_per_class >= 1, "sample_episode: counts must be positive");
  const auto& classes = ds.classes(split);
  if (classes.size() < static_cast<std::size_t>(n_way))
    throw std::invalid_argument("sample_episode: split '" + std::string(to_string(split)) + "' has " +
                                std::to_string(classes.size()) + " classes, episode needs " + std::to_string(n_way));
  const auto per_class = static_cast<std::size_t>(k_shot + q_per_class);
  for (int c : classes) {
    const std::size_t have = ds.samples_of(c).size();
    if (have < per_class)
      throw std::invalid_argument("sample_episode: class " + std::to_string(c) + " has " + std::to_string(have) +
                                  " samples, episode needs " + std::to_string(per_class) + " (short by " +
                                  std::to_string(per_class - have) + ")");
  }

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_per_class = q_per_class;

  std::vector<int> pool = classes;
  for (std::size_t i = 0; i < static_cast<std::size_t>(n_way); ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  ep.class_map.assign(pool.begin(), pool.begin() + n_way);

  std::vector<std::size_t> idx;
  for (int local = 0; local < n_way; ++local) {
    idx = ds.samples_of(ep.class_map[static_cast<std::size_t>(local)]);
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t j = i + rng.below(idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    for (std::size_t i = 0; i < static_cast<std::size_t>(k_shot); ++i) ep.support.push_back({idx[i], local});
    for (std::size_t i = static_cast<std::size_t>(k_shot); i < per_class; ++i) ep.query.push_back({idx[i], local});
  }
  return ep;
}

/// Support rows followed by query rows.
inline Matrix episode_inputs(const Dataset& ds, const Episode& ep) {
  std::vector<std::size_t> idx;
  idx.reserve(ep.support.size() + ep.query.size());
  for (const auto& s : ep.support) idx.push_back(s.sample);
  for (const auto& q : ep.query) idx.push_back(q.sample);
  return ds.gather(idx);
}

/// Splits embeddings laid out as in episode_inputs into an EpisodeEmbeddings.
inline EpisodeEmbeddings episode_embeddings(const Episode& ep, const Matrix& embeddings, double tau = 1.0) {
  detail::require(embeddings.rows() == ep.support.size() + ep.query.size(),
                  "episode_embeddings: row count != support + query");
  EpisodeEmbeddings out;
  out.n_way = ep.n_way;
  out.k_shot = ep.k_shot;
  out.tau = tau;
  const std::size_t d = embeddings.cols();
  out.support = Matrix(ep.support.size(), d);
  out.query = Matrix(ep.query.size(), d);
  for (std::size_t j = 0; j < ep.support.size(); ++j) {
    auto src = embeddings.row(j);
    std::copy(src.begin(), src.end(), out.support.row(j).begin());
    out.support_labels.push_back(ep.support[j].label);
  }
  for (std::size_t i = 0; i < ep.query.size(); ++i) {
    auto src = embeddings.row(ep.support.size() + i);
    std::copy(src.begin(), src.end(), out.query.row(i).begin());
    out.query_labels.push_back(ep.query[i].label);
  }
  return out;
}

struct Classification {
  int label = 0;
  std::vector<double> distances;
};

/// argmin over Euclidean distances; ties go to the lowest class index.
inline Classification nearest_centroid_classify(std::span<const double> query, const Prototypes& protos) {
  detail::require(!protos.centers.empty(), "nearest_centroid_classify: no prototypes");
  Classification out;
  out.distances = prototype_distances(query, protos);
  for (std::size_t k = 1; k < out.distances.size(); ++k)
    if (out.distances[k] < out.distances[static_cast<std::size_t>(out.label)]) out.label = static_cast<int>(k);
  return out;
}
inline Classification nearest_centroid_classify(const Vector& query, const Prototypes& protos) {
  return nearest_centroid_classify(query.span(), protos);
}

struct AccuracyReport {
  double mean_acc = 0.0;
  double ci95_halfwidth = 0.0;
  std::vector<double> per_episode;
};

struct EvalSettings {
  int n_episodes = 2000;
  int n_way = 5;
  int k_shot = 1;
  int q_per_class = 15;
  unsigned threads = 1;
};

/// Mean few-shot accuracy with a 1.96 * stderr half-width. Episode e draws from
/// rng.split(e), so results do not depend on the thread count.
/// `embed_fn` maps a batch of raw inputs (rows) to embeddings.
inline AccuracyReport evaluate_accuracy_with(const std::function<Matrix(const Matrix&)>& embed_fn, const Dataset& ds,
                                             Split split, const EvalSettings& cfg, const Rng& rng) {
  if (cfg.n_episodes < 2) throw std::invalid_argument("evaluate_accuracy: need at least 2 episodes for a CI");
  const auto n = static_cast<std::size_t>(cfg.n_episodes);
  AccuracyReport report;
  report.per_episode.assign(n, 0.0);

  auto run_episode = [&](std::size_t e) {
    Rng er = rng.split(e);
    const Episode ep = sample_episode(ds, split, cfg.n_way, cfg.k_shot, cfg.q_per_class, er);
    const EpisodeEmbeddings emb = episode_embeddings(ep, embed_fn(episode_inputs(ds, ep)));
    const Prototypes protos = compute_prototypes(emb);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < emb.n_query(); ++i)
      if (nearest_centroid_classify(emb.query.row(i), protos).label == emb.query_labels[i]) ++correct;
    report.per_episode[e] = static_cast<double>(correct) / static_cast<double>(emb.n_query());
  };

  // Validate the configuration once on the calling thread so errors surface here.
  { Rng probe = rng.split(0); (void)sample_episode(ds, split, cfg.n_way, cfg.k_shot, cfg.q_per_class, probe); }

  const unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(n)));
  if (threads == 1) {
    for (std::size_t e = 0; e < n; ++e) run_episode(e);
  } else {
    std::vector<std::jthread> workers;
    for (unsigned t = 0; t < threads; ++t)
      workers.emplace_back([&, t] {
        for (std::size_t e = t; e < n; e += threads) run_episode(e);
      });
  }

  double sum = 0.0;
  for (double a : report.per_episode) sum += a;
  report.mean_acc = sum / static_cast<double>(n);
  double ss = 0.0;
  for (double a : report.per_episode) ss += (a - report.mean_acc) * (a - report.mean_acc);
  const double stddev = std::sqrt(ss / static_cast<double>(n - 1));
  report.ci95_halfwidth = 1.96 * stddev / std::sqrt(static_cast<double>(n));
  return report;
}

inline AccuracyReport evaluate_accuracy(const ModelParams& params, const Dataset& ds, Split split,
                                        const EvalSettings& cfg, const Rng& rng) {
  return evaluate_accuracy_with([&params](const Matrix& x) { return embed_only(params, x); }, ds, split, cfg, rng);
}

// ---------------------------------------------------------------------------
// CSV files
//
//   dataset:  class_id,f0,f1,...,f{D-1}
//   splits:   class_id,split        split in {base, val, novel}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dataset_csv,
                          const std::filesystem::path& splits_csv) {
  {
    auto out = open_for_write(dataset_csv);
    out << "class_id";
    for (std::size_t c = 0; c < ds.dim(); ++c) out << ",f" << c;
    out << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
      out << ds.class_ids()[i];
      for (double v : ds.features().row(i)) out << ',' << format_double(v);
      out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + dataset_csv.string());
  }
  auto out = open_for_write(splits_csv);
  out << "class_id,split\n";
  for (const auto& [c, s] : ds.splits()) out << c << ',' << to_string(s) << '\n';
  if (!out) throw std::runtime_error("write failed: " + splits_csv.string());
}

inline Dataset load_dataset(const std::filesystem::path& dataset_csv, const std::filesystem::path& splits_csv) {
  std::string line;

  std::map<int, Split> splits;
  {
    auto in = open_for_read(splits_csv);
    const std::string src = splits_csv.string();
    std::size_t lineno = 0;
    if (!std::getline(in, line)) throw ParseError(src, 1, "empty file");
    ++lineno;
    if (split_view(line.ends_with('\r') ? line.substr(0, line.size() - 1) : line, ',') !=
        std::vector<std::string_view>{"class_id", "split"})
      throw ParseError(src, lineno, "expected header 'class_id,split'");
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line == "\r") continue;
      auto f = split_view(line, ',');
      int c = 0;
      if (f.size() != 2 || !parse_int(f[0], c)) throw ParseError(src, lineno, "expected 'class_id,split'");
      std::string_view sv = f[1];
      if (sv.ends_with('\r')) sv.remove_suffix(1);
      const auto s = parse_split(sv);
      if (!s) throw ParseError(src, lineno, "unknown split '" + std::string(sv) + "'");
      if (!splits.emplace(c, *s).second)
        throw ParseError(src, lineno, "class " + std::to_string(c) + " assigned to more than one split");
    }
  }

  auto in = open_for_read(dataset_csv);
  const std::string src = dataset_csv.string();
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(src, 1, "empty file");
  ++lineno;
  if (line.ends_with('\r')) line.pop_back();
  const auto header = split_view(line, ',');
  if (header.size() < 2 || header[0] != "class_id") throw ParseError(src, lineno, "expected header 'class_id,f0,...'");
  for (std::size_t c = 1; c < header.size(); ++c)
    if (header[c] != "f" + std::to_string(c - 1)) throw ParseError(src, lineno, "bad feature column name");
  const std::size_t dim = header.size() - 1;

  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_view(line, ',');
    if (f.size() != dim + 1)
      throw ParseError(src, lineno, "expected " + std::to_string(dim + 1) + " fields, found " + std::to_string(f.size()));
    int c = 0;
    if (!parse_int(f[0], c)) throw ParseError(src, lineno, "bad class_id");
    for (std::size_t k = 1; k <= dim; ++k) {
      double v = 0.0;
      if (!parse_double(f[k], v) || !std::isfinite(v)) throw ParseError(src, lineno, "bad value in column f" + std::to_string(k - 1));
      values.push_back(v);
    }
    labels.push_back(c);
  }
  if (labels.empty()) throw ParseError(src, lineno, "no samples");
  const std::size_t n = labels.size();  // read before the move below
  try {
    return Dataset(Matrix(n, dim, std::move(values)), std::move(labels), std::move(splits));
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(src + ": " + e.what());
  }
}

}  // namespace protokd
