#pragma once

// Dimension-collapse and class-geometry diagnostics for learned embeddings.

#include <cfloat>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <vector>

#include "protokd/episodes.hpp"
#include "protokd/io.hpp"
#include "protokd/linalg.hpp"
#include "protokd/model.hpp"
#include "protokd/rng.hpp"

namespace protokd {

inline constexpr double kDefaultRankThreshold = 1e-3;

struct SpectrumReport {
  std::vector<double> singular_values;  // descending
  std::vector<double> log10_values;
  int effective_rank = 0;
  std::size_t n_samples = 0;
  std::size_t embed_dim = 0;
};

/// Number of singular values strictly above threshold * sigma_1.
inline int effective_rank(const std::vector<double>& sorted_desc, double threshold) {
  if (sorted_desc.empty() || sorted_desc.front() <= 0.0) return 0;
  const double cut = threshold * sorted_desc.front();
  int r = 0;
  for (double s : sorted_desc)
    if (s > cut) ++r;
  return r;
}

/// Spectrum of an embedding matrix (one row per sample), optionally
/// column-centered first.
inline SpectrumReport spectrum_of(Matrix embeddings, double threshold = kDefaultRankThreshold, bool center = true) {
  detail::require(embeddings.rows() >= 2, "spectrum: need at least 2 samples");
  detail::require(threshold > 0.0 && threshold < 1.0, "spectrum: threshold must be in (0, 1)");
  if (center) {
    for (std::size_t c = 0; c < embeddings.cols(); ++c) {
      double mean = 0.0;
      for (std::size_t r = 0; r < embeddings.rows(); ++r) mean += embeddings(r, c);
      mean /= static_cast<double>(embeddings.rows());
      for (std::size_t r = 0; r < embeddings.rows(); ++r) embeddings(r, c) -= mean;
    }
  }
  SpectrumReport rep;
  rep.n_samples = embeddings.rows();
  rep.embed_dim = embeddings.cols();
  rep.singular_values = singular_values(embeddings);
  rep.log10_values.reserve(rep.singular_values.size());
  for (double s : rep.singular_values) rep.log10_values.push_back(std::log10(std::max(s, DBL_MIN)));
  rep.effective_rank = effective_rank(rep.singular_values, threshold);
  return rep;
}

struct SpectrumSettings {
  std::size_t max_samples = 2000;
  double threshold = kDefaultRankThreshold;
  bool center = true;
  std::uint64_t seed = 0;  // drives the subsample when the split is larger than max_samples
};

inline SpectrumReport embedding_spectrum(const ModelParams& params, const Dataset& ds, Split split,
                                         const SpectrumSettings& cfg = {}) {
  std::vector<std::size_t> idx = ds.samples_in(split);
  if (idx.size() < 2 || cfg.max_samples < 2) throw std::invalid_argument("embedding_spectrum: fewer than 2 samples");
  if (idx.size() > cfg.max_samples) {
    Rng rng = Rng(cfg.seed).split("spectrum");
    for (std::size_t i = 0; i < cfg.max_samples; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(cfg.max_samples);
    std::sort(idx.begin(), idx.end());
  }
  return spectrum_of(embed_only(params, ds.gather(idx)), cfg.threshold, cfg.center);
}

struct GeometryReport {
  std::map<int, double> per_class_variance;
  std::map<int, std::size_t> per_class_count;
  double mean_intra_variance = 0.0;
  double mean_inter_center_distance = 0.0;
  /// Classes with fewer than 2 samples; their variance is reported as 0.
  std::vector<int> undersampled_classes;
};

/// Intra-class variance (mean squared distance to the class mean) and mean
/// pairwise distance between class means, from embeddings grouped by class.
inline GeometryReport geometry_of(const std::map<int, Matrix>& by_class) {
  detail::require(by_class.size() >= 2, "class_geometry: need at least 2 classes");
  GeometryReport rep;
  std::vector<Vector> centers;
  for (const auto& [c, m] : by_class) {
    detail::require(m.rows() >= 1, "class_geometry: class without samples");
    Vector mean(m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) axpy(1.0, m.row(r), mean.span());
    for (double& v : mean) v /= static_cast<double>(m.rows());
    double var = 0.0;
    if (m.rows() < 2) {
      rep.undersampled_classes.push_back(c);
    } else {
      for (std::size_t r = 0; r < m.rows(); ++r) var += squared_distance(m.row(r), mean.span());
      var /= static_cast<double>(m.rows());
    }
    rep.per_class_variance[c] = var;
    rep.per_class_count[c] = m.rows();
    rep.mean_intra_variance += var;
    centers.push_back(std::move(mean));
  }
  rep.mean_intra_variance /= static_cast<double>(by_class.size());

  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < centers.size(); ++a)
    for (std::size_t b = a + 1; b < centers.size(); ++b, ++pairs)
      sum += std::sqrt(squared_distance(centers[a].span(), centers[b].span()));
  rep.mean_inter_center_distance = sum / static_cast<double>(pairs);
  return rep;
}

inline GeometryReport class_geometry(const ModelParams& params, const Dataset& ds, Split split) {
  std::map<int, Matrix> by_class;
  for (int c : ds.classes(split)) by_class[c] = embed_only(params, ds.gather(ds.samples_of(c)));
  return geometry_of(by_class);
}

// ---------------------------------------------------------------------------
// CSV output

inline void write_spectrum_csv(const SpectrumReport& rep, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  out << "rank_index,singular_value,log10_value\n";
  for (std::size_t i = 0; i < rep.singular_values.size(); ++i)
    out << (i + 1) << ',' << format_double(rep.singular_values[i]) << ',' << format_double(rep.log10_values[i]) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// One row per class, then a `mean` summary row. For class rows the last column
/// is blank; for the summary row it holds the mean pairwise center distance.
inline void write_geometry_csv(const GeometryReport& rep, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  out << "class_id,n_samples,intra_variance,inter_center_distance\n";
  std::size_t total = 0;
  for (const auto& [c, v] : rep.per_class_variance) {
    const std::size_t n = rep.per_class_count.at(c);
    total += n;
    out << c << ',' << n << ',' << format_double(v) << ",\n";
  }
  out << "mean," << total << ',' << format_double(rep.mean_intra_variance) << ','
      << format_double(rep.mean_inter_center_distance) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace protokd
