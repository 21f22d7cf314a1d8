#pragma once

// Synthetic few-shot datasets whose geometry makes over-discrimination
// observable.
//
// A random orthonormal basis of the ambient space is split into
//   signal  (signal_dim)  : class means of every split live here; val/novel
//                           means are shrunk by novel_signal_scale,
//   shared  (shared_dim)  : base means have a modest component here but base
//                           samples also carry large class-independent
//                           nuisance along it; val/novel means lean on it
//                           heavily and carry no nuisance,
//   rest                  : isotropic noise only.
// Fitting base classes ever harder teaches the extractor to suppress the
// shared directions, which is where novel classes keep most of their
// separation.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "protokd/episodes.hpp"
#include "protokd/io.hpp"
#include "protokd/linalg.hpp"
#include "protokd/rng.hpp"

namespace protokd {

struct GenSpec {
  int n_base = 64;
  int n_val = 16;
  int n_novel = 20;
  int samples_per_class = 100;
  int ambient_dim = 32;
  int signal_dim = 8;
  int shared_dim = 4;
  double noise_sigma = 0.5;
  std::uint64_t seed = 0;

  // Generator shape knobs.
  double class_scale = 1.0;        // std of class-mean coordinates in the signal subspace
  double novel_shared_scale = 2.0; // std of val/novel class-mean coordinates in the shared subspace
  double base_shared_scale = 1.0;  // std of base class-mean coordinates in the shared subspace
  double nuisance_sigma = 1.5;     // per-sample base-class std along each shared direction
  double novel_signal_scale = 0.3; // multiplier on class_scale for val/novel classes

  void validate() const {
    auto req = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(std::string("GenSpec: ") + what);
    };
    req(n_base >= 2, "n_base must be >= 2");
    req(n_val >= 0 && n_novel >= 0, "class counts must be non-negative");
    req(samples_per_class >= 2, "samples_per_class must be >= 2");
    req(ambient_dim >= 1, "ambient_dim must be positive");
    req(signal_dim >= 1 && shared_dim >= 0, "signal_dim must be positive and shared_dim non-negative");
    req(signal_dim + shared_dim <= ambient_dim, "signal_dim + shared_dim exceeds ambient_dim");
    req(noise_sigma >= 0.0 && std::isfinite(noise_sigma), "noise_sigma must be finite and non-negative");
    req(class_scale > 0.0 && novel_signal_scale >= 0.0 && novel_shared_scale >= 0.0 && base_shared_scale >= 0.0 && nuisance_sigma >= 0.0,
        "scales must be non-negative");
  }
};

struct GenMetadata {
  GenSpec spec;
  Matrix basis;  // ambient x ambient, columns orthonormal
  std::map<int, Vector> class_means;
  /// Fraction of each class's (centered) mean energy along the shared subspace.
  std::map<int, double> shared_fraction;
};

struct Generated {
  Dataset dataset;
  GenMetadata meta;
};

namespace detail {

/// Gram-Schmidt (twice) on a Gaussian matrix: columns of the result are orthonormal.
inline Matrix random_orthonormal(std::size_t n, Rng& rng) {
  std::vector<std::vector<double>> cols(n, std::vector<double>(n));
  for (auto& c : cols)
    for (double& v : c) v = rng.normal();
  for (std::size_t j = 0; j < n; ++j) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t i = 0; i < j; ++i) axpy(-dot(cols[i], cols[j]), cols[i], cols[j]);
    const double norm = std::sqrt(squared_norm(cols[j]));
    for (double& v : cols[j]) v /= norm;
  }
  Matrix q(n, n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < n; ++i) q(i, j) = cols[j][i];
  return q;
}

}  // namespace detail

/// Class ids are assigned base first (0..n_base-1), then val, then novel.
inline Generated generate(const GenSpec& spec) {
  spec.validate();
  const auto dim = static_cast<std::size_t>(spec.ambient_dim);
  const auto sig = static_cast<std::size_t>(spec.signal_dim);
  const auto sh = static_cast<std::size_t>(spec.shared_dim);
  const Rng root(spec.seed);
  Rng basis_rng = root.split("basis");
  Rng mean_rng = root.split("means");
  Rng sample_rng = root.split("samples");

  GenMetadata meta;
  meta.spec = spec;
  meta.basis = detail::random_orthonormal(dim, basis_rng);

  auto along = [&](std::size_t col, double coef, std::span<double> dst) {
    for (std::size_t r = 0; r < dim; ++r) dst[r] += coef * meta.basis(r, col);
  };

  const int n_total = spec.n_base + spec.n_val + spec.n_novel;
  std::map<int, Split> splits;
  for (int c = 0; c < n_total; ++c) {
    const bool base = c < spec.n_base;
    splits[c] = base ? Split::base : (c < spec.n_base + spec.n_val ? Split::val : Split::novel);
    Vector mean(dim);
    double shared_energy = 0.0;
    double total_energy = 0.0;
    for (std::size_t j = 0; j < sig; ++j) {
      const double a = (base ? 1.0 : spec.novel_signal_scale) * spec.class_scale * mean_rng.normal();
      along(j, a, mean.span());
      total_energy += a * a;
    }
    const double shared_scale = base ? spec.base_shared_scale : spec.novel_shared_scale;
    for (std::size_t j = 0; j < sh; ++j) {
      const double b = shared_scale * mean_rng.normal();
      along(sig + j, b, mean.span());
      shared_energy += b * b;
      total_energy += b * b;
    }
    meta.class_means[c] = mean;
    meta.shared_fraction[c] = total_energy > 0.0 ? shared_energy / total_energy : 0.0;
  }

  const auto per_class = static_cast<std::size_t>(spec.samples_per_class);
  Matrix features(static_cast<std::size_t>(n_total) * per_class, dim);
  std::vector<int> labels;
  labels.reserve(features.rows());
  std::size_t row = 0;
  for (int c = 0; c < n_total; ++c) {
    const bool base = c < spec.n_base;
    for (std::size_t s = 0; s < per_class; ++s, ++row) {
      auto x = features.row(row);
      const auto& mean = meta.class_means[c];
      std::copy(mean.begin(), mean.end(), x.begin());
      if (base)
        for (std::size_t j = 0; j < sh; ++j) along(sig + j, spec.nuisance_sigma * sample_rng.normal(), x);
      for (std::size_t r = 0; r < dim; ++r) x[r] += spec.noise_sigma * sample_rng.normal();
      labels.push_back(c);
    }
  }
  return {Dataset(std::move(features), std::move(labels), std::move(splits)), std::move(meta)};
}

/// Sidecar `key = value` file describing how a dataset was generated.
inline void write_metadata(const GenMetadata& meta, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  const auto& s = meta.spec;
  out << "# synthetic few-shot dataset\n";
  out << "n_base = " << s.n_base << '\n'
      << "n_val = " << s.n_val << '\n'
      << "n_novel = " << s.n_novel << '\n'
      << "samples_per_class = " << s.samples_per_class << '\n'
      << "ambient_dim = " << s.ambient_dim << '\n'
      << "signal_dim = " << s.signal_dim << '\n'
      << "shared_dim = " << s.shared_dim << '\n'
      << "noise_sigma = " << format_double(s.noise_sigma) << '\n'
      << "seed = " << s.seed << '\n'
      << "class_scale = " << format_double(s.class_scale) << '\n'
      << "novel_shared_scale = " << format_double(s.novel_shared_scale) << '\n'
      << "base_shared_scale = " << format_double(s.base_shared_scale) << '\n'
      << "nuisance_sigma = " << format_double(s.nuisance_sigma) << '\n'
      << "novel_signal_scale = " << format_double(s.novel_signal_scale) << '\n';
  for (const auto& [c, f] : meta.shared_fraction) out << "shared_fraction." << c << " = " << format_double(f) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace protokd
