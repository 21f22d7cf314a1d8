#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "protokd/datagen.hpp"
#include "protokd/diagnostics.hpp"
#include "protokd/training.hpp"

using namespace protokd;
namespace fs = std::filesystem;

namespace {

// One affine layer whose ReLU never fires: embeddings are W x + b exactly.
ModelParams linear_extractor(Matrix w, double offset, std::size_t classes = 2) {
  ModelParams p;
  const std::size_t out = w.rows();
  p.extractor.emplace_back(std::move(w), Vector(out, offset));
  p.head = LayerParams(classes, out);
  return p;
}

Dataset dataset_from(Matrix x, int n_classes) {
  std::vector<int> ids;
  std::map<int, Split> splits;
  for (std::size_t r = 0; r < x.rows(); ++r) ids.push_back(static_cast<int>(r % static_cast<std::size_t>(n_classes)));
  for (int c = 0; c < n_classes; ++c) splits[c] = Split::base;
  return Dataset(std::move(x), std::move(ids), std::move(splits));
}

Matrix random_rotation(Rng& rng, std::size_t n) { return detail::random_orthonormal(n, rng); }

}  // namespace

TEST(EffectiveRank, CountsStrictlyAboveThreshold) {
  EXPECT_EQ(effective_rank({10.0, 5.0, 0.02, 0.001}, 1e-3), 3);
  EXPECT_EQ(effective_rank({10.0, 0.01}, 1e-3), 1);  // 0.01 == cut, not above
  EXPECT_EQ(effective_rank({}, 1e-3), 0);
  EXPECT_EQ(effective_rank({0.0, 0.0}, 1e-3), 0);
}

TEST(Spectrum, TwoDimensionalSubspace) {
  Rng rng(81);
  const Matrix a = oracle::random_matrix(rng, 500, 2);
  const Matrix b = oracle::random_matrix(rng, 2, 8);
  const auto rep = spectrum_of(matmul(a, b));
  EXPECT_EQ(rep.effective_rank, 2);
  EXPECT_EQ(rep.singular_values.size(), 8u);
  EXPECT_EQ(rep.n_samples, 500u);
  EXPECT_EQ(rep.embed_dim, 8u);

  // same thing through a model: inputs live in a plane of R^8
  const auto ds = dataset_from(matmul(a, b), 4);
  const auto model_rep = embedding_spectrum(linear_extractor(Matrix::identity(8), 100.0), ds, Split::base);
  EXPECT_EQ(model_rep.effective_rank, 2);
}

TEST(Spectrum, IdentityExtractorOnIsotropicGaussian) {
  Rng rng(82);
  const auto ds = dataset_from(oracle::random_matrix(rng, 1000, 8), 5);
  const auto rep = embedding_spectrum(linear_extractor(Matrix::identity(8), 100.0), ds, Split::base);
  EXPECT_EQ(rep.effective_rank, 8);
}

TEST(Spectrum, MatchesEigenSingularValues) {
  Rng rng(83);
  for (int t = 0; t < 20; ++t) {
    const Matrix m = oracle::random_matrix(rng, 30 + rng.below(40), 2 + rng.below(12));
    const auto rep = spectrum_of(m, 1e-3, false);
    const auto ref = oracle::eigen_singular_values(m);
    ASSERT_EQ(rep.singular_values.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(rep.singular_values[i], ref[i], 1e-8 * ref[0]);
    for (std::size_t i = 0; i < ref.size(); ++i)
      EXPECT_DOUBLE_EQ(rep.log10_values[i], std::log10(rep.singular_values[i]));
  }
}

TEST(Spectrum, OrderingAndRotationInvariant) {
  Rng rng(84);
  const Matrix m = oracle::random_matrix(rng, 200, 6);
  const auto base = spectrum_of(m);
  Matrix reversed(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) reversed(r, c) = m(m.rows() - 1 - r, c);
  const auto rot = random_rotation(rng, 6);
  const auto a = spectrum_of(reversed);
  const auto b = spectrum_of(matmul(m, rot));
  for (std::size_t i = 0; i < base.singular_values.size(); ++i) {
    EXPECT_NEAR(a.singular_values[i], base.singular_values[i], 1e-8 * base.singular_values[0]);
    EXPECT_NEAR(b.singular_values[i], base.singular_values[i], 1e-8 * base.singular_values[0]);
  }
}

TEST(Spectrum, RankMonotoneInThreshold) {
  Rng rng(85);
  Matrix m = oracle::random_matrix(rng, 100, 10);
  // spread the column scales over several decades
  for (std::size_t c = 0; c < 10; ++c)
    for (std::size_t r = 0; r < 100; ++r) m(r, c) *= std::pow(10.0, -0.5 * static_cast<double>(c));
  int prev = 11;
  for (double th : {1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 0.5, 0.9}) {
    const int r = spectrum_of(m, th).effective_rank;
    EXPECT_LE(r, prev);
    prev = r;
  }
}

TEST(Spectrum, CenteringToggle) {
  // rows = constant offset + one direction of variation
  Matrix m(50, 3);
  for (std::size_t r = 0; r < 50; ++r) {
    m(r, 0) = 5.0;
    m(r, 1) = static_cast<double>(r);
    m(r, 2) = 5.0;
  }
  EXPECT_EQ(spectrum_of(m, 1e-3, true).effective_rank, 1);
  EXPECT_EQ(spectrum_of(m, 1e-3, false).effective_rank, 2);
}

TEST(Spectrum, ErrorsAndSubsampling) {
  EXPECT_THROW(spectrum_of(Matrix(1, 3)), std::invalid_argument);
  EXPECT_THROW(spectrum_of(Matrix(5, 3), 0.0), std::invalid_argument);
  EXPECT_THROW(spectrum_of(Matrix(5, 3), 1.0), std::invalid_argument);
  Rng rng(86);
  const auto ds = dataset_from(oracle::random_matrix(rng, 300, 4), 3);
  SpectrumSettings cfg;
  cfg.max_samples = 100;
  const auto model = linear_extractor(Matrix::identity(4), 100.0);
  const auto a = embedding_spectrum(model, ds, Split::base, cfg);
  EXPECT_EQ(a.n_samples, 100u);
  EXPECT_EQ(a.singular_values, embedding_spectrum(model, ds, Split::base, cfg).singular_values);
  cfg.max_samples = 1;
  EXPECT_THROW(embedding_spectrum(model, ds, Split::base, cfg), std::invalid_argument);
}

// SC-only meta-training on a 16-base-class synthetic set: the collapsed rank
// should land at or just above the number of base classes.
TEST(Spectrum, CollapseSignatureSixteenBaseClasses) {
  GenSpec g;
  g.n_base = 16;
  const Dataset ds = generate(g).dataset;
  const auto pre = pretrain(ds, PretrainConfig{});
  TrainConfig tc;
  tc.lambda1 = 0.0;
  tc.lambda2 = 0.0;
  tc.lr = 0.02;
  tc.iters_per_epoch = 100;
  const auto run = metatrain(pre.params, ds, tc);
  const auto rep = embedding_spectrum(run.final_params, ds, Split::base);
  EXPECT_LE(rep.effective_rank, 16 + 2);
}

TEST(Geometry, IdenticalEmbeddingsHaveZeroVariance) {
  std::map<int, Matrix> by_class;
  by_class[0] = Matrix(4, 2, std::vector<double>{1, 2, 1, 2, 1, 2, 1, 2});
  by_class[1] = Matrix(2, 2, std::vector<double>{0, 0, 2, 0});
  const auto rep = geometry_of(by_class);
  EXPECT_EQ(rep.per_class_variance.at(0), 0.0);
  EXPECT_DOUBLE_EQ(rep.per_class_variance.at(1), 1.0);
}

TEST(Geometry, ThreeFourFive) {
  std::map<int, Matrix> by_class;
  by_class[0] = Matrix(3, 2, 0.0);
  by_class[1] = Matrix(3, 2, std::vector<double>{3, 4, 3, 4, 3, 4});
  const auto rep = geometry_of(by_class);
  EXPECT_DOUBLE_EQ(rep.mean_inter_center_distance, 5.0);
  EXPECT_EQ(rep.mean_intra_variance, 0.0);
}

TEST(Geometry, MatchesTwoPassOracle) {
  Rng rng(87);
  for (int t = 0; t < 20; ++t) {
    std::map<int, Matrix> by_class;
    const std::size_t k = 2 + rng.below(6), d = 1 + rng.below(6);
    for (std::size_t c = 0; c < k; ++c) by_class[static_cast<int>(c)] = oracle::random_matrix(rng, 2 + rng.below(20), d, 3.0);
    const auto rep = geometry_of(by_class);

    std::vector<std::vector<double>> means;
    double intra = 0.0;
    for (const auto& [c, m] : by_class) {
      std::vector<double> mu(d, 0.0);
      for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t j = 0; j < d; ++j) mu[j] += m(r, j) / static_cast<double>(m.rows());
      double v = 0.0;
      for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t j = 0; j < d; ++j) v += (m(r, j) - mu[j]) * (m(r, j) - mu[j]);
      v /= static_cast<double>(m.rows());
      EXPECT_NEAR(rep.per_class_variance.at(c), v, 1e-10);
      intra += v;
      means.push_back(mu);
    }
    double inter = 0.0;
    int pairs = 0;
    for (std::size_t a = 0; a < means.size(); ++a)
      for (std::size_t b = a + 1; b < means.size(); ++b, ++pairs) inter += oracle::big_distance(means[a], means[b]);
    EXPECT_NEAR(rep.mean_intra_variance, intra / static_cast<double>(k), 1e-10);
    EXPECT_NEAR(rep.mean_inter_center_distance, inter / pairs, 1e-10);
  }
}

TEST(Geometry, TranslationInvariant) {
  Rng rng(88);
  std::map<int, Matrix> by_class, moved;
  for (int c = 0; c < 4; ++c) by_class[c] = oracle::random_matrix(rng, 10, 3);
  const std::vector<double> shift{7.0, -3.0, 11.0};
  for (const auto& [c, m] : by_class) {
    Matrix s = m;
    for (std::size_t r = 0; r < s.rows(); ++r)
      for (std::size_t j = 0; j < 3; ++j) s(r, j) += shift[j];
    moved[c] = s;
  }
  const auto a = geometry_of(by_class), b = geometry_of(moved);
  EXPECT_NEAR(a.mean_intra_variance, b.mean_intra_variance, 1e-10);
  EXPECT_NEAR(a.mean_inter_center_distance, b.mean_inter_center_distance, 1e-10);
}

TEST(Geometry, UndersampledClassFlagged) {
  std::map<int, Matrix> by_class;
  by_class[3] = Matrix(1, 2, std::vector<double>{1, 1});
  by_class[5] = Matrix(2, 2, std::vector<double>{0, 0, 2, 0});
  const auto rep = geometry_of(by_class);
  EXPECT_EQ(rep.per_class_variance.at(3), 0.0);
  EXPECT_EQ(rep.undersampled_classes, std::vector<int>{3});
  std::map<int, Matrix> one;
  one[0] = Matrix(2, 2);
  EXPECT_THROW(geometry_of(one), std::invalid_argument);
}

TEST(Geometry, ThroughModel) {
  Rng rng(89);
  const Dataset ds = oracle::toy_dataset(rng, 3, 0, 0, 20, 4, 2.0);
  const auto model = linear_extractor(Matrix::identity(4), 100.0);
  const auto rep = class_geometry(model, ds, Split::base);
  // the extractor is a translation, so geometry equals raw-feature geometry
  std::map<int, Matrix> raw;
  for (int c : ds.classes(Split::base)) raw[c] = ds.gather(ds.samples_of(c));
  const auto ref = geometry_of(raw);
  EXPECT_NEAR(rep.mean_intra_variance, ref.mean_intra_variance, 1e-9);
  EXPECT_NEAR(rep.mean_inter_center_distance, ref.mean_inter_center_distance, 1e-9);
}

TEST(DiagnosticsCsv, Formats) {
  const fs::path dir = fs::temp_directory_path() / "protokd_diag_csv";
  fs::create_directories(dir);
  SpectrumReport s;
  s.singular_values = {4.0, 0.5};
  s.log10_values = {std::log10(4.0), std::log10(0.5)};
  write_spectrum_csv(s, dir / "spectrum.csv");
  std::ifstream in(dir / "spectrum.csv");
  std::string l1, l2;
  std::getline(in, l1);
  std::getline(in, l2);
  EXPECT_EQ(l1, "rank_index,singular_value,log10_value");
  EXPECT_EQ(l2.rfind("1,4,", 0), 0u);

  std::map<int, Matrix> by_class;
  by_class[0] = Matrix(2, 1, std::vector<double>{0, 2});
  by_class[1] = Matrix(2, 1, std::vector<double>{5, 5});
  write_geometry_csv(geometry_of(by_class), dir / "geometry.csv");
  std::ifstream g(dir / "geometry.csv");
  std::string line, text;
  while (std::getline(g, line)) text += line + "\n";
  EXPECT_EQ(text, "class_id,n_samples,intra_variance,inter_center_distance\n0,2,1,\n1,2,0,\nmean,4,0.5,4\n");
}
