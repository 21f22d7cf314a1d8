#pragma once

// Student/teacher network: an MLP feature extractor (affine + ReLU per layer)
// followed by a linear classification head. Forward passes record a trace
// that the hand-written backward pass consumes.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "protokd/io.hpp"
#include "protokd/linalg.hpp"
#include "protokd/rng.hpp"

namespace protokd {

enum class Activation { relu };

struct LayerParams {
  Matrix weight;  // out_dim x in_dim
  Vector bias;    // out_dim

  LayerParams() = default;
  LayerParams(std::size_t out_dim, std::size_t in_dim) : weight(out_dim, in_dim), bias(out_dim) {}
  LayerParams(Matrix w, Vector b) : weight(std::move(w)), bias(std::move(b)) {
    detail::require(weight.rows() == bias.dim(), "LayerParams: bias length != weight rows");
  }

  [[nodiscard]] std::size_t in_dim() const noexcept { return weight.cols(); }
  [[nodiscard]] std::size_t out_dim() const noexcept { return weight.rows(); }

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct ModelParams {
  std::vector<LayerParams> extractor;
  LayerParams head;
  Activation activation = Activation::relu;

  [[nodiscard]] std::size_t input_dim() const { return extractor.front().in_dim(); }
  [[nodiscard]] std::size_t embed_dim() const { return extractor.back().out_dim(); }
  [[nodiscard]] std::size_t n_classes() const { return head.out_dim(); }

  /// input, hidden..., embedding
  [[nodiscard]] std::vector<std::size_t> layer_dims() const {
    std::vector<std::size_t> dims{input_dim()};
    for (const auto& l : extractor) dims.push_back(l.out_dim());
    return dims;
  }

  void validate() const {
    detail::require(!extractor.empty(), "ModelParams: no extractor layers");
    for (std::size_t l = 0; l < extractor.size(); ++l) {
      const auto& layer = extractor[l];
      detail::require(layer.weight.rows() == layer.bias.dim(), "ModelParams: bias/weight mismatch");
      detail::require(layer.in_dim() > 0 && layer.out_dim() > 0, "ModelParams: empty layer");
      if (l > 0)
        detail::require(layer.in_dim() == extractor[l - 1].out_dim(), "ModelParams: layer dims do not chain");
    }
    detail::require(head.in_dim() == embed_dim(), "ModelParams: head in_dim != embedding dim");
    detail::require(head.weight.rows() == head.bias.dim(), "ModelParams: head bias/weight mismatch");
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Gradient with the same layout as ModelParams.
struct ParamGrads {
  std::vector<LayerParams> extractor;
  LayerParams head;

  static ParamGrads zeros_like(const ModelParams& p) {
    ParamGrads g;
    for (const auto& l : p.extractor) g.extractor.emplace_back(l.out_dim(), l.in_dim());
    g.head = LayerParams(p.head.out_dim(), p.head.in_dim());
    return g;
  }

  /// this += alpha * other
  void add_scaled(double alpha, const ParamGrads& other) {
    detail::require(extractor.size() == other.extractor.size(), "ParamGrads: layer count mismatch");
    for (std::size_t l = 0; l < extractor.size(); ++l) {
      axpy(alpha, other.extractor[l].weight.span(), extractor[l].weight.span());
      axpy(alpha, other.extractor[l].bias.span(), extractor[l].bias.span());
    }
    axpy(alpha, other.head.weight.span(), head.weight.span());
    axpy(alpha, other.head.bias.span(), head.bias.span());
  }

  friend bool operator==(const ParamGrads&, const ParamGrads&) = default;
};

/// Visits every parameter tensor of `p` in canonical order
/// (layer0.weight, layer0.bias, ..., head.weight, head.bias).
template <class Params, class Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  for (std::size_t l = 0; l < p.extractor.size(); ++l) {
    fn("layer" + std::to_string(l) + ".weight", p.extractor[l].weight.span());
    fn("layer" + std::to_string(l) + ".bias", p.extractor[l].bias.span());
  }
  fn(std::string("head.weight"), p.head.weight.span());
  fn(std::string("head.bias"), p.head.bias.span());
}

/// Hash of shapes and parameter bit patterns. Used to reject traces that were
/// produced by different (or since-mutated) parameters.
inline std::uint64_t fingerprint(const ModelParams& p) {
  std::uint64_t h = 0x84222325CBF29CE4ULL;
  auto feed = [&h](std::uint64_t v) { h = mix64(h ^ v) + 0x9E3779B97F4A7C15ULL; };
  for (const auto& l : p.extractor) {
    feed(l.out_dim());
    feed(l.in_dim());
  }
  for_each_tensor(p, [&](const std::string&, std::span<const double> t) {
    for (double x : t) feed(std::bit_cast<std::uint64_t>(x));
  });
  return h;
}

/// Intermediates of one batched forward pass through the extractor.
struct ForwardTrace {
  std::vector<Matrix> inputs;   // inputs[l]: batch x in_dim(l)
  std::vector<Matrix> preacts;  // preacts[l]: batch x out_dim(l)
  Matrix output;                // batch x embed_dim
  std::uint64_t params_fingerprint = 0;

  [[nodiscard]] std::size_t batch() const noexcept { return output.rows(); }
};

namespace detail {

/// X * W^T + b, one row per sample.
inline Matrix affine(const Matrix& x, const LayerParams& layer) {
  Matrix z = matmul_nt(x, layer.weight);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto zi = z.row(i);
    for (std::size_t o = 0; o < zi.size(); ++o) zi[o] += layer.bias[o];
  }
  return z;
}

}  // namespace detail

/// Embeds every row of `x`.
inline ForwardTrace embed_batch(const ModelParams& params, const Matrix& x) {
  detail::require(!params.extractor.empty(), "embed: model has no layers");
  detail::require(x.cols() == params.input_dim(), "embed: input dim != first layer in_dim");
  ForwardTrace trace;
  trace.params_fingerprint = fingerprint(params);
  Matrix h = x;
  for (const auto& layer : params.extractor) {
    Matrix z = detail::affine(h, layer);
    Matrix a = z;
    for (double& v : a.span()) v = v > 0.0 ? v : 0.0;
    trace.inputs.push_back(std::move(h));
    trace.preacts.push_back(std::move(z));
    h = std::move(a);
  }
  trace.output = std::move(h);
  return trace;
}

inline std::pair<Vector, ForwardTrace> embed(const ModelParams& params, const Vector& x) {
  detail::require(!params.extractor.empty() && x.dim() == params.input_dim(),
                  "embed: input dim != first layer in_dim");
  ForwardTrace trace = embed_batch(params, Matrix(1, x.dim(), x.values()));
  Vector e = trace.output.row_vector(0);
  return {std::move(e), std::move(trace)};
}

/// Embeddings only; skips the fingerprint and keeps no intermediates.
inline Matrix embed_only(const ModelParams& params, const Matrix& x) {
  detail::require(x.cols() == params.input_dim(), "embed: input dim != first layer in_dim");
  Matrix h = x;
  for (const auto& layer : params.extractor) {
    h = detail::affine(h, layer);
    for (double& v : h.span()) v = v > 0.0 ? v : 0.0;
  }
  return h;
}

/// W_head * e + b_head
inline Vector classify_logits(const ModelParams& params, const Vector& embedding) {
  detail::require(embedding.dim() == params.head.in_dim(), "classify_logits: embedding dim != head in_dim");
  Vector out(params.head.out_dim());
  for (std::size_t o = 0; o < out.dim(); ++o)
    out[o] = params.head.bias[o] + dot(params.head.weight.row(o), embedding.span());
  return out;
}

inline Matrix classify_logits_batch(const ModelParams& params, const Matrix& embeddings) {
  detail::require(embeddings.cols() == params.head.in_dim(), "classify_logits: embedding dim != head in_dim");
  return detail::affine(embeddings, params.head);
}

/// Gradient of sum_i <grad_embed[i], embedding[i]> w.r.t. every extractor
/// parameter. Head gradients are zero. ReLU'(0) is taken as 0.
inline ParamGrads backprop_embedding_grad(const ModelParams& params, const ForwardTrace& trace,
                                          const Matrix& grad_embed) {
  if (trace.params_fingerprint != fingerprint(params) || trace.inputs.size() != params.extractor.size())
    throw std::invalid_argument("backprop: trace was not produced by these parameters");
  detail::require(grad_embed.rows() == trace.batch() && grad_embed.cols() == params.embed_dim(),
                  "backprop: upstream gradient shape != embedding batch shape");

  ParamGrads grads = ParamGrads::zeros_like(params);
  Matrix g = grad_embed;
  for (std::size_t l = params.extractor.size(); l-- > 0;) {
    const Matrix& z = trace.preacts[l];
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!(z.span()[i] > 0.0)) g.span()[i] = 0.0;
    grads.extractor[l].weight = matmul_tn(g, trace.inputs[l]);
    auto& db = grads.extractor[l].bias;
    for (std::size_t i = 0; i < g.rows(); ++i) axpy(1.0, g.row(i), db.span());
    if (l > 0) g = matmul(g, params.extractor[l].weight);
  }
  return grads;
}

inline ParamGrads backprop_embedding_grad(const ModelParams& params, const ForwardTrace& trace,
                                          const Vector& grad_embed) {
  detail::require(trace.batch() == 1, "backprop: vector gradient needs a single-sample trace");
  return backprop_embedding_grad(params, trace, Matrix(1, grad_embed.dim(), grad_embed.values()));
}

/// Head backward for a batch: fills `grads.head` with the gradient of
/// sum_i <grad_logits[i], logits[i]> and returns d/d(embeddings).
inline Matrix backprop_head(const ModelParams& params, const Matrix& embeddings, const Matrix& grad_logits,
                            ParamGrads& grads) {
  detail::require(grad_logits.rows() == embeddings.rows() && grad_logits.cols() == params.n_classes(),
                  "backprop_head: gradient shape mismatch");
  grads.head.weight = matmul_tn(grad_logits, embeddings);
  grads.head.bias = Vector(params.n_classes());
  for (std::size_t i = 0; i < grad_logits.rows(); ++i) axpy(1.0, grad_logits.row(i), grads.head.bias.span());
  return matmul(grad_logits, params.head.weight);
}

// ---------------------------------------------------------------------------
// Teacher snapshots

class TeacherSnapshot {
 public:
  TeacherSnapshot(ModelParams params, double val_accuracy, int epoch_taken)
      : params_(std::move(params)), val_accuracy_(val_accuracy), epoch_taken_(epoch_taken) {}

  [[nodiscard]] const ModelParams& params() const noexcept { return params_; }
  [[nodiscard]] double val_accuracy() const noexcept { return val_accuracy_; }
  [[nodiscard]] int epoch_taken() const noexcept { return epoch_taken_; }

  friend bool operator==(const TeacherSnapshot&, const TeacherSnapshot&) = default;

 private:
  ModelParams params_;
  double val_accuracy_;
  int epoch_taken_;
};

inline TeacherSnapshot snapshot(const ModelParams& params, double val_acc, int epoch) {
  detail::require(val_acc >= 0.0 && val_acc <= 1.0, "snapshot: val_acc outside [0, 1]");
  detail::require(epoch >= 0, "snapshot: negative epoch");
  return TeacherSnapshot(params, val_acc, epoch);
}

// ---------------------------------------------------------------------------
// Initialization

/// He-normal weights (std sqrt(2 / fan_in)), zero biases.
/// layer_dims = {input, hidden..., embedding}.
inline ModelParams init_params(const std::vector<std::size_t>& layer_dims, std::size_t n_base_classes,
                               std::uint64_t seed) {
  detail::require(layer_dims.size() >= 2, "init_params: need at least input and embedding dims");
  for (std::size_t d : layer_dims) detail::require(d > 0, "init_params: zero layer dim");
  detail::require(n_base_classes >= 2, "init_params: need at least 2 classes");

  Rng rng(seed);
  auto he_layer = [&rng](std::size_t out, std::size_t in) {
    LayerParams layer(out, in);
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    for (double& w : layer.weight.span()) w = stddev * rng.normal();
    return layer;
  };
  ModelParams p;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) p.extractor.push_back(he_layer(layer_dims[l + 1], layer_dims[l]));
  p.head = he_layer(n_base_classes, layer_dims.back());
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint text format
//
//   MDCKPT v1
//   dims <input> <hidden>... <embedding> classes <n>
//   <name> <shape> <v0> <v1> ...        one line per tensor, %.17g values
//
// Shapes are "RxC" for weights and "N" for biases.

inline void write_checkpoint(std::ostream& out, const ModelParams& params) {
  params.validate();
  out << "MDCKPT v1\n";
  out << "dims";
  for (std::size_t d : params.layer_dims()) out << ' ' << d;
  out << " classes " << params.n_classes() << '\n';
  auto line = [&out](const std::string& name, const std::string& shape, std::span<const double> values) {
    out << name << ' ' << shape;
    for (double v : values) out << ' ' << format_double(v);
    out << '\n';
  };
  for (std::size_t l = 0; l < params.extractor.size(); ++l) {
    const auto& layer = params.extractor[l];
    line("layer" + std::to_string(l) + ".weight",
         std::to_string(layer.weight.rows()) + "x" + std::to_string(layer.weight.cols()), layer.weight.span());
    line("layer" + std::to_string(l) + ".bias", std::to_string(layer.bias.dim()), layer.bias.span());
  }
  line("head.weight", std::to_string(params.head.weight.rows()) + "x" + std::to_string(params.head.weight.cols()),
       params.head.weight.span());
  line("head.bias", std::to_string(params.head.bias.dim()), params.head.bias.span());
}

inline ModelParams read_checkpoint(std::istream& in, const std::string& source = "<checkpoint>") {
  std::string text;
  std::size_t lineno = 0;
  auto next_line = [&]() -> std::string_view {
    if (!std::getline(in, text)) throw ParseError(source, lineno + 1, "unexpected end of file");
    ++lineno;
    return text;
  };

  if (std::string_view header = next_line(); split_whitespace(header) != std::vector<std::string_view>{"MDCKPT", "v1"})
    throw ParseError(source, lineno, "expected header 'MDCKPT v1'");

  auto dims_tokens = split_whitespace(next_line());
  if (dims_tokens.size() < 5 || dims_tokens.front() != "dims" || dims_tokens[dims_tokens.size() - 2] != "classes")
    throw ParseError(source, lineno, "expected 'dims <d0> <d1>... classes <n>'");
  std::vector<std::size_t> dims;
  for (std::size_t i = 1; i + 2 < dims_tokens.size(); ++i) {
    std::size_t d = 0;
    if (!parse_int(dims_tokens[i], d) || d == 0) throw ParseError(source, lineno, "bad layer dim");
    dims.push_back(d);
  }
  std::size_t n_classes = 0;
  if (!parse_int(dims_tokens.back(), n_classes) || n_classes == 0)
    throw ParseError(source, lineno, "bad class count");
  if (dims.size() < 2) throw ParseError(source, lineno, "need at least two layer dims");

  auto read_tensor = [&](const std::string& name, std::size_t rows, std::size_t cols, bool is_matrix,
                         std::span<double> dst) {
    auto tok = split_whitespace(next_line());
    if (tok.size() < 2 || tok[0] != name) throw ParseError(source, lineno, "expected tensor '" + name + "'");
    const std::string shape = is_matrix ? std::to_string(rows) + "x" + std::to_string(cols) : std::to_string(rows);
    if (tok[1] != shape) throw ParseError(source, lineno, "tensor '" + name + "' has shape " + std::string(tok[1]) + ", expected " + shape);
    if (tok.size() - 2 != dst.size())
      throw ParseError(source, lineno, "tensor '" + name + "' has " + std::to_string(tok.size() - 2) + " values, expected " + std::to_string(dst.size()));
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (!parse_double(tok[i + 2], dst[i]) || !std::isfinite(dst[i]))
        throw ParseError(source, lineno, "bad value in tensor '" + name + "'");
    }
  };

  ModelParams p;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    LayerParams layer(dims[l + 1], dims[l]);
    read_tensor("layer" + std::to_string(l) + ".weight", dims[l + 1], dims[l], true, layer.weight.span());
    read_tensor("layer" + std::to_string(l) + ".bias", dims[l + 1], 1, false, layer.bias.span());
    p.extractor.push_back(std::move(layer));
  }
  p.head = LayerParams(n_classes, dims.back());
  read_tensor("head.weight", n_classes, dims.back(), true, p.head.weight.span());
  read_tensor("head.bias", n_classes, 1, false, p.head.bias.span());
  return p;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  auto out = open_for_write(path);
  write_checkpoint(out, params);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  auto in = open_for_read(path);
  return read_checkpoint(in, path.string());
}

}  // namespace protokd
