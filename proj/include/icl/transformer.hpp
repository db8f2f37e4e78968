#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "icl/data_gen.hpp"

namespace icl {

enum class Activation { gelu, relu };

/// Pre-layer-norm decoder-only transformer over continuous tokens.
///
/// Block l: h += Attn(LN1(h)); h += MLP(LN2(h)); the output head is
/// Linear(LN_f(h)) back to token width. Attention heads are concatenated
/// straight into the residual stream unless `attn_output_proj` is set; with the
/// full-scale dimensions this accounting gives 2,657,801 parameters.
struct ArchConfig {
  int layers = 2;
  int heads = 4;
  int d_embed = 512;
  int d_mlp = 512;
  int context_tokens = 32;  ///< 2K
  int token_dim = 9;        ///< D + 1
  Activation activation = Activation::gelu;
  bool attn_output_proj = false;

  void validate() const;
  /// Stable 64-bit digest of every field; stored in checkpoint headers.
  std::uint64_t hash() const;
  int head_dim() const { return d_embed / heads; }
};

enum class SegmentRole { weight, bias, embedding, ln_gain, ln_offset };

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;  ///< 1 for vectors
  SegmentRole role = SegmentRole::weight;
  std::size_t fan_in = 0;

  std::size_t size() const { return rows * cols; }
};

/// Order and shape of every parameter block inside the flat vector.
/// Matrices are row-major, weights stored (out x in).
class ParameterLayout {
 public:
  explicit ParameterLayout(const ArchConfig& cfg);

  std::size_t size() const { return size_; }
  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& at(const std::string& name) const;

 private:
  std::vector<Segment> segments_;
  std::size_t size_ = 0;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights, biases and embeddings;
/// layer-norm gains 1 and offsets 0. Each segment draws from its own sub-stream.
std::vector<double> init_params(const ArchConfig& cfg, std::uint64_t seed);

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A batch of tokenized sequences stacked row-wise: (B * 2K) x (D + 1), plus B x K labels.
template <typename Scalar>
struct TokenBatch {
  int batch = 0;
  int tokens = 0;
  RowMatrix<Scalar> inputs;
  RowMatrix<Scalar> labels;
};

template <typename Scalar>
TokenBatch<Scalar> make_batch(const Dataset& data);

template <typename Scalar>
class Transformer {
 public:
  using Matrix = RowMatrix<Scalar>;

  explicit Transformer(ArchConfig cfg);

  const ArchConfig& config() const { return cfg_; }
  const ParameterLayout& layout() const { return layout_; }

  /// Raw output tokens, (B * 2K) x token_dim.
  Matrix forward_tokens(std::span<const Scalar> params, const TokenBatch<Scalar>& batch) const;
  /// B x K predictions read from the first component of every x-token.
  Matrix forward(std::span<const Scalar> params, const TokenBatch<Scalar>& batch) const;
  /// Mean over sequences and positions of the squared prediction error.
  Scalar loss(std::span<const Scalar> params, const TokenBatch<Scalar>& batch) const;
  /// Loss plus its exact gradient written into `grad` (overwritten).
  /// Throws NumericalFailure when the loss is not finite.
  Scalar loss_and_grad(std::span<const Scalar> params, const TokenBatch<Scalar>& batch,
                       std::span<Scalar> grad) const;

 private:
  struct Cache;
  struct LayerOffsets {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc_w, fc_b, proj_w,
        proj_b;
  };

  void check(std::span<const Scalar> params, const TokenBatch<Scalar>& batch) const;
  Matrix run_forward(std::span<const Scalar> params, const TokenBatch<Scalar>& batch,
                     Cache* cache) const;

  ArchConfig cfg_;
  ParameterLayout layout_;
  std::size_t embed_w_, embed_b_, pos_, lnf_g_, lnf_b_, unembed_w_, unembed_b_;
  std::vector<LayerOffsets> blocks_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

}  // namespace icl
