#include "icl/transformer.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <sstream>

#include "icl/errors.hpp"
#include "icl/rng.hpp"

namespace icl {

void ArchConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1");
  };
  positive(layers, "layers");
  positive(heads, "heads");
  positive(d_embed, "d_embed");
  positive(d_mlp, "d_mlp");
  positive(context_tokens, "context_tokens");
  positive(token_dim, "token_dim");
  if (d_embed % heads != 0) {
    throw ConfigError("model.d_embed (" + std::to_string(d_embed) +
                      ") must be divisible by model.heads (" + std::to_string(heads) + ")");
  }
  if (context_tokens % 2 != 0) throw ConfigError("model.context_tokens must be even (2K)");
}

std::uint64_t ArchConfig::hash() const {
  std::ostringstream os;
  os << "arch/v1:" << layers << ':' << heads << ':' << d_embed << ':' << d_mlp << ':'
     << context_tokens << ':' << token_dim << ':'
     << (activation == Activation::gelu ? "gelu" : "relu") << ':' << attn_output_proj;
  return fnv1a64(os.str());
}

ParameterLayout::ParameterLayout(const ArchConfig& cfg) {
  cfg.validate();
  auto add = [this](std::string name, std::size_t rows, std::size_t cols, SegmentRole role,
                    std::size_t fan_in) {
    segments_.push_back({std::move(name), size_, rows, cols, role, fan_in});
    size_ += rows * cols;
  };
  const std::size_t d = cfg.d_embed;
  const std::size_t tok = cfg.token_dim;
  add("embed.weight", d, tok, SegmentRole::weight, tok);
  add("embed.bias", d, 1, SegmentRole::bias, tok);
  add("pos", cfg.context_tokens, d, SegmentRole::embedding, d);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    add(p + "ln1.gain", d, 1, SegmentRole::ln_gain, d);
    add(p + "ln1.offset", d, 1, SegmentRole::ln_offset, d);
    add(p + "attn.qkv.weight", 3 * d, d, SegmentRole::weight, d);
    add(p + "attn.qkv.bias", 3 * d, 1, SegmentRole::bias, d);
    if (cfg.attn_output_proj) {
      add(p + "attn.out.weight", d, d, SegmentRole::weight, d);
      add(p + "attn.out.bias", d, 1, SegmentRole::bias, d);
    }
    add(p + "ln2.gain", d, 1, SegmentRole::ln_gain, d);
    add(p + "ln2.offset", d, 1, SegmentRole::ln_offset, d);
    add(p + "mlp.fc.weight", cfg.d_mlp, d, SegmentRole::weight, d);
    add(p + "mlp.fc.bias", cfg.d_mlp, 1, SegmentRole::bias, d);
    add(p + "mlp.proj.weight", d, cfg.d_mlp, SegmentRole::weight, cfg.d_mlp);
    add(p + "mlp.proj.bias", d, 1, SegmentRole::bias, cfg.d_mlp);
  }
  add("ln_f.gain", d, 1, SegmentRole::ln_gain, d);
  add("ln_f.offset", d, 1, SegmentRole::ln_offset, d);
  add("unembed.weight", tok, d, SegmentRole::weight, d);
  add("unembed.bias", tok, 1, SegmentRole::bias, d);
}

const Segment& ParameterLayout::at(const std::string& name) const {
  for (const auto& s : segments_) {
    if (s.name == name) return s;
  }
  throw MalformedInput("no parameter segment named '" + name + "'");
}

std::vector<double> init_params(const ArchConfig& cfg, std::uint64_t seed) {
  const ParameterLayout layout(cfg);
  std::vector<double> params(layout.size());
  const Rng root = Rng(seed).derive("init");
  for (const auto& seg : layout.segments()) {
    auto* out = params.data() + seg.offset;
    switch (seg.role) {
      case SegmentRole::ln_gain:
        std::fill(out, out + seg.size(), 1.0);
        break;
      case SegmentRole::ln_offset:
        std::fill(out, out + seg.size(), 0.0);
        break;
      default: {
        Rng r = root.derive(seg.name);
        const double bound = 1.0 / std::sqrt(static_cast<double>(seg.fan_in));
        for (std::size_t i = 0; i < seg.size(); ++i) out[i] = bound * (2.0 * r.uniform() - 1.0);
      }
    }
  }
  return params;
}

template <typename Scalar>
TokenBatch<Scalar> make_batch(const Dataset& data) {
  if (data.empty()) throw MalformedInput("empty batch");
  const int K = data.front().K();
  const int D = data.front().D();
  TokenBatch<Scalar> b;
  b.batch = static_cast<int>(data.size());
  b.tokens = 2 * K;
  b.inputs = RowMatrix<Scalar>::Zero(b.batch * b.tokens, D + 1);
  b.labels.resize(b.batch, K);
  for (int i = 0; i < b.batch; ++i) {
    const auto& s = data[i];
    if (s.K() != K || s.D() != D) throw MalformedInput("batch sequences differ in shape");
    for (int k = 0; k < K; ++k) {
      const int row = i * b.tokens + 2 * k;
      for (int d = 0; d < D; ++d) b.inputs(row, 1 + d) = static_cast<Scalar>(s.xs(k, d));
      b.inputs(row + 1, 0) = static_cast<Scalar>(s.ys[k]);
      b.labels(i, k) = static_cast<Scalar>(s.ys[k]);
    }
  }
  return b;
}

template TokenBatch<float> make_batch<float>(const Dataset&);
template TokenBatch<double> make_batch<double>(const Dataset&);

namespace {

template <typename Scalar>
using ConstMap = Eigen::Map<const RowMatrix<Scalar>>;
template <typename Scalar>
using MutMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstRowVec = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;
template <typename Scalar>
using MutRowVec = Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;

constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
struct LayerNormCache {
  RowMatrix<Scalar> xhat;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd;
};

template <typename Scalar>
RowMatrix<Scalar> layer_norm(const RowMatrix<Scalar>& x, const Scalar* gain, const Scalar* offset,
                             LayerNormCache<Scalar>* cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  RowMatrix<Scalar> xhat(n, d);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar mean = x.row(i).mean();
    const Scalar var = (x.row(i).array() - mean).square().mean();
    rstd[i] = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
    xhat.row(i) = (x.row(i).array() - mean) * rstd[i];
  }
  RowMatrix<Scalar> y = xhat;
  const ConstRowVec<Scalar> g(gain, d);
  const ConstRowVec<Scalar> b(offset, d);
  y.array().rowwise() *= g.array();
  y.rowwise() += b;
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename Scalar>
RowMatrix<Scalar> layer_norm_backward(const RowMatrix<Scalar>& dy, const LayerNormCache<Scalar>& c,
                                      const Scalar* gain, Scalar* dgain, Scalar* doffset) {
  const auto d = dy.cols();
  const ConstRowVec<Scalar> g(gain, d);
  MutRowVec<Scalar>(dgain, d) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  MutRowVec<Scalar>(doffset, d) += dy.colwise().sum();
  RowMatrix<Scalar> dxhat = dy;
  dxhat.array().rowwise() *= g.array();
  RowMatrix<Scalar> dx(dy.rows(), d);
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const Scalar mean_dxhat = dxhat.row(i).mean();
    const Scalar mean_dxhat_xhat = dxhat.row(i).dot(c.xhat.row(i)) / Scalar(d);
    dx.row(i) = c.rstd[i] * (dxhat.row(i).array() - mean_dxhat -
                             c.xhat.row(i).array() * mean_dxhat_xhat);
  }
  return dx;
}

// y = x W^T + b with W stored (out x in).
template <typename Scalar>
RowMatrix<Scalar> linear(const RowMatrix<Scalar>& x, const Scalar* w, const Scalar* b,
                         Eigen::Index out) {
  const ConstMap<Scalar> W(w, out, x.cols());
  RowMatrix<Scalar> y(x.rows(), out);
  y.noalias() = x * W.transpose();
  y.rowwise() += ConstRowVec<Scalar>(b, out);
  return y;
}

template <typename Scalar>
RowMatrix<Scalar> linear_backward(const RowMatrix<Scalar>& dy, const RowMatrix<Scalar>& x,
                                  const Scalar* w, Scalar* dw, Scalar* db) {
  const auto out = dy.cols();
  const auto in = x.cols();
  const ConstMap<Scalar> W(w, out, in);
  MutMap<Scalar>(dw, out, in).noalias() += dy.transpose() * x;
  MutRowVec<Scalar>(db, out) += dy.colwise().sum();
  RowMatrix<Scalar> dx(dy.rows(), in);
  dx.noalias() = dy * W;
  return dx;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

template <typename Scalar>
using AlignedBuffer = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

template <typename Scalar>
Scalar act(Scalar x, Activation a) {
  if (a == Activation::relu) return x > 0 ? x : Scalar(0);
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(kInvSqrt2)));
}

template <typename Scalar>
Scalar act_grad(Scalar x, Activation a) {
  if (a == Activation::relu) return x > 0 ? Scalar(1) : Scalar(0);
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(kInvSqrt2)));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) *
                     Scalar(std::numbers::inv_sqrtpi * kInvSqrt2);
  return cdf + x * pdf;
}

}  // namespace

template <typename Scalar>
struct Transformer<Scalar>::Cache {
  struct Layer {
    RowMatrix<Scalar> h_in;
    LayerNormCache<Scalar> ln1;
    RowMatrix<Scalar> a;      // LN1 output
    RowMatrix<Scalar> qkv;
    std::vector<RowMatrix<Scalar>> probs;  // one N x N matrix per (sequence, head)
    RowMatrix<Scalar> heads;  // concatenated head outputs
    RowMatrix<Scalar> h_mid;
    LayerNormCache<Scalar> ln2;
    RowMatrix<Scalar> m;      // LN2 output
    RowMatrix<Scalar> pre;    // fc output
    RowMatrix<Scalar> post;   // activation output
  };
  std::vector<Layer> layers;
  RowMatrix<Scalar> h_final;
  LayerNormCache<Scalar> lnf;
  RowMatrix<Scalar> f;
};

template <typename Scalar>
Transformer<Scalar>::Transformer(ArchConfig cfg) : cfg_(cfg), layout_(cfg_) {
  embed_w_ = layout_.at("embed.weight").offset;
  embed_b_ = layout_.at("embed.bias").offset;
  pos_ = layout_.at("pos").offset;
  lnf_g_ = layout_.at("ln_f.gain").offset;
  lnf_b_ = layout_.at("ln_f.offset").offset;
  unembed_w_ = layout_.at("unembed.weight").offset;
  unembed_b_ = layout_.at("unembed.bias").offset;
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    LayerOffsets o{};
    o.ln1_g = layout_.at(p + "ln1.gain").offset;
    o.ln1_b = layout_.at(p + "ln1.offset").offset;
    o.qkv_w = layout_.at(p + "attn.qkv.weight").offset;
    o.qkv_b = layout_.at(p + "attn.qkv.bias").offset;
    if (cfg_.attn_output_proj) {
      o.out_w = layout_.at(p + "attn.out.weight").offset;
      o.out_b = layout_.at(p + "attn.out.bias").offset;
    }
    o.ln2_g = layout_.at(p + "ln2.gain").offset;
    o.ln2_b = layout_.at(p + "ln2.offset").offset;
    o.fc_w = layout_.at(p + "mlp.fc.weight").offset;
    o.fc_b = layout_.at(p + "mlp.fc.bias").offset;
    o.proj_w = layout_.at(p + "mlp.proj.weight").offset;
    o.proj_b = layout_.at(p + "mlp.proj.bias").offset;
    blocks_.push_back(o);
  }
}

template <typename Scalar>
void Transformer<Scalar>::check(std::span<const Scalar> params,
                                const TokenBatch<Scalar>& batch) const {
  if (params.size() != layout_.size()) {
    throw MalformedInput("parameter vector has " + std::to_string(params.size()) +
                         " entries, layout needs " + std::to_string(layout_.size()));
  }
  if (batch.tokens != cfg_.context_tokens) {
    throw MalformedInput("batch has " + std::to_string(batch.tokens) + " tokens per sequence, model expects " +
                         std::to_string(cfg_.context_tokens));
  }
  if (batch.inputs.cols() != cfg_.token_dim) {
    throw MalformedInput("token width " + std::to_string(batch.inputs.cols()) +
                         " does not match model token_dim " + std::to_string(cfg_.token_dim));
  }
  if (batch.inputs.rows() != static_cast<Eigen::Index>(batch.batch) * batch.tokens ||
      batch.labels.rows() != batch.batch || batch.labels.cols() != batch.tokens / 2) {
    throw MalformedInput("inconsistent batch shapes");
  }
}

template <typename Scalar>
typename Transformer<Scalar>::Matrix Transformer<Scalar>::run_forward(
    std::span<const Scalar> params, const TokenBatch<Scalar>& batch, Cache* cache) const {
  check(params, batch);
  // Vectorized kernels peel loops by address. Pinning the alignment keeps results
  // independent of where the caller's buffer happens to live.
  AlignedBuffer<Scalar> copy;
  const Scalar* p = params.data();
  if (reinterpret_cast<std::uintptr_t>(p) % EIGEN_DEFAULT_ALIGN_BYTES != 0) {
    copy.assign(params.begin(), params.end());
    p = copy.data();
  }
  const int B = batch.batch;
  const int N = batch.tokens;
  const int d = cfg_.d_embed;
  const int H = cfg_.heads;
  const int dh = cfg_.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();

  Matrix h = linear<Scalar>(batch.inputs, p + embed_w_, p + embed_b_, d);
  const ConstMap<Scalar> pos(p + pos_, N, d);
  for (int b = 0; b < B; ++b) h.middleRows(static_cast<Eigen::Index>(b) * N, N) += pos;

  if (cache) cache->layers.resize(cfg_.layers);
  for (int l = 0; l < cfg_.layers; ++l) {
    const auto& o = blocks_[l];
    typename Cache::Layer* lc = cache ? &cache->layers[l] : nullptr;
    LayerNormCache<Scalar> ln1;
    Matrix a = layer_norm<Scalar>(h, p + o.ln1_g, p + o.ln1_b, lc ? &ln1 : nullptr);
    Matrix qkv = linear<Scalar>(a, p + o.qkv_w, p + o.qkv_b, 3 * d);
    Matrix heads(h.rows(), d);
    std::vector<Matrix> probs;
    if (lc) probs.reserve(static_cast<std::size_t>(B) * H);
    Matrix scores(N, N);
    for (int b = 0; b < B; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * N;
      for (int hd = 0; hd < H; ++hd) {
        auto q = qkv.block(r0, hd * dh, N, dh);
        auto k = qkv.block(r0, d + hd * dh, N, dh);
        auto v = qkv.block(r0, 2 * d + hd * dh, N, dh);
        scores.noalias() = q * k.transpose();
        for (int i = 0; i < N; ++i) {
          Scalar mx = neg_inf;
          for (int j = 0; j <= i; ++j) {
            scores(i, j) *= scale;
            mx = std::max(mx, scores(i, j));
          }
          Scalar total = 0;
          for (int j = 0; j <= i; ++j) {
            scores(i, j) = std::exp(scores(i, j) - mx);
            total += scores(i, j);
          }
          for (int j = 0; j <= i; ++j) scores(i, j) /= total;
          for (int j = i + 1; j < N; ++j) scores(i, j) = 0;
        }
        heads.block(r0, hd * dh, N, dh).noalias() = scores * v;
        if (lc) probs.push_back(scores);
      }
    }
    if (lc) {
      lc->h_in = h;
      lc->ln1 = std::move(ln1);
      lc->a = std::move(a);
      lc->qkv = std::move(qkv);
      lc->probs = std::move(probs);
    }
    if (cfg_.attn_output_proj) {
      h += linear<Scalar>(heads, p + o.out_w, p + o.out_b, d);
    } else {
      h += heads;
    }
    if (lc) lc->heads = std::move(heads);

    LayerNormCache<Scalar> ln2;
    Matrix m = layer_norm<Scalar>(h, p + o.ln2_g, p + o.ln2_b, lc ? &ln2 : nullptr);
    Matrix pre = linear<Scalar>(m, p + o.fc_w, p + o.fc_b, cfg_.d_mlp);
    Matrix post = pre.unaryExpr([this](Scalar x) { return act(x, cfg_.activation); });
    if (lc) lc->h_mid = h;
    h += linear<Scalar>(post, p + o.proj_w, p + o.proj_b, d);
    if (lc) {
      lc->ln2 = std::move(ln2);
      lc->m = std::move(m);
      lc->pre = std::move(pre);
      lc->post = std::move(post);
    }
  }

  LayerNormCache<Scalar> lnf;
  Matrix f = layer_norm<Scalar>(h, p + lnf_g_, p + lnf_b_, cache ? &lnf : nullptr);
  Matrix out = linear<Scalar>(f, p + unembed_w_, p + unembed_b_, cfg_.token_dim);
  if (cache) {
    cache->h_final = std::move(h);
    cache->lnf = std::move(lnf);
    cache->f = std::move(f);
  }
  return out;
}

template <typename Scalar>
typename Transformer<Scalar>::Matrix Transformer<Scalar>::forward_tokens(
    std::span<const Scalar> params, const TokenBatch<Scalar>& batch) const {
  return run_forward(params, batch, nullptr);
}

template <typename Scalar>
typename Transformer<Scalar>::Matrix Transformer<Scalar>::forward(
    std::span<const Scalar> params, const TokenBatch<Scalar>& batch) const {
  const Matrix out = run_forward(params, batch, nullptr);
  const int K = batch.tokens / 2;
  Matrix preds(batch.batch, K);
  for (int b = 0; b < batch.batch; ++b) {
    for (int k = 0; k < K; ++k) preds(b, k) = out(static_cast<Eigen::Index>(b) * batch.tokens + 2 * k, 0);
  }
  return preds;
}

template <typename Scalar>
Scalar Transformer<Scalar>::loss(std::span<const Scalar> params,
                                 const TokenBatch<Scalar>& batch) const {
  const Matrix preds = forward(params, batch);
  double total = 0.0;
  for (Eigen::Index i = 0; i < preds.size(); ++i) {
    const double r = static_cast<double>(preds.data()[i]) - static_cast<double>(batch.labels.data()[i]);
    total += r * r;
  }
  return static_cast<Scalar>(total / static_cast<double>(preds.size()));
}

template <typename Scalar>
Scalar Transformer<Scalar>::loss_and_grad(std::span<const Scalar> params,
                                          const TokenBatch<Scalar>& batch,
                                          std::span<Scalar> grad) const {
  if (grad.size() != layout_.size()) throw MalformedInput("gradient buffer has the wrong length");
  Cache cache;
  const AlignedBuffer<Scalar> pbuf(params.begin(), params.end());
  const Matrix out = run_forward(pbuf, batch, &cache);
  const Scalar* p = pbuf.data();
  AlignedBuffer<Scalar> gbuf(pbuf.size(), Scalar(0));
  Scalar* g = gbuf.data();

  const int B = batch.batch;
  const int N = batch.tokens;
  const int K = N / 2;
  const int d = cfg_.d_embed;
  const int H = cfg_.heads;
  const int dh = cfg_.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const double count = static_cast<double>(B) * K;

  double total = 0.0;
  Matrix dout = Matrix::Zero(out.rows(), out.cols());
  for (int b = 0; b < B; ++b) {
    for (int k = 0; k < K; ++k) {
      const Eigen::Index row = static_cast<Eigen::Index>(b) * N + 2 * k;
      const double r = static_cast<double>(out(row, 0)) - static_cast<double>(batch.labels(b, k));
      total += r * r;
      dout(row, 0) = static_cast<Scalar>(2.0 * r / count);
    }
  }
  const double loss_value = total / count;
  if (!std::isfinite(loss_value)) throw NumericalFailure("non-finite loss in forward pass");

  Matrix df = linear_backward<Scalar>(dout, cache.f, p + unembed_w_, g + unembed_w_, g + unembed_b_);
  Matrix dh_res = layer_norm_backward<Scalar>(df, cache.lnf, p + lnf_g_, g + lnf_g_, g + lnf_b_);

  for (int l = cfg_.layers - 1; l >= 0; --l) {
    const auto& o = blocks_[l];
    auto& lc = cache.layers[l];

    // MLP branch.
    Matrix dpost = linear_backward<Scalar>(dh_res, lc.post, p + o.proj_w, g + o.proj_w, g + o.proj_b);
    Matrix dpre = dpost.cwiseProduct(
        lc.pre.unaryExpr([this](Scalar x) { return act_grad(x, cfg_.activation); }));
    Matrix dm = linear_backward<Scalar>(dpre, lc.m, p + o.fc_w, g + o.fc_w, g + o.fc_b);
    dh_res += layer_norm_backward<Scalar>(dm, lc.ln2, p + o.ln2_g, g + o.ln2_g, g + o.ln2_b);

    // Attention branch.
    Matrix dheads = cfg_.attn_output_proj
                        ? linear_backward<Scalar>(dh_res, lc.heads, p + o.out_w, g + o.out_w, g + o.out_b)
                        : dh_res;
    Matrix dqkv(lc.qkv.rows(), lc.qkv.cols());
    Matrix dprob(N, N);
    Matrix dscore(N, N);
    for (int b = 0; b < B; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * N;
      for (int hd = 0; hd < H; ++hd) {
        const Matrix& prob = lc.probs[static_cast<std::size_t>(b) * H + hd];
        auto q = lc.qkv.block(r0, hd * dh, N, dh);
        auto k = lc.qkv.block(r0, d + hd * dh, N, dh);
        auto v = lc.qkv.block(r0, 2 * d + hd * dh, N, dh);
        auto dO = dheads.block(r0, hd * dh, N, dh);
        dprob.noalias() = dO * v.transpose();
        dqkv.block(r0, 2 * d + hd * dh, N, dh).noalias() = prob.transpose() * dO;
        for (int i = 0; i < N; ++i) {
          const Scalar inner = prob.row(i).dot(dprob.row(i));
          for (int j = 0; j < N; ++j) dscore(i, j) = prob(i, j) * (dprob(i, j) - inner) * scale;
        }
        dqkv.block(r0, hd * dh, N, dh).noalias() = dscore * k;
        dqkv.block(r0, d + hd * dh, N, dh).noalias() = dscore.transpose() * q;
      }
    }
    Matrix da = linear_backward<Scalar>(dqkv, lc.a, p + o.qkv_w, g + o.qkv_w, g + o.qkv_b);
    dh_res += layer_norm_backward<Scalar>(da, lc.ln1, p + o.ln1_g, g + o.ln1_g, g + o.ln1_b);
  }

  MutMap<Scalar> dpos(g + pos_, N, d);
  for (int b = 0; b < B; ++b) dpos += dh_res.middleRows(static_cast<Eigen::Index>(b) * N, N);
  linear_backward<Scalar>(dh_res, batch.inputs, p + embed_w_, g + embed_w_, g + embed_b_);

  for (const Scalar v : gbuf) {
    if (!std::isfinite(v)) throw NumericalFailure("non-finite gradient");
  }
  std::copy(gbuf.begin(), gbuf.end(), grad.begin());
  return static_cast<Scalar>(loss_value);
}

template class Transformer<float>;
template class Transformer<double>;

}  // namespace icl
