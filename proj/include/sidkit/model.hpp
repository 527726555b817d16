#pragma once

// The sequence recommender: a compact pre-norm transformer over SID tokens,
// in encoder-decoder and decoder-only variants, with a hand-rolled backward
// pass (finite-difference checked) and an incremental KV-cache decode path.
// Templated on the scalar so gradient checks can run in double.

#include <sidkit/common.hpp>
#include <sidkit/io.hpp>
#include <sidkit/nn.hpp>
#include <sidkit/tokenizer.hpp>
#include <sidkit/vocab.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace sidkit {

enum class Arch { EncDec, DecOnly };

inline std::string to_string(Arch a) {
  return a == Arch::EncDec ? "enc_dec" : "dec_only";
}

struct ModelConfig {
  Arch arch = Arch::EncDec;
  int layers = 8;  // ENC_DEC: split evenly between encoder and decoder
  int heads = 6;
  int d_model = 128;
  int d_ff = 1024;
  int max_history_items = 20;  // H
  float dropout = 0.1f;
  std::uint64_t seed = 0;

  // Attention projections use heads * head_dim columns. When d_model divides
  // evenly this is the classic layout; otherwise (the default 128/6 setup)
  // the head width rounds up, T5-style, and the output projection maps back.
  int head_dim() const { return (d_model + heads - 1) / heads; }
  int inner_dim() const { return heads * head_dim(); }

  void validate() const {
    if (heads < 1 || d_model < 1) throw ValidationError("model: bad dimensions");
    if (max_history_items < 1) throw ValidationError("model: H must be >= 1");
    if (layers < 1) throw ValidationError("model: need at least one layer");
    if (arch == Arch::EncDec && layers % 2 != 0)
      throw ValidationError("model: enc_dec requires an even layer count");
    if (dropout < 0 || dropout >= 1)
      throw ValidationError("model: dropout must be in [0, 1)");
  }
};

// Token grids are PAD-padded on the right; *_len carries the real lengths.
struct TokenBatch {
  MatX<int> enc;             // B x Te (ENC_DEC only; empty otherwise)
  std::vector<int> enc_len;  // real length per row
  MatX<int> dec;             // B x Td: decoder input / full context
  std::vector<int> dec_len;
  MatX<int> target;          // B x Td; PAD where no loss applies

  Eigen::Index rows() const { return dec.rows(); }
};

namespace detail {

constexpr double kLnEps = 1e-5;
constexpr double kMaskedScore = -1e30;

template <typename T>
struct LnTape {
  MatX<T> xhat;
  VecX<T> inv_std;
};

// y = gamma .* (x - mean) / sqrt(var + eps) + beta, per row.
template <typename T>
inline MatX<T> ln_forward(const MatX<T>& x, Eigen::Map<const MatX<T>> gamma,
                          Eigen::Map<const MatX<T>> beta, LnTape<T>* tape) {
  const Eigen::Index n = x.rows(), d = x.cols();
  MatX<T> xhat(n, d);
  VecX<T> inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mean = 0;
    for (Eigen::Index j = 0; j < d; ++j) mean += static_cast<double>(x(i, j));
    mean /= double(d);
    double var = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      double c = static_cast<double>(x(i, j)) - mean;
      var += c * c;
    }
    var /= double(d);
    const double is = 1.0 / std::sqrt(var + kLnEps);
    inv_std(i) = static_cast<T>(is);
    for (Eigen::Index j = 0; j < d; ++j)
      xhat(i, j) = static_cast<T>((static_cast<double>(x(i, j)) - mean) * is);
  }
  MatX<T> y = xhat.array().rowwise() * gamma.row(0).array();
  y.array().rowwise() += beta.row(0).array();
  if (tape) {
    tape->xhat = std::move(xhat);
    tape->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
inline MatX<T> ln_backward(const MatX<T>& dy, const LnTape<T>& tape,
                           Eigen::Map<const MatX<T>> gamma,
                           Eigen::Map<MatX<T>> dgamma, Eigen::Map<MatX<T>> dbeta) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  dgamma.row(0) += (dy.array() * tape.xhat.array()).colwise().sum().matrix();
  dbeta.row(0) += dy.colwise().sum();
  MatX<T> dxhat = dy.array().rowwise() * gamma.row(0).array();
  MatX<T> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    double m1 = 0, m2 = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      m1 += static_cast<double>(dxhat(i, j));
      m2 += static_cast<double>(dxhat(i, j)) * static_cast<double>(tape.xhat(i, j));
    }
    m1 /= double(d);
    m2 /= double(d);
    for (Eigen::Index j = 0; j < d; ++j)
      dx(i, j) = static_cast<T>(static_cast<double>(tape.inv_std(i)) *
                                (static_cast<double>(dxhat(i, j)) - m1 -
                                 static_cast<double>(tape.xhat(i, j)) * m2));
  }
  return dx;
}

// Deterministic stateless dropout: the keep decision is a hash of
// (seed, site, element), so forward and backward agree without storage and
// the mask is independent of threading.
inline bool dropout_keep(std::uint64_t key, float rate) {
  return (double)(splitmix64(key) >> 11) * 0x1.0p-53 >= (double)rate;
}

template <typename T>
inline void dropout_inplace(MatX<T>& x, float rate, std::uint64_t seed,
                            std::uint64_t site) {
  if (rate <= 0) return;
  const T scale = static_cast<T>(1.0 / (1.0 - (double)rate));
  const std::uint64_t base = splitmix64(seed ^ (site * 0x9E3779B97F4A7C15ull));
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      x(i, j) = dropout_keep(base ^ (std::uint64_t(i) << 24) ^ std::uint64_t(j), rate)
                    ? x(i, j) * scale
                    : T(0);
}

struct MaskSpec {
  bool causal = false;
  const std::vector<int>* key_len = nullptr;  // valid keys per batch row
};

template <typename T>
struct AttnTape {
  MatX<T> x_in;    // block input (pre-LN), needed for the residual path
  LnTape<T> ln;
  MatX<T> ln_out;  // query-side projection input
  MatX<T> kv_in;   // cross-attention key/value source (empty for self)
  MatX<T> q, k, v;
  MatX<T> probs;   // (B*heads*Tq) x Tk
  MatX<T> concat;  // heads re-concatenated attention output
};

// Multi-head attention over flattened (B*T, d) projections.
template <typename T>
inline void mha_forward(const MatX<T>& q, const MatX<T>& k, const MatX<T>& v,
                        int B, int Tq, int Tk, int heads, const MaskSpec& mask,
                        MatX<T>& probs, MatX<T>& out) {
  const int dh = static_cast<int>(q.cols()) / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(double(dh)));
  probs.setZero(Eigen::Index(B) * heads * Tq, Tk);
  out.resize(Eigen::Index(B) * Tq, q.cols());
#pragma omp parallel for schedule(static) collapse(2)
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto qb = q.block(Eigen::Index(b) * Tq, Eigen::Index(h) * dh, Tq, dh);
      auto kb = k.block(Eigen::Index(b) * Tk, Eigen::Index(h) * dh, Tk, dh);
      auto vb = v.block(Eigen::Index(b) * Tk, Eigen::Index(h) * dh, Tk, dh);
      MatX<T> scores(Tq, Tk);
      scores.noalias() = qb * kb.transpose();
      scores *= scale;
      const int klen = mask.key_len ? (*mask.key_len)[std::size_t(b)] : Tk;
      auto pb = probs.middleRows((Eigen::Index(b) * heads + h) * Tq, Tq);
      for (int i = 0; i < Tq; ++i) {
        int limit = mask.causal ? std::min(klen, i + 1) : klen;
        if (limit <= 0) continue;  // row unused downstream
        T mx = scores(i, 0);
        for (int j = 1; j < limit; ++j) mx = std::max(mx, scores(i, j));
        double denom = 0;
        for (int j = 0; j < limit; ++j) {
          double e = std::exp(static_cast<double>(scores(i, j) - mx));
          pb(i, j) = static_cast<T>(e);
          denom += e;
        }
        for (int j = 0; j < limit; ++j)
          pb(i, j) = static_cast<T>(static_cast<double>(pb(i, j)) / denom);
      }
      out.block(Eigen::Index(b) * Tq, Eigen::Index(h) * dh, Tq, dh).noalias() =
          pb * vb;
    }
  }
}

template <typename T>
inline void mha_backward(const MatX<T>& d_out, const MatX<T>& probs,
                         const MatX<T>& q, const MatX<T>& k, const MatX<T>& v,
                         int B, int Tq, int Tk, int heads, MatX<T>& dq,
                         MatX<T>& dk, MatX<T>& dv) {
  const int dh = static_cast<int>(q.cols()) / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(double(dh)));
  dq.setZero(q.rows(), q.cols());
  dk.setZero(k.rows(), k.cols());
  dv.setZero(v.rows(), v.cols());
#pragma omp parallel for schedule(static) collapse(2)
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto qb = q.block(Eigen::Index(b) * Tq, Eigen::Index(h) * dh, Tq, dh);
      auto kb = k.block(Eigen::Index(b) * Tk, Eigen::Index(h) * dh, Tk, dh);
      auto vb = v.block(Eigen::Index(b) * Tk, Eigen::Index(h) * dh, Tk, dh);
      auto pb = probs.middleRows((Eigen::Index(b) * heads + h) * Tq, Tq);
      auto dob = d_out.block(Eigen::Index(b) * Tq, Eigen::Index(h) * dh, Tq, dh);

      MatX<T> dprobs(Tq, Tk);
      dprobs.noalias() = dob * vb.transpose();
      dv.block(Eigen::Index(b) * Tk, Eigen::Index(h) * dh, Tk, dh).noalias() =
          pb.transpose() * dob;

      // Softmax backward; masked entries have probs == 0 and drop out.
      MatX<T> dscores(Tq, Tk);
      for (int i = 0; i < Tq; ++i) {
        double dot = 0;
        for (int j = 0; j < Tk; ++j)
          dot += static_cast<double>(dprobs(i, j)) * static_cast<double>(pb(i, j));
        for (int j = 0; j < Tk; ++j)
          dscores(i, j) = static_cast<T>(static_cast<double>(pb(i, j)) *
                                         (static_cast<double>(dprobs(i, j)) - dot));
      }
      dscores *= scale;
      dq.block(Eigen::Index(b) * Tq, Eigen::Index(h) * dh, Tq, dh).noalias() =
          dscores * kb;
      dk.block(Eigen::Index(b) * Tk, Eigen::Index(h) * dh, Tk, dh).noalias() =
          dscores.transpose() * qb;
    }
  }
}

template <typename T>
struct FfnTape {
  MatX<T> x_in;
  LnTape<T> ln;
  MatX<T> ln_out, pre1, act;
};

}  // namespace detail

// ---------------------------------------------------------------------------

template <typename T>
class GRModel {
 public:
  ModelConfig cfg;
  VocabLayout vocab;
  ParamStore<T> params;

  struct AttnIdx {
    int ln_g, ln_b, wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct FfnIdx {
    int ln_g, ln_b, w1, b1, w2, b2;
  };
  struct DecLayerIdx {
    AttnIdx self;
    std::optional<AttnIdx> cross;
    FfnIdx ffn;
  };

  GRModel(const ModelConfig& config, const VocabLayout& layout)
      : cfg(config), vocab(layout) {
    cfg.validate();
    const int d = cfg.d_model;
    const int l_tok = vocab.l_tok();
    n_enc_ = cfg.arch == Arch::EncDec ? cfg.layers / 2 : 0;
    n_dec_ = cfg.layers - n_enc_;
    max_enc_len_ = 1 + cfg.max_history_items * l_tok;
    max_dec_len_ = cfg.arch == Arch::EncDec
                       ? l_tok
                       : 2 + (cfg.max_history_items + 1) * l_tok;

    tok_emb_ = params.add("tok_emb", vocab.total_vocab(), d, ParamKind::Embedding);
    if (cfg.arch == Arch::EncDec)
      pos_enc_ = params.add("pos_enc", max_enc_len_, d, ParamKind::Embedding);
    pos_dec_ = params.add("pos_dec", max_dec_len_, d, ParamKind::Embedding);

    const int inner = cfg.inner_dim();
    auto add_attn = [&](const std::string& p) {
      AttnIdx a;
      a.ln_g = params.add(p + ".ln.g", 1, d, ParamKind::LnGain);
      a.ln_b = params.add(p + ".ln.b", 1, d, ParamKind::LnBias);
      a.wq = params.add(p + ".wq", d, inner, ParamKind::Weight);
      a.bq = params.add(p + ".bq", 1, inner, ParamKind::Bias);
      a.wk = params.add(p + ".wk", d, inner, ParamKind::Weight);
      a.bk = params.add(p + ".bk", 1, inner, ParamKind::Bias);
      a.wv = params.add(p + ".wv", d, inner, ParamKind::Weight);
      a.bv = params.add(p + ".bv", 1, inner, ParamKind::Bias);
      a.wo = params.add(p + ".wo", inner, d, ParamKind::Weight);
      a.bo = params.add(p + ".bo", 1, d, ParamKind::Bias);
      return a;
    };
    auto add_ffn = [&](const std::string& p) {
      FfnIdx f;
      f.ln_g = params.add(p + ".ln.g", 1, d, ParamKind::LnGain);
      f.ln_b = params.add(p + ".ln.b", 1, d, ParamKind::LnBias);
      f.w1 = params.add(p + ".w1", d, cfg.d_ff, ParamKind::Weight);
      f.b1 = params.add(p + ".b1", 1, cfg.d_ff, ParamKind::Bias);
      f.w2 = params.add(p + ".w2", cfg.d_ff, d, ParamKind::Weight);
      f.b2 = params.add(p + ".b2", 1, d, ParamKind::Bias);
      return f;
    };

    for (int l = 0; l < n_enc_; ++l) {
      const std::string p = "enc" + std::to_string(l);
      enc_self_.push_back(add_attn(p + ".self"));
      enc_ffn_.push_back(add_ffn(p + ".ffn"));
    }
    if (n_enc_ > 0) {
      enc_lnf_g_ = params.add("enc.lnf.g", 1, d, ParamKind::LnGain);
      enc_lnf_b_ = params.add("enc.lnf.b", 1, d, ParamKind::LnBias);
    }
    for (int l = 0; l < n_dec_; ++l) {
      const std::string p = "dec" + std::to_string(l);
      DecLayerIdx layer;
      layer.self = add_attn(p + ".self");
      if (cfg.arch == Arch::EncDec) layer.cross = add_attn(p + ".cross");
      layer.ffn = add_ffn(p + ".ffn");
      dec_layers_.push_back(layer);
    }
    dec_lnf_g_ = params.add("dec.lnf.g", 1, d, ParamKind::LnGain);
    dec_lnf_b_ = params.add("dec.lnf.b", 1, d, ParamKind::LnBias);
    out_w_ = params.add("out.w", d, vocab.total_vocab(), ParamKind::Weight);
    out_b_ = params.add("out.b", 1, vocab.total_vocab(), ParamKind::Bias);

    params.finalize();
    params.init(cfg.seed);
  }

  int encoder_layers() const { return n_enc_; }
  int decoder_layers() const { return n_dec_; }
  int max_enc_len() const { return max_enc_len_; }
  int max_dec_len() const { return max_dec_len_; }

  // -------------------------------------------------------------------------
  // Batched forward (+ optional backward). Dropout only when training.

  struct Tape {
    MatX<T> enc_x0, dec_x0;  // embedding outputs
    std::vector<detail::AttnTape<T>> enc_self, dec_self, dec_cross;
    std::vector<detail::FfnTape<T>> enc_ffn, dec_ffn;
    detail::LnTape<T> enc_lnf, dec_lnf;
    MatX<T> enc_lnf_in, dec_lnf_in;
    MatX<T> enc_out, dec_out;
    MatX<T> logits;
    int B = 0, Te = 0, Td = 0;
  };

  MatX<T> forward(const TokenBatch& batch, bool training, std::uint64_t step,
                  Tape* tape_out = nullptr, const Tape* frozen_relu = nullptr) const {
    Tape local;
    Tape& tp = tape_out ? *tape_out : local;
    tp.B = static_cast<int>(batch.rows());
    tp.Td = static_cast<int>(batch.dec.cols());
    const float rate = training ? cfg.dropout : 0.f;
    const std::uint64_t dseed = splitmix64(cfg.seed ^ (step * 0xD150ull + 1));

    MatX<T> enc_out;
    if (cfg.arch == Arch::EncDec) {
      tp.Te = static_cast<int>(batch.enc.cols());
      if (tp.Te > max_enc_len_)
        throw ContractViolation("forward: encoder input longer than position table");
      MatX<T> x = embed(batch.enc, pos_enc_);
      tp.enc_x0 = x;
      detail::MaskSpec mask{false, &batch.enc_len};
      tp.enc_self.resize(std::size_t(n_enc_));
      tp.enc_ffn.resize(std::size_t(n_enc_));
      for (int l = 0; l < n_enc_; ++l) {
        attn_block(x, x, tp.B, tp.Te, tp.Te, mask, enc_self_[std::size_t(l)],
                   tp.enc_self[std::size_t(l)], rate, dseed, 100 + l * 4);
        ffn_block(x, enc_ffn_[std::size_t(l)], tp.enc_ffn[std::size_t(l)], rate,
                  dseed, 100 + l * 4 + 2,
                  frozen_relu ? &frozen_relu->enc_ffn[std::size_t(l)].pre1 : nullptr);
        if (!x.allFinite())
          throw NumericError("forward: non-finite activation in encoder layer " +
                             std::to_string(l));
      }
      tp.enc_lnf_in = x;
      enc_out = detail::ln_forward<T>(x, params.mat(enc_lnf_g_),
                                      params.mat(enc_lnf_b_), &tp.enc_lnf);
      tp.enc_out = enc_out;
    }

    if (static_cast<int>(batch.dec.cols()) > max_dec_len_)
      throw ContractViolation("forward: decoder input longer than position table");
    MatX<T> y = embed(batch.dec, pos_dec_);
    tp.dec_x0 = y;
    detail::MaskSpec causal{true, &batch.dec_len};
    detail::MaskSpec cross_mask{false, &batch.enc_len};
    tp.dec_self.resize(std::size_t(n_dec_));
    tp.dec_ffn.resize(std::size_t(n_dec_));
    tp.dec_cross.resize(std::size_t(n_dec_));
    for (int l = 0; l < n_dec_; ++l) {
      const auto& layer = dec_layers_[std::size_t(l)];
      attn_block(y, y, tp.B, tp.Td, tp.Td, causal, layer.self,
                 tp.dec_self[std::size_t(l)], rate, dseed, 500 + l * 4);
      if (layer.cross)
        attn_block(y, enc_out, tp.B, tp.Td, tp.Te, cross_mask, *layer.cross,
                   tp.dec_cross[std::size_t(l)], rate, dseed, 500 + l * 4 + 1);
      ffn_block(y, layer.ffn, tp.dec_ffn[std::size_t(l)], rate, dseed,
                500 + l * 4 + 2,
                frozen_relu ? &frozen_relu->dec_ffn[std::size_t(l)].pre1 : nullptr);
      if (!y.allFinite())
        throw NumericError("forward: non-finite activation in decoder layer " +
                           std::to_string(l));
    }
    tp.dec_lnf_in = y;
    tp.dec_out = detail::ln_forward<T>(y, params.mat(dec_lnf_g_),
                                       params.mat(dec_lnf_b_), &tp.dec_lnf);
    MatX<T> logits = tp.dec_out * params.mat(out_w_);
    logits.array().rowwise() += params.mat(out_b_).row(0).array();
    if (!logits.allFinite())
      throw NumericError("forward: non-finite logits");
    tp.logits = logits;
    return logits;
  }

  // Accumulates parameter gradients from d_logits; requires the tape of the
  // forward call (same dropout sites are re-derived from (seed, step)).
  void backward(const TokenBatch& batch, const Tape& tp, const MatX<T>& d_logits,
                bool training, std::uint64_t step) {
    const float rate = training ? cfg.dropout : 0.f;
    const std::uint64_t dseed = splitmix64(cfg.seed ^ (step * 0xD150ull + 1));

    params.grad(out_w_).noalias() += tp.dec_out.transpose() * d_logits;
    params.grad(out_b_).row(0) += d_logits.colwise().sum();
    MatX<T> dy = d_logits * params.mat(out_w_).transpose();
    dy = detail::ln_backward<T>(dy, tp.dec_lnf, params.cmat(dec_lnf_g_),
                                params.grad(dec_lnf_g_), params.grad(dec_lnf_b_));

    MatX<T> d_enc_out;
    if (cfg.arch == Arch::EncDec)
      d_enc_out = MatX<T>::Zero(tp.enc_out.rows(), tp.enc_out.cols());

    detail::MaskSpec causal{true, &batch.dec_len};
    detail::MaskSpec cross_mask{false, &batch.enc_len};
    for (int l = n_dec_ - 1; l >= 0; --l) {
      const auto& layer = dec_layers_[std::size_t(l)];
      ffn_block_backward(dy, layer.ffn, tp.dec_ffn[std::size_t(l)], rate, dseed,
                         500 + l * 4 + 2);
      if (layer.cross)
        attn_block_backward(dy, &d_enc_out, tp.B, tp.Td, tp.Te, cross_mask,
                            *layer.cross, tp.dec_cross[std::size_t(l)], rate,
                            dseed, 500 + l * 4 + 1);
      attn_block_backward(dy, nullptr, tp.B, tp.Td, tp.Td, causal, layer.self,
                          tp.dec_self[std::size_t(l)], rate, dseed, 500 + l * 4);
    }
    embed_backward(batch.dec, pos_dec_, dy);

    if (cfg.arch == Arch::EncDec) {
      MatX<T> dx = detail::ln_backward<T>(d_enc_out, tp.enc_lnf,
                                          params.cmat(enc_lnf_g_),
                                          params.grad(enc_lnf_g_),
                                          params.grad(enc_lnf_b_));
      detail::MaskSpec mask{false, &batch.enc_len};
      for (int l = n_enc_ - 1; l >= 0; --l) {
        ffn_block_backward(dx, enc_ffn_[std::size_t(l)], tp.enc_ffn[std::size_t(l)],
                           rate, dseed, 100 + l * 4 + 2);
        attn_block_backward(dx, nullptr, tp.B, tp.Te, tp.Te, mask,
                            enc_self_[std::size_t(l)], tp.enc_self[std::size_t(l)],
                            rate, dseed, 100 + l * 4);
      }
      embed_backward(batch.enc, pos_enc_, dx);
    }
  }

  // -------------------------------------------------------------------------
  // Incremental decoding with per-beam KV caches.

  struct EncoderContext {
    MatX<T> enc_out;                  // Te x d
    std::vector<MatX<T>> cross_k, cross_v;  // per decoder layer, Te x d
    int enc_len = 0;
  };

  struct BeamCache {
    std::vector<MatX<T>> k, v;  // per decoder layer, len x d
    int len = 0;
  };

  EncoderContext make_encoder_context(const std::vector<int>& enc_tokens) const {
    if (cfg.arch != Arch::EncDec)
      throw ContractViolation("make_encoder_context: decoder-only model");
    TokenBatch b;
    b.enc = MatX<int>(1, static_cast<Eigen::Index>(enc_tokens.size()));
    for (std::size_t i = 0; i < enc_tokens.size(); ++i)
      b.enc(0, static_cast<Eigen::Index>(i)) = enc_tokens[i];
    b.enc_len = {static_cast<int>(enc_tokens.size())};

    MatX<T> x = embed(b.enc, pos_enc_);
    detail::MaskSpec mask{false, &b.enc_len};
    const int Te = static_cast<int>(enc_tokens.size());
    for (int l = 0; l < n_enc_; ++l) {
      detail::AttnTape<T> at;
      attn_block(x, x, 1, Te, Te, mask, enc_self_[std::size_t(l)], at, 0.f, 0, 0);
      detail::FfnTape<T> ft;
      ffn_block(x, enc_ffn_[std::size_t(l)], ft, 0.f, 0, 0);
    }
    EncoderContext ctx;
    ctx.enc_len = Te;
    ctx.enc_out = detail::ln_forward<T>(x, params.mat(enc_lnf_g_),
                                        params.mat(enc_lnf_b_), nullptr);
    for (const auto& layer : dec_layers_) {
      const auto& c = *layer.cross;
      MatX<T> k = ctx.enc_out * params.mat(c.wk);
      k.array().rowwise() += params.mat(c.bk).row(0).array();
      MatX<T> v = ctx.enc_out * params.mat(c.wv);
      v.array().rowwise() += params.mat(c.bv).row(0).array();
      ctx.cross_k.push_back(std::move(k));
      ctx.cross_v.push_back(std::move(v));
    }
    return ctx;
  }

  BeamCache make_beam_cache() const {
    BeamCache c;
    c.k.resize(std::size_t(n_dec_));
    c.v.resize(std::size_t(n_dec_));
    c.len = 0;
    return c;
  }

  // Feed one token per beam at position cache.len; returns logits per beam
  // and appends this position's keys/values to each cache.
  MatX<T> decode_step(const EncoderContext* ctx, std::vector<BeamCache>& caches,
                      const std::vector<int>& next_tokens) const {
    const int nb = static_cast<int>(caches.size());
    if (nb == 0 || next_tokens.size() != caches.size())
      throw ContractViolation("decode_step: beam/token count mismatch");
    const int pos = caches[0].len;
    for (const auto& c : caches)
      if (c.len != pos)
        throw ContractViolation("decode_step: cache lengths diverge");
    if (cfg.arch == Arch::EncDec && !ctx)
      throw ContractViolation("decode_step: missing encoder context");
    if (pos + 1 > max_dec_len_)
      throw ContractViolation("decode_step: position beyond table");

    const int d = cfg.d_model;
    const int inner = cfg.inner_dim();
    const int heads = cfg.heads;
    const int dh = cfg.head_dim();
    const T scale = static_cast<T>(1.0 / std::sqrt(double(dh)));

    MatX<T> x(nb, d);
    auto tok = params.mat(tok_emb_);
    auto pe = params.mat(pos_dec_);
    for (int i = 0; i < nb; ++i) {
      if (next_tokens[std::size_t(i)] < 0 ||
          next_tokens[std::size_t(i)] >= vocab.total_vocab())
        throw ContractViolation("decode_step: token out of range");
      x.row(i) = tok.row(next_tokens[std::size_t(i)]) + pe.row(pos);
    }

    for (int l = 0; l < n_dec_; ++l) {
      const auto& layer = dec_layers_[std::size_t(l)];
      // Self-attention over the cached prefix plus this position.
      {
        const auto& a = layer.self;
        MatX<T> h = detail::ln_forward<T>(x, params.mat(a.ln_g), params.mat(a.ln_b),
                                          nullptr);
        MatX<T> q = h * params.mat(a.wq);
        q.array().rowwise() += params.mat(a.bq).row(0).array();
        MatX<T> k = h * params.mat(a.wk);
        k.array().rowwise() += params.mat(a.bk).row(0).array();
        MatX<T> v = h * params.mat(a.wv);
        v.array().rowwise() += params.mat(a.bv).row(0).array();

        MatX<T> concat(nb, inner);
        for (int i = 0; i < nb; ++i) {
          auto& cache = caches[std::size_t(i)];
          if (cache.k[std::size_t(l)].rows() != pos)
            throw ContractViolation("decode_step: cache length mismatch");
          cache.k[std::size_t(l)].conservativeResize(pos + 1, inner);
          cache.v[std::size_t(l)].conservativeResize(pos + 1, inner);
          cache.k[std::size_t(l)].row(pos) = k.row(i);
          cache.v[std::size_t(l)].row(pos) = v.row(i);
          for (int hh = 0; hh < heads; ++hh) {
            auto kb = cache.k[std::size_t(l)].middleCols(hh * dh, dh);
            auto vb = cache.v[std::size_t(l)].middleCols(hh * dh, dh);
            Eigen::Matrix<T, 1, Eigen::Dynamic> qrow =
                q.block(i, hh * dh, 1, dh);
            Eigen::Matrix<T, Eigen::Dynamic, 1> scores = kb * qrow.transpose();
            scores *= scale;
            T mx = scores.maxCoeff();
            double denom = 0;
            for (Eigen::Index j = 0; j < scores.size(); ++j) {
              double e = std::exp(static_cast<double>(scores(j) - mx));
              scores(j) = static_cast<T>(e);
              denom += e;
            }
            concat.block(i, hh * dh, 1, dh).noalias() =
                (scores.transpose() * vb) / static_cast<T>(denom);
          }
        }
        MatX<T> proj = concat * params.mat(a.wo);
        proj.array().rowwise() += params.mat(a.bo).row(0).array();
        x += proj;
      }
      // Cross-attention against the shared encoder context.
      if (layer.cross) {
        const auto& a = *layer.cross;
        MatX<T> h = detail::ln_forward<T>(x, params.mat(a.ln_g), params.mat(a.ln_b),
                                          nullptr);
        MatX<T> q = h * params.mat(a.wq);
        q.array().rowwise() += params.mat(a.bq).row(0).array();
        const auto& ck = ctx->cross_k[std::size_t(l)];
        const auto& cv = ctx->cross_v[std::size_t(l)];
        MatX<T> concat(nb, inner);
        for (int i = 0; i < nb; ++i) {
          for (int hh = 0; hh < heads; ++hh) {
            auto kb = ck.middleCols(hh * dh, dh);
            auto vb = cv.middleCols(hh * dh, dh);
            Eigen::Matrix<T, 1, Eigen::Dynamic> qrow = q.block(i, hh * dh, 1, dh);
            Eigen::Matrix<T, Eigen::Dynamic, 1> scores = kb * qrow.transpose();
            scores *= scale;
            T mx = scores.maxCoeff();
            double denom = 0;
            for (Eigen::Index j = 0; j < scores.size(); ++j) {
              double e = std::exp(static_cast<double>(scores(j) - mx));
              scores(j) = static_cast<T>(e);
              denom += e;
            }
            concat.block(i, hh * dh, 1, dh).noalias() =
                (scores.transpose() * vb) / static_cast<T>(denom);
          }
        }
        MatX<T> proj = concat * params.mat(a.wo);
        proj.array().rowwise() += params.mat(a.bo).row(0).array();
        x += proj;
      }
      // FFN.
      {
        const auto& f = layer.ffn;
        MatX<T> h = detail::ln_forward<T>(x, params.mat(f.ln_g), params.mat(f.ln_b),
                                          nullptr);
        MatX<T> pre = h * params.mat(f.w1);
        pre.array().rowwise() += params.mat(f.b1).row(0).array();
        MatX<T> act = pre.array().max(T(0)).matrix();
        MatX<T> out = act * params.mat(f.w2);
        out.array().rowwise() += params.mat(f.b2).row(0).array();
        x += out;
      }
    }
    for (auto& c : caches) c.len = pos + 1;

    MatX<T> y = detail::ln_forward<T>(x, params.mat(dec_lnf_g_),
                                      params.mat(dec_lnf_b_), nullptr);
    MatX<T> logits = y * params.mat(out_w_);
    logits.array().rowwise() += params.mat(out_b_).row(0).array();
    return logits;
  }

  static std::vector<BeamCache> reorder_caches(const std::vector<BeamCache>& caches,
                                               const std::vector<int>& take) {
    std::vector<BeamCache> out;
    out.reserve(take.size());
    for (int idx : take) out.push_back(caches[std::size_t(idx)]);
    return out;
  }

  // Decoder-only prefill: one batched forward over the context, lifting the
  // per-layer keys/values into a beam cache. Returns the cache plus the
  // logits at the final context position (the first generation step).
  std::pair<BeamCache, VecX<T>> prefill_cache(const std::vector<int>& ctx) const {
    if (cfg.arch != Arch::DecOnly)
      throw ContractViolation("prefill_cache: encoder-decoder model");
    if (ctx.empty()) throw ContractViolation("prefill_cache: empty context");
    TokenBatch b;
    const int n = static_cast<int>(ctx.size());
    b.dec = MatX<int>(1, n);
    for (int i = 0; i < n; ++i) b.dec(0, i) = ctx[std::size_t(i)];
    b.dec_len = {n};
    b.target = MatX<int>::Constant(1, n, VocabLayout::PAD);
    Tape tape;
    forward(b, false, 0, &tape);
    BeamCache cache = make_beam_cache();
    for (int l = 0; l < n_dec_; ++l) {
      cache.k[std::size_t(l)] = tape.dec_self[std::size_t(l)].k;
      cache.v[std::size_t(l)] = tape.dec_self[std::size_t(l)].v;
    }
    cache.len = n;
    return {std::move(cache), tape.logits.row(n - 1).transpose()};
  }

 private:
  int n_enc_ = 0, n_dec_ = 0;
  int max_enc_len_ = 0, max_dec_len_ = 0;
  int tok_emb_ = -1, pos_enc_ = -1, pos_dec_ = -1;
  std::vector<AttnIdx> enc_self_;
  std::vector<FfnIdx> enc_ffn_;
  std::vector<DecLayerIdx> dec_layers_;
  int enc_lnf_g_ = -1, enc_lnf_b_ = -1, dec_lnf_g_ = -1, dec_lnf_b_ = -1;
  int out_w_ = -1, out_b_ = -1;

  MatX<T> embed(const MatX<int>& tokens, int pos_idx) const {
    const Eigen::Index B = tokens.rows(), L = tokens.cols();
    for (Eigen::Index i = 0; i < tokens.size(); ++i)
      if (tokens.data()[i] < 0 || tokens.data()[i] >= vocab.total_vocab())
        throw ContractViolation("embed: token id out of range");
    MatX<T> x(B * L, cfg.d_model);
    auto tok = params.mat(tok_emb_);
    auto pe = params.mat(pos_idx);
#pragma omp parallel for schedule(static)
    for (Eigen::Index b = 0; b < B; ++b) {
      for (Eigen::Index t = 0; t < L; ++t) {
        x.row(b * L + t) = tok.row(tokens(b, t)) + pe.row(t);
      }
    }
    return x;
  }

  void embed_backward(const MatX<int>& tokens, int pos_idx, const MatX<T>& dx) {
    const Eigen::Index B = tokens.rows(), L = tokens.cols();
    auto dtok = params.grad(tok_emb_);
    auto dpe = params.grad(pos_idx);
    for (Eigen::Index b = 0; b < B; ++b) {
      for (Eigen::Index t = 0; t < L; ++t) {
        dtok.row(tokens(b, t)) += dx.row(b * L + t);
        dpe.row(t) += dx.row(b * L + t);
      }
    }
  }

  // x += Dropout(Wo * MHA(LN(x)) + bo); when kv differs from x this is
  // cross-attention and keys/values are projected from kv directly.
  void attn_block(MatX<T>& x, const MatX<T>& kv, int B, int Tq, int Tk,
                  const detail::MaskSpec& mask, const AttnIdx& a,
                  detail::AttnTape<T>& tp, float rate, std::uint64_t dseed,
                  int site) const {
    const bool self = (&kv == &x);
    tp.x_in = x;
    tp.ln_out = detail::ln_forward<T>(x, params.mat(a.ln_g), params.mat(a.ln_b),
                                      &tp.ln);
    tp.q.noalias() = tp.ln_out * params.mat(a.wq);
    tp.q.array().rowwise() += params.mat(a.bq).row(0).array();
    if (!self) tp.kv_in = kv;
    const MatX<T>& kv_src = self ? tp.ln_out : tp.kv_in;
    tp.k.noalias() = kv_src * params.mat(a.wk);
    tp.k.array().rowwise() += params.mat(a.bk).row(0).array();
    tp.v.noalias() = kv_src * params.mat(a.wv);
    tp.v.array().rowwise() += params.mat(a.bv).row(0).array();

    MatX<T> attn_out;
    detail::mha_forward<T>(tp.q, tp.k, tp.v, B, Tq, Tk, cfg.heads, mask,
                           tp.probs, attn_out);
    tp.concat = std::move(attn_out);
    MatX<T> proj = tp.concat * params.mat(a.wo);
    proj.array().rowwise() += params.mat(a.bo).row(0).array();
    detail::dropout_inplace(proj, rate, dseed, std::uint64_t(site));
    x += proj;
  }

  // Backward for attn_block; d_kv receives key/value-path gradients for
  // cross-attention (self-attention folds them into dx).
  void attn_block_backward(MatX<T>& dx, MatX<T>* d_kv, int B, int Tq, int Tk,
                           const detail::MaskSpec& mask, const AttnIdx& a,
                           const detail::AttnTape<T>& tp, float rate,
                           std::uint64_t dseed, int site) {
    MatX<T> d_proj = dx;  // residual: gradient reaches both branches
    detail::dropout_inplace(d_proj, rate, dseed, std::uint64_t(site));
    params.grad(a.wo).noalias() += tp.concat.transpose() * d_proj;
    params.grad(a.bo).row(0) += d_proj.colwise().sum();
    MatX<T> d_concat = d_proj * params.mat(a.wo).transpose();

    MatX<T> dq, dk, dv;
    detail::mha_backward<T>(d_concat, tp.probs, tp.q, tp.k, tp.v, B, Tq, Tk,
                            cfg.heads, dq, dk, dv);

    const bool self = (d_kv == nullptr);
    MatX<T> d_ln_out;
    params.grad(a.wq).noalias() += tp.ln_out.transpose() * dq;
    params.grad(a.bq).row(0) += dq.colwise().sum();
    d_ln_out.noalias() = dq * params.mat(a.wq).transpose();

    const MatX<T>& kv_src = self ? tp.ln_out : tp.kv_in;
    params.grad(a.wk).noalias() += kv_src.transpose() * dk;
    params.grad(a.wv).noalias() += kv_src.transpose() * dv;
    params.grad(a.bk).row(0) += dk.colwise().sum();
    params.grad(a.bv).row(0) += dv.colwise().sum();
    if (self) {
      d_ln_out.noalias() += dk * params.mat(a.wk).transpose();
      d_ln_out.noalias() += dv * params.mat(a.wv).transpose();
    } else {
      d_kv->noalias() += dk * params.mat(a.wk).transpose();
      d_kv->noalias() += dv * params.mat(a.wv).transpose();
    }
    dx += detail::ln_backward<T>(d_ln_out, tp.ln, params.cmat(a.ln_g),
                                 params.grad(a.ln_g), params.grad(a.ln_b));
  }

  void ffn_block(MatX<T>& x, const FfnIdx& f, detail::FfnTape<T>& tp, float rate,
                 std::uint64_t dseed, int site,
                 const MatX<T>* frozen_pre = nullptr) const {
    tp.x_in = x;
    tp.ln_out = detail::ln_forward<T>(x, params.mat(f.ln_g), params.mat(f.ln_b),
                                      &tp.ln);
    tp.pre1.noalias() = tp.ln_out * params.mat(f.w1);
    tp.pre1.array().rowwise() += params.mat(f.b1).row(0).array();
    if (frozen_pre)
      tp.act = (tp.pre1.array() * (frozen_pre->array() > T(0)).template cast<T>())
                   .matrix();
    else
      tp.act = tp.pre1.array().max(T(0)).matrix();
    MatX<T> out = tp.act * params.mat(f.w2);
    out.array().rowwise() += params.mat(f.b2).row(0).array();
    detail::dropout_inplace(out, rate, dseed, std::uint64_t(site));
    x += out;
  }

  void ffn_block_backward(MatX<T>& dx, const FfnIdx& f,
                          const detail::FfnTape<T>& tp, float rate,
                          std::uint64_t dseed, int site) {
    MatX<T> d_out = dx;
    detail::dropout_inplace(d_out, rate, dseed, std::uint64_t(site));
    params.grad(f.w2).noalias() += tp.act.transpose() * d_out;
    params.grad(f.b2).row(0) += d_out.colwise().sum();
    MatX<T> d_act = d_out * params.mat(f.w2).transpose();
    MatX<T> d_pre = (d_act.array() * (tp.pre1.array() > T(0)).template cast<T>()).matrix();
    params.grad(f.w1).noalias() += tp.ln_out.transpose() * d_pre;
    params.grad(f.b1).row(0) += d_pre.colwise().sum();
    MatX<T> d_ln_out = d_pre * params.mat(f.w1).transpose();
    dx += detail::ln_backward<T>(d_ln_out, tp.ln, params.cmat(f.ln_g),
                                 params.grad(f.ln_g), params.grad(f.ln_b));
  }
};

// ---------------------------------------------------------------------------
// Mean cross-entropy over non-PAD target positions (stable log-sum-exp).
// Optionally emits d(loss)/d(logits) for training.

template <typename T>
inline double next_token_loss(const MatX<T>& logits, const MatX<int>& targets,
                              MatX<T>* d_logits = nullptr) {
  const Eigen::Index rows = logits.rows();
  if (targets.size() != rows)
    throw ContractViolation("next_token_loss: target/logit shape mismatch");
  long long n = 0;
  for (Eigen::Index i = 0; i < targets.size(); ++i)
    if (targets.data()[i] != VocabLayout::PAD) ++n;
  if (n == 0)
    throw ContractViolation("next_token_loss: every target position is PAD");

  if (d_logits) d_logits->setZero(logits.rows(), logits.cols());
  double total = 0;
#pragma omp parallel for schedule(static) reduction(+ : total)
  for (Eigen::Index i = 0; i < rows; ++i) {
    const int tgt = targets.data()[i];
    if (tgt == VocabLayout::PAD) continue;
    const auto row = logits.row(i);
    T mx = row.maxCoeff();
    double denom = 0;
    for (Eigen::Index j = 0; j < row.size(); ++j)
      denom += std::exp(static_cast<double>(row(j) - mx));
    const double lse = std::log(denom) + static_cast<double>(mx);
    total += lse - static_cast<double>(row(tgt));
    if (d_logits) {
      const double inv_n = 1.0 / static_cast<double>(n);
      for (Eigen::Index j = 0; j < row.size(); ++j)
        (*d_logits)(i, j) = static_cast<T>(
            std::exp(static_cast<double>(row(j) - mx)) / denom * inv_n);
      (*d_logits)(i, tgt) -= static_cast<T>(inv_n);
    }
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle for the hand-built backward pass. Central
// differences are evaluated with the ReLU branch pattern frozen at the base
// point: that is the (piecewise) function the backward pass differentiates,
// and it keeps the probe h = 1e-3 away from kink artifacts.

template <typename T>
inline double finite_diff_gradcheck(GRModel<T>& model, const TokenBatch& batch,
                                    double h = 1e-3, int probes = 100,
                                    std::uint64_t seed = 0) {
  typename GRModel<T>::Tape tape;
  model.forward(batch, false, 0, &tape);
  MatX<T> d_logits;
  next_token_loss<T>(tape.logits, batch.target, &d_logits);
  model.params.zero_grad();
  model.backward(batch, tape, d_logits, false, 0);

  auto loss = [&]() {
    auto logits = model.forward(batch, false, 0, nullptr, &tape);
    return next_token_loss<T>(logits, batch.target);
  };
  return finite_diff_max_rel_error<T>(model.params.data(),
                                      model.params.grad_data(), loss, probes, h,
                                      seed);
}

// ---------------------------------------------------------------------------
// Model input assembly.

struct ExampleTokens {
  std::vector<int> enc;     // ENC_DEC encoder tokens (empty for DEC_ONLY)
  std::vector<int> dec;     // decoder input / full context
  std::vector<int> target;  // aligned with dec; PAD = no loss
};

// history SIDs and target SID are per-level code sequences from a SIDTable.
inline ExampleTokens build_model_input_codes(
    const std::vector<const std::vector<int>*>& history_sids,
    const std::vector<int>* target_sid, const VocabLayout& vocab,
    const ModelConfig& cfg, std::optional<int> user_token) {
  ExampleTokens out;
  const std::size_t H = static_cast<std::size_t>(cfg.max_history_items);
  const std::size_t start = history_sids.size() > H ? history_sids.size() - H : 0;

  std::vector<int> flat;
  if (user_token) flat.push_back(*user_token);
  for (std::size_t i = start; i < history_sids.size(); ++i) {
    const auto& sid = *history_sids[i];
    for (std::size_t l = 0; l < sid.size(); ++l)
      flat.push_back(vocab.to_global(static_cast<int>(l), sid[l]));
  }

  if (cfg.arch == Arch::EncDec) {
    out.enc = flat.empty() ? std::vector<int>{VocabLayout::BOS} : flat;
    out.dec.push_back(VocabLayout::BOS);
    if (target_sid) {
      for (std::size_t l = 0; l < target_sid->size(); ++l) {
        int g = vocab.to_global(static_cast<int>(l), (*target_sid)[l]);
        out.target.push_back(g);
        if (l + 1 < target_sid->size()) out.dec.push_back(g);
      }
    }
  } else {
    out.dec = flat;
    out.dec.push_back(VocabLayout::BOS);
    out.target.assign(out.dec.size(), VocabLayout::PAD);
    if (target_sid) {
      for (std::size_t l = 0; l < target_sid->size(); ++l) {
        int g = vocab.to_global(static_cast<int>(l), (*target_sid)[l]);
        out.target.back() = g;
        if (l + 1 < target_sid->size()) {
          out.dec.push_back(g);
          out.target.push_back(VocabLayout::PAD);
        }
      }
    }
  }
  return out;
}

inline ExampleTokens build_model_input(const std::vector<std::string>& history,
                                       const SIDTable& table,
                                       const VocabLayout& vocab,
                                       const ModelConfig& cfg,
                                       std::optional<std::string> user_id,
                                       const std::string* target_item = nullptr) {
  std::vector<const std::vector<int>*> sids;
  sids.reserve(history.size());
  for (const auto& item : history) sids.push_back(&table.sid_of(item));
  std::optional<int> user_token;
  if (user_id && vocab.U > 0) user_token = hash_user_token(vocab, *user_id);
  const std::vector<int>* target = target_item ? &table.sid_of(*target_item) : nullptr;
  return build_model_input_codes(sids, target, vocab, cfg, user_token);
}

// Pack examples into a PAD-padded batch (pads to the longest row).
inline TokenBatch pack_batch(const std::vector<ExampleTokens>& examples,
                             Arch arch) {
  if (examples.empty()) throw ContractViolation("pack_batch: empty batch");
  TokenBatch b;
  const Eigen::Index B = static_cast<Eigen::Index>(examples.size());
  std::size_t te = 0, td = 0;
  for (const auto& e : examples) {
    te = std::max(te, e.enc.size());
    td = std::max(td, e.dec.size());
  }
  if (arch == Arch::EncDec) {
    b.enc = MatX<int>::Constant(B, static_cast<Eigen::Index>(te), VocabLayout::PAD);
    for (Eigen::Index i = 0; i < B; ++i) {
      const auto& e = examples[std::size_t(i)].enc;
      for (std::size_t j = 0; j < e.size(); ++j)
        b.enc(i, static_cast<Eigen::Index>(j)) = e[j];
      b.enc_len.push_back(static_cast<int>(e.size()));
    }
  }
  b.dec = MatX<int>::Constant(B, static_cast<Eigen::Index>(td), VocabLayout::PAD);
  b.target = MatX<int>::Constant(B, static_cast<Eigen::Index>(td), VocabLayout::PAD);
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& e = examples[std::size_t(i)];
    for (std::size_t j = 0; j < e.dec.size(); ++j)
      b.dec(i, static_cast<Eigen::Index>(j)) = e.dec[j];
    b.dec_len.push_back(static_cast<int>(e.dec.size()));
    for (std::size_t j = 0; j < e.target.size(); ++j)
      b.target(i, static_cast<Eigen::Index>(j)) = e.target[j];
  }
  return b;
}

// ---------------------------------------------------------------------------
// Checkpoint: config + vocab + raw float32 parameters (bit-exact).

inline constexpr char kModelMagic[4] = {'S', 'I', 'D', 'M'};

inline void save_model(const GRModel<float>& m, const std::string& path) {
  BinaryWriter w(path);
  w.put_bytes(kModelMagic, 4);
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(m.cfg.arch == Arch::EncDec ? 0 : 1);
  w.put<std::uint32_t>(std::uint32_t(m.cfg.layers));
  w.put<std::uint32_t>(std::uint32_t(m.cfg.heads));
  w.put<std::uint32_t>(std::uint32_t(m.cfg.d_model));
  w.put<std::uint32_t>(std::uint32_t(m.cfg.d_ff));
  w.put<std::uint32_t>(std::uint32_t(m.cfg.max_history_items));
  w.put<float>(m.cfg.dropout);
  w.put<std::uint64_t>(m.cfg.seed);
  w.put<std::uint32_t>(std::uint32_t(m.vocab.levels));
  w.put<std::uint32_t>(std::uint32_t(m.vocab.W));
  w.put<std::uint32_t>(std::uint32_t(m.vocab.D));
  w.put<std::uint32_t>(std::uint32_t(m.vocab.U));
  w.put<std::uint64_t>(m.params.size());
  w.put_bytes(m.params.data().data(), sizeof(float) * m.params.size());
  w.close();
}

inline GRModel<float> load_model(const std::string& path) {
  BinaryReader r(path);
  char magic[4];
  r.read_bytes(magic, 4);
  if (std::memcmp(magic, kModelMagic, 4) != 0)
    throw FormatError("bad magic in " + path + " (expected SIDM)");
  if (r.get<std::uint32_t>() != 1)
    throw FormatError("unsupported model checkpoint version");
  ModelConfig cfg;
  cfg.arch = r.get<std::uint32_t>() == 0 ? Arch::EncDec : Arch::DecOnly;
  cfg.layers = int(r.get<std::uint32_t>());
  cfg.heads = int(r.get<std::uint32_t>());
  cfg.d_model = int(r.get<std::uint32_t>());
  cfg.d_ff = int(r.get<std::uint32_t>());
  cfg.max_history_items = int(r.get<std::uint32_t>());
  cfg.dropout = r.get<float>();
  cfg.seed = r.get<std::uint64_t>();
  int L = int(r.get<std::uint32_t>());
  int W = int(r.get<std::uint32_t>());
  int D = int(r.get<std::uint32_t>());
  int U = int(r.get<std::uint32_t>());
  GRModel<float> m(cfg, build_vocab(L, W, D, U));
  auto count = r.get<std::uint64_t>();
  if (count != m.params.size())
    throw FormatError("model checkpoint: parameter count mismatch");
  r.read_bytes(m.params.data().data(), sizeof(float) * count);
  return m;
}

}  // namespace sidkit
