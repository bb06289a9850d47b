#pragma once

#include <string>
#include <vector>

#include "aclf/cluster1d.hpp"
#include "aclf/cluster2d.hpp"
#include "aclf/tensor.hpp"

// Multi-head attention with an optional clustering modulation matrix shared
// across heads, plus the encoder/decoder blocks that combine it with the
// feed-forward sublayer. Three readings of the modulation are implemented
// and selectable per model; log-mask is the default.

namespace aclf {

enum class ClusterMode {
  kLogitScale,  // scores * C before softmax
  kLogMask,     // scores + log C (clamped at -1e9) before softmax
  kPostRenorm,  // softmax, then * C, then row renormalization
};

inline std::string to_string(ClusterMode m) {
  switch (m) {
    case ClusterMode::kLogitScale: return "logit-scale";
    case ClusterMode::kLogMask: return "log-mask";
    case ClusterMode::kPostRenorm: return "post-renorm";
  }
  return "log-mask";
}

inline ClusterMode cluster_mode_from_string(const std::string& s) {
  if (s == "logit-scale") return ClusterMode::kLogitScale;
  if (s == "log-mask") return ClusterMode::kLogMask;
  if (s == "post-renorm") return ClusterMode::kPostRenorm;
  throw std::invalid_argument("unknown cluster mode: " + s);
}

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kLogMaskFloor = -1e9;
inline constexpr double kRenormEps = 1e-12;

struct AttentionParams {
  std::size_t heads = 0;
  std::vector<Tensor> wq, wk, wv;  // per head, [d x d/h]
  Tensor wh;                       // [d x d]
  Tensor ln_gamma, ln_beta;        // [d]

  static AttentionParams init(std::size_t d, std::size_t h, SplitMix64& rng) {
    detail::require(h >= 1 && d % h == 0,
                    "attention: head count must divide model width");
    const std::size_t dh = d / h;
    AttentionParams p;
    p.heads = h;
    const double lim = init_limit(d, dh);
    for (std::size_t l = 0; l < h; ++l) {
      Tensor q({d, dh}), k({d, dh}), v({d, dh});
      q.fill_uniform(rng, -lim, lim);
      k.fill_uniform(rng, -lim, lim);
      v.fill_uniform(rng, -lim, lim);
      p.wq.push_back(q);
      p.wk.push_back(k);
      p.wv.push_back(v);
    }
    p.wh = Tensor({d, d});
    p.wh.fill_uniform(rng, -init_limit(d, d), init_limit(d, d));
    p.ln_gamma = Tensor({d}, std::vector<double>(d, 1.0));
    p.ln_beta = Tensor({d});
    return p;
  }
};

// Post-softmax attention rows per head, captured when a caller passes a sink.
struct AttentionDebug {
  std::vector<Tensor> head_attention;
};

// Causal additive mask: 0 at or below the diagonal, -inf above.
inline Tensor causal_mask(std::size_t t) {
  Tensor m({t, t});
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m.at(i, j) = neg_inf;
  return m;
}

inline Tensor multi_head_attention(Tape& tape, const AttentionParams& params,
                                   const Tensor& q, const Tensor& k,
                                   const Tensor& v,
                                   const Tensor* modulation = nullptr,
                                   const Tensor* additive_mask = nullptr,
                                   ClusterMode mode = ClusterMode::kLogMask,
                                   AttentionDebug* debug = nullptr) {
  detail::require_matrix(q, "attention query");
  detail::require_matrix(k, "attention key");
  detail::require_matrix(v, "attention value");
  const std::size_t n_q = q.shape()[0], d = q.shape()[1];
  const std::size_t n_k = k.shape()[0];
  detail::require(k.shape()[1] == d && v.shape()[1] == d,
                  "attention: query/key/value width mismatch");
  detail::require(v.shape()[0] == n_k, "attention: key/value length mismatch");
  if (modulation != nullptr) {
    detail::require(modulation->rows() == n_q && modulation->cols() == n_k,
                    "attention: modulation shape mismatch");
    for (std::size_t i = 0; i < modulation->size(); ++i) {
      const double c = modulation->data()[i];
      detail::require(c >= 0.0 && c <= 1.0,
                      "attention: modulation entry " + std::to_string(c) +
                          " outside [0,1]");
    }
  }
  if (additive_mask != nullptr)
    detail::require(additive_mask->rows() == n_q &&
                        additive_mask->cols() == n_k,
                    "attention: mask shape mismatch");

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor log_mod;  // shared across heads in log-mask mode
  if (modulation != nullptr && mode == ClusterMode::kLogMask)
    log_mod = log_clamped(tape, *modulation, kLogMaskFloor);

  std::vector<Tensor> heads;
  heads.reserve(params.heads);
  for (std::size_t l = 0; l < params.heads; ++l) {
    Tensor ql = matmul(tape, q, params.wq[l]);
    Tensor kl = matmul(tape, k, params.wk[l]);
    Tensor vl = matmul(tape, v, params.wv[l]);
    Tensor scores =
        affine(tape, matmul(tape, ql, transpose(tape, kl)), scale, 0.0);
    if (!scores.all_finite())
      throw NumericError("attention: non-finite scores");

    Tensor attn;
    if (modulation == nullptr) {
      if (additive_mask != nullptr) scores = add(tape, scores, *additive_mask);
      attn = softmax_rows(tape, scores);
    } else if (mode == ClusterMode::kLogitScale) {
      scores = mul(tape, scores, *modulation);
      if (additive_mask != nullptr) scores = add(tape, scores, *additive_mask);
      attn = softmax_rows(tape, scores);
    } else if (mode == ClusterMode::kLogMask) {
      scores = add(tape, scores, log_mod);
      if (additive_mask != nullptr) scores = add(tape, scores, *additive_mask);
      attn = softmax_rows(tape, scores);
    } else {  // kPostRenorm
      if (additive_mask != nullptr) scores = add(tape, scores, *additive_mask);
      attn = softmax_rows(tape, scores);
      attn = div_rowsum(tape, mul(tape, attn, *modulation), kRenormEps);
    }
    if (debug != nullptr) debug->head_attention.push_back(attn);
    heads.push_back(matmul(tape, attn, vl));
  }

  Tensor merged = matmul(tape, concat_cols(tape, heads), params.wh);
  return layer_norm(tape, add(tape, merged, q), params.ln_gamma,
                    params.ln_beta, kLayerNormEps);
}

struct FeedForwardParams {
  Tensor w1, b1;  // [d x d_ff], [d_ff]
  Tensor w2, b2;  // [d_ff x d], [d]
  Tensor ln_gamma, ln_beta;

  static FeedForwardParams init(std::size_t d, std::size_t d_ff,
                                SplitMix64& rng) {
    FeedForwardParams p;
    p.w1 = Tensor({d, d_ff});
    p.w1.fill_uniform(rng, -init_limit(d, d_ff), init_limit(d, d_ff));
    p.b1 = Tensor({d_ff});
    p.w2 = Tensor({d_ff, d});
    p.w2.fill_uniform(rng, -init_limit(d_ff, d), init_limit(d_ff, d));
    p.b2 = Tensor({d});
    p.ln_gamma = Tensor({d}, std::vector<double>(d, 1.0));
    p.ln_beta = Tensor({d});
    return p;
  }
};

// Position-wise feed-forward with a smooth sigmoid gate, residual and LN.
inline Tensor feed_forward(Tape& tape, const FeedForwardParams& p,
                           const Tensor& x) {
  Tensor h1 = add_rowvec(tape, matmul(tape, x, p.w1), p.b1);
  Tensor gated = mul(tape, h1, sigmoid(tape, h1));
  Tensor h2 = add_rowvec(tape, matmul(tape, gated, p.w2), p.b2);
  return layer_norm(tape, add(tape, h2, x), p.ln_gamma, p.ln_beta,
                    kLayerNormEps);
}

struct EncoderBlockParams {
  AttentionParams self_attn;
  FeedForwardParams ff;
  DirectionalScorers scorers;

  static EncoderBlockParams init(std::size_t d, std::size_t h,
                                 std::size_t d_ff, SplitMix64& rng) {
    EncoderBlockParams p;
    p.self_attn = AttentionParams::init(d, h, rng);
    p.ff = FeedForwardParams::init(d, d_ff, rng);
    p.scorers = DirectionalScorers::init(d, rng);
    return p;
  }
};

struct DecoderBlockParams {
  AttentionParams self_attn;
  AttentionParams cross_attn;
  FeedForwardParams ff;
  MergeScorer scorer;

  static DecoderBlockParams init(std::size_t d, std::size_t h,
                                 std::size_t d_ff, SplitMix64& rng) {
    DecoderBlockParams p;
    p.self_attn = AttentionParams::init(d, h, rng);
    p.cross_attn = AttentionParams::init(d, h, rng);
    p.ff = FeedForwardParams::init(d, d_ff, rng);
    p.scorer = MergeScorer::init(d, rng);
    return p;
  }
};

struct BlockOutput {
  Tensor states;
  Tensor c_accum;  // undefined when clustering is off
};

// Encoder block: 2-D clustering from this block's input, cross-layer
// accumulation, modulated self-attention, feed-forward.
inline BlockOutput encoder_block(Tape& tape, const EncoderBlockParams& params,
                                 const Tensor& x, const Tensor* c_prev,
                                 std::size_t grid_h, std::size_t grid_w,
                                 ClusterMode mode, bool use_clustering,
                                 bool use_downup) {
  detail::require(x.rows() == grid_h * grid_w,
                  "encoder_block: expected " +
                      std::to_string(grid_h * grid_w) + " cells, got " +
                      std::to_string(x.rows()));
  BlockOutput out;
  const Tensor* mod = nullptr;
  if (use_clustering) {
    Tensor c =
        encoder_pairwise(tape, params.scorers, x, grid_h, grid_w, use_downup);
    out.c_accum = accumulate_layers(tape, c, c_prev);
    mod = &out.c_accum;
  }
  Tensor attn =
      multi_head_attention(tape, params.self_attn, x, x, x, mod, nullptr, mode);
  out.states = feed_forward(tape, params.ff, attn);
  return out;
}

// Decoder block: 1-D clustering over the token states, causal modulated
// self-attention, unmodulated cross-attention over the encoder memory,
// feed-forward. Entries of C above the diagonal depend on future tokens but
// the causal mask removes them from every position's context, so outputs at
// position i depend on tokens <= i only.
inline BlockOutput decoder_block(Tape& tape, const DecoderBlockParams& params,
                                 const Tensor& x, const Tensor& memory,
                                 const Tensor* c_prev, ClusterMode mode,
                                 bool use_clustering) {
  detail::require(x.rows() >= 1, "decoder_block: empty input");
  BlockOutput out;
  const Tensor* mod = nullptr;
  if (use_clustering) {
    ClusterMatrix1D c = cluster_matrix_1d(tape, params.scorer, x);
    out.c_accum = accumulate_layers(tape, c.values, c_prev);
    mod = &out.c_accum;
  }
  Tensor mask = causal_mask(x.rows());
  Tensor self = multi_head_attention(tape, params.self_attn, x, x, x, mod,
                                     &mask, mode);
  Tensor cross = multi_head_attention(tape, params.cross_attn, self, memory,
                                      memory, nullptr, nullptr, mode);
  out.states = feed_forward(tape, params.ff, cross);
  return out;
}

}  // namespace aclf
