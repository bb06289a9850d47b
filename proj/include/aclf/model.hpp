#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "aclf/attention.hpp"
#include "aclf/tensor.hpp"

// The homogeneous encoder-decoder captioner: grid features in, token
// sequence out, with the same adaptive-clustering mechanism modulating
// self-attention on both sides. Clustering on either side is a config
// toggle, so the plain-transformer baseline and the one-sided variants are
// configurations of this one model.

namespace aclf {

inline constexpr int kBosId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kPadId = 2;

struct ModelConfig {
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t d_ff = 256;
  std::size_t m_e = 3;
  std::size_t m_d = 3;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t d_in = 8;
  std::size_t vocab_size = 21;
  std::size_t max_caption_len = 32;
  ClusterMode cluster_mode = ClusterMode::kLogMask;
  bool use_downup = false;
  bool acf_encoder = true;
  bool acf_decoder = true;
  std::uint64_t seed = 1;

  void validate() const {
    detail::require(d >= 2 && heads >= 1 && d % heads == 0,
                    "config: d must be >= 2 and divisible by heads");
    detail::require(m_e >= 1 && m_d >= 1,
                    "config: encoder/decoder depth must be >= 1");
    detail::require(grid_h >= 1 && grid_w >= 1, "config: empty grid");
    detail::require(d_in >= 1 && d_ff >= 2, "config: bad widths");
    detail::require(vocab_size >= 4,
                    "config: vocab must hold BOS/EOS/PAD plus words");
    detail::require(max_caption_len >= 1, "config: max_caption_len must be >= 1");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"d", d},
                          {"heads", heads},
                          {"d_ff", d_ff},
                          {"m_e", m_e},
                          {"m_d", m_d},
                          {"grid_h", grid_h},
                          {"grid_w", grid_w},
                          {"d_in", d_in},
                          {"vocab_size", vocab_size},
                          {"max_caption_len", max_caption_len},
                          {"cluster_mode", to_string(cluster_mode)},
                          {"use_downup", use_downup},
                          {"acf_encoder", acf_encoder},
                          {"acf_decoder", acf_decoder},
                          {"seed", seed}};
  }

  // strict: unknown keys are rejected (run configs); lenient parsing is for
  // checkpoint blobs that may carry extra bookkeeping fields.
  static ModelConfig from_json(const nlohmann::json& j, bool strict) {
    static const std::vector<std::string> known = {
        "d",         "heads",      "d_ff",           "m_e",
        "m_d",       "grid_h",     "grid_w",         "d_in",
        "vocab_size", "max_caption_len", "cluster_mode", "use_downup",
        "acf_encoder", "acf_decoder", "seed"};
    if (strict) {
      for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known) ok = ok || (it.key() == k);
        if (!ok)
          throw std::invalid_argument("config: unknown model key \"" +
                                      it.key() + "\"");
      }
    }
    ModelConfig c;
    if (j.contains("d")) c.d = j.at("d").get<std::size_t>();
    if (j.contains("heads")) c.heads = j.at("heads").get<std::size_t>();
    if (j.contains("d_ff")) c.d_ff = j.at("d_ff").get<std::size_t>();
    if (j.contains("m_e")) c.m_e = j.at("m_e").get<std::size_t>();
    if (j.contains("m_d")) c.m_d = j.at("m_d").get<std::size_t>();
    if (j.contains("grid_h")) c.grid_h = j.at("grid_h").get<std::size_t>();
    if (j.contains("grid_w")) c.grid_w = j.at("grid_w").get<std::size_t>();
    if (j.contains("d_in")) c.d_in = j.at("d_in").get<std::size_t>();
    if (j.contains("vocab_size"))
      c.vocab_size = j.at("vocab_size").get<std::size_t>();
    if (j.contains("max_caption_len"))
      c.max_caption_len = j.at("max_caption_len").get<std::size_t>();
    if (j.contains("cluster_mode"))
      c.cluster_mode =
          cluster_mode_from_string(j.at("cluster_mode").get<std::string>());
    if (j.contains("use_downup")) c.use_downup = j.at("use_downup").get<bool>();
    if (j.contains("acf_encoder"))
      c.acf_encoder = j.at("acf_encoder").get<bool>();
    if (j.contains("acf_decoder"))
      c.acf_decoder = j.at("acf_decoder").get<bool>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  }
};

// Deterministic sinusoidal position table, one row per position.
inline Tensor sinusoidal_table(std::size_t positions, std::size_t d) {
  Tensor t({positions, d});
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t j = 0; j < d; ++j) {
      const double expo = static_cast<double>(j - j % 2) / static_cast<double>(d);
      const double angle =
          static_cast<double>(p) / std::pow(10000.0, expo);
      t.at(p, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return t;
}

class CaptionerModel {
 public:
  explicit CaptionerModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    SplitMix64 rng(cfg_.seed);
    embedding_ = Tensor({cfg_.vocab_size, cfg_.d});
    embedding_.fill_uniform(rng, -init_limit(cfg_.vocab_size, cfg_.d),
                            init_limit(cfg_.vocab_size, cfg_.d));
    input_proj_ = Tensor({cfg_.d_in, cfg_.d});
    input_proj_.fill_uniform(rng, -init_limit(cfg_.d_in, cfg_.d),
                             init_limit(cfg_.d_in, cfg_.d));
    for (std::size_t i = 0; i < cfg_.m_e; ++i)
      enc_.push_back(
          EncoderBlockParams::init(cfg_.d, cfg_.heads, cfg_.d_ff, rng));
    for (std::size_t i = 0; i < cfg_.m_d; ++i)
      dec_.push_back(
          DecoderBlockParams::init(cfg_.d, cfg_.heads, cfg_.d_ff, rng));
    out_proj_ = Tensor({cfg_.d, cfg_.vocab_size});
    out_proj_.fill_uniform(rng, -init_limit(cfg_.d, cfg_.vocab_size),
                           init_limit(cfg_.d, cfg_.vocab_size));
    pos_tokens_ = sinusoidal_table(cfg_.max_caption_len, cfg_.d);
    pos_grid_ = sinusoidal_table(cfg_.grid_h * cfg_.grid_w, cfg_.d);
    register_params();
  }

  CaptionerModel(const CaptionerModel&) = delete;
  CaptionerModel& operator=(const CaptionerModel&) = delete;
  CaptionerModel(CaptionerModel&&) = default;
  CaptionerModel& operator=(CaptionerModel&&) = default;

  const ModelConfig& config() const { return cfg_; }

  // Stable registration order; names are unique and dotted.
  const std::vector<std::pair<std::string, Tensor>>& named_parameters() const {
    return params_;
  }

  Tensor parameter(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw std::invalid_argument("no parameter named " + name);
  }

  void zero_grads() const {
    for (const auto& [name, t] : params_) {
      (void)name;
      Tensor handle = t;  // shares storage
      handle.grad();
      handle.zero_grad();
    }
  }

  // Fresh instance with identical parameter values (for batch workers).
  CaptionerModel deep_copy() const {
    CaptionerModel other(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i)
      other.params_[i].second.values() = params_[i].second.values();
    return other;
  }

  struct EncodeResult {
    Tensor memory;                     // [grid_h*grid_w x d]
    std::vector<Tensor> cluster_trace;  // accumulated C~ per layer
  };

  EncodeResult encode(Tape& tape, const Tensor& featmap) const {
    detail::require(featmap.rank() == 2 &&
                        featmap.shape()[0] == cfg_.grid_h * cfg_.grid_w &&
                        featmap.shape()[1] == cfg_.d_in,
                    "encode: feature map must be " +
                        std::to_string(cfg_.grid_h * cfg_.grid_w) + "x" +
                        std::to_string(cfg_.d_in) + ", got " +
                        detail::shape_str(featmap.shape()));
    EncodeResult res;
    res.cluster_trace.reserve(cfg_.m_e);
    Tensor x = add(tape, matmul(tape, featmap, input_proj_), pos_grid_);
    const Tensor* prev = nullptr;
    for (std::size_t i = 0; i < cfg_.m_e; ++i) {
      BlockOutput bo =
          encoder_block(tape, enc_[i], x, prev, cfg_.grid_h, cfg_.grid_w,
                        cfg_.cluster_mode, cfg_.acf_encoder, cfg_.use_downup);
      x = bo.states;
      if (cfg_.acf_encoder) {
        res.cluster_trace.push_back(bo.c_accum);
        prev = &res.cluster_trace.back();
      }
    }
    res.memory = x;
    return res;
  }

  struct DecodeResult {
    Tensor logits;  // [t x vocab]; position i predicts token i+1
    std::vector<Tensor> cluster_trace;
  };

  DecodeResult decode_teacher_forced(Tape& tape, const Tensor& memory,
                                     const std::vector<int>& tokens) const {
    const std::size_t t = tokens.size();
    detail::require(t >= 1 && t <= cfg_.max_caption_len,
                    "decode: token count " + std::to_string(t) +
                        " outside [1," + std::to_string(cfg_.max_caption_len) +
                        "]");
    for (int id : tokens)
      detail::require(id >= 0 && static_cast<std::size_t>(id) < cfg_.vocab_size,
                      "decode: token id " + std::to_string(id) +
                          " outside vocabulary of " +
                          std::to_string(cfg_.vocab_size));
    DecodeResult res;
    res.cluster_trace.reserve(cfg_.m_d);
    Tensor x = add(tape, gather_rows(tape, embedding_, tokens),
                   row_slice(tape, pos_tokens_, 0, t));
    const Tensor* prev = nullptr;
    for (std::size_t i = 0; i < cfg_.m_d; ++i) {
      BlockOutput bo = decoder_block(tape, dec_[i], x, memory, prev,
                                     cfg_.cluster_mode, cfg_.acf_decoder);
      x = bo.states;
      if (cfg_.acf_decoder) {
        res.cluster_trace.push_back(bo.c_accum);
        prev = &res.cluster_trace.back();
      }
    }
    res.logits = matmul(tape, x, out_proj_);
    return res;
  }

 private:
  void register_params() {
    params_.clear();
    auto reg = [this](const std::string& name, const Tensor& t) {
      params_.emplace_back(name, t);
    };
    reg("embedding", embedding_);
    reg("input_proj", input_proj_);
    auto reg_attn = [&](const std::string& p, const AttentionParams& a) {
      for (std::size_t l = 0; l < a.heads; ++l) {
        reg(p + ".wq" + std::to_string(l), a.wq[l]);
        reg(p + ".wk" + std::to_string(l), a.wk[l]);
        reg(p + ".wv" + std::to_string(l), a.wv[l]);
      }
      reg(p + ".wh", a.wh);
      reg(p + ".ln_gamma", a.ln_gamma);
      reg(p + ".ln_beta", a.ln_beta);
    };
    auto reg_ff = [&](const std::string& p, const FeedForwardParams& f) {
      reg(p + ".w1", f.w1);
      reg(p + ".b1", f.b1);
      reg(p + ".w2", f.w2);
      reg(p + ".b2", f.b2);
      reg(p + ".ln_gamma", f.ln_gamma);
      reg(p + ".ln_beta", f.ln_beta);
    };
    for (std::size_t i = 0; i < cfg_.m_e; ++i) {
      const std::string p = "encoder." + std::to_string(i);
      reg_attn(p + ".self", enc_[i].self_attn);
      reg_ff(p + ".ff", enc_[i].ff);
      reg(p + ".scorer_h.weight", enc_[i].scorers.horizontal.weight);
      reg(p + ".scorer_h.bias", enc_[i].scorers.horizontal.bias);
      reg(p + ".scorer_v.weight", enc_[i].scorers.vertical.weight);
      reg(p + ".scorer_v.bias", enc_[i].scorers.vertical.bias);
    }
    for (std::size_t i = 0; i < cfg_.m_d; ++i) {
      const std::string p = "decoder." + std::to_string(i);
      reg_attn(p + ".self", dec_[i].self_attn);
      reg_attn(p + ".cross", dec_[i].cross_attn);
      reg_ff(p + ".ff", dec_[i].ff);
      reg(p + ".scorer.weight", dec_[i].scorer.weight);
      reg(p + ".scorer.bias", dec_[i].scorer.bias);
    }
    reg("out_proj", out_proj_);
  }

  ModelConfig cfg_;
  Tensor embedding_;
  Tensor input_proj_;
  std::vector<EncoderBlockParams> enc_;
  std::vector<DecoderBlockParams> dec_;
  Tensor out_proj_;
  Tensor pos_tokens_;
  Tensor pos_grid_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

// Mean cross entropy over non-pad positions; pad positions contribute
// nothing and are excluded from the denominator.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits,
                            const std::vector<int>& targets, int pad_id) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t t = logits.shape()[0], vocab = logits.shape()[1];
  detail::require(targets.size() == t,
                  "cross_entropy: " + std::to_string(targets.size()) +
                      " targets for " + std::to_string(t) + " rows");
  std::size_t live = 0;
  for (int id : targets) {
    if (id == pad_id) continue;
    detail::require(id >= 0 && static_cast<std::size_t>(id) < vocab,
                    "cross_entropy: target id out of range");
    ++live;
  }
  detail::require(live > 0, "cross_entropy: all targets are padding");

  const double inv = 1.0 / static_cast<double>(live);
  double total = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (targets[i] == pad_id) continue;
    const double* row = logits.data() + i * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(row[j] - mx);
    total += (mx + std::log(sum)) - row[static_cast<std::size_t>(targets[i])];
  }
  Tensor loss = Tensor::scalar(total * inv);
  if (tape.enabled()) {
    auto ln = logits.node(), on = loss.node();
    tape.record("cross_entropy", loss, [ln, on, targets, pad_id, vocab, inv] {
      const double g = on->grad[0] * inv;
      ln->ensure_grad();
      for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] == pad_id) continue;
        const double* row = ln->data.data() + i * vocab;
        double mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(row[j] - mx);
        double* drow = ln->grad.data() + i * vocab;
        for (std::size_t j = 0; j < vocab; ++j) {
          double p = std::exp(row[j] - mx) / sum;
          if (j == static_cast<std::size_t>(targets[i])) p -= 1.0;
          drow[j] += g * p;
        }
      }
    });
  }
  return loss;
}

// Greedy decoding: argmax token per step (first maximum on ties), stopping
// at EOS or the caption length cap. The clustering matrix is recomputed over
// the whole prefix each step. Returns generated word ids, EOS excluded.
inline std::vector<int> generate_greedy(const CaptionerModel& model,
                                        const Tensor& featmap) {
  Tape tape;
  tape.set_enabled(false);
  const auto enc = model.encode(tape, featmap);
  std::vector<int> context = {kBosId};
  std::vector<int> out;
  const std::size_t cap = model.config().max_caption_len;
  for (std::size_t step = 0; step < cap; ++step) {
    const auto dec = model.decode_teacher_forced(tape, enc.memory, context);
    const std::size_t vocab = model.config().vocab_size;
    const double* row = dec.logits.data() + (context.size() - 1) * vocab;
    std::size_t best = 0;
    for (std::size_t j = 1; j < vocab; ++j)
      if (row[j] > row[best]) best = j;
    if (static_cast<int>(best) == kEosId) break;
    out.push_back(static_cast<int>(best));
    context.push_back(static_cast<int>(best));
  }
  return out;
}

// Beam search with length-normalized final selection. beam_width 1 follows
// the greedy path exactly.
inline std::vector<int> generate_beam(const CaptionerModel& model,
                                      const Tensor& featmap,
                                      std::size_t beam_width) {
  detail::require(beam_width >= 1, "generate_beam: width must be >= 1");
  Tape tape;
  tape.set_enabled(false);
  const auto enc = model.encode(tape, featmap);
  const std::size_t vocab = model.config().vocab_size;
  const std::size_t cap = model.config().max_caption_len;

  struct Beam {
    std::vector<int> toks;
    double logp = 0.0;
    bool done = false;
  };
  std::vector<Beam> beams = {Beam{}};

  for (std::size_t step = 0; step < cap; ++step) {
    bool any_open = false;
    std::vector<Beam> candidates;
    for (const Beam& b : beams) {
      if (b.done) {
        candidates.push_back(b);
        continue;
      }
      any_open = true;
      std::vector<int> context = {kBosId};
      context.insert(context.end(), b.toks.begin(), b.toks.end());
      const auto dec = model.decode_teacher_forced(tape, enc.memory, context);
      const double* row = dec.logits.data() + (context.size() - 1) * vocab;
      double mx = row[0];
      for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(row[j] - mx);
      const double lse = mx + std::log(sum);
      for (std::size_t j = 0; j < vocab; ++j) {
        Beam nb = b;
        nb.logp += row[j] - lse;
        if (static_cast<int>(j) == kEosId)
          nb.done = true;
        else
          nb.toks.push_back(static_cast<int>(j));
        candidates.push_back(std::move(nb));
      }
    }
    if (!any_open) break;
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Beam& a, const Beam& b) {
                       if (a.logp != b.logp) return a.logp > b.logp;
                       return a.toks < b.toks;
                     });
    if (candidates.size() > beam_width) candidates.resize(beam_width);
    beams = std::move(candidates);
  }

  const Beam* best = nullptr;
  double best_score = -std::numeric_limits<double>::infinity();
  for (const Beam& b : beams) {
    const double len =
        static_cast<double>(b.toks.size() + (b.done ? 1 : 0));
    const double score = b.logp / std::max(1.0, len);
    if (best == nullptr || score > best_score) {
      best = &b;
      best_score = score;
    }
  }
  return best == nullptr ? std::vector<int>{} : best->toks;
}

}  // namespace aclf
