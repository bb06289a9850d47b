#pragma once

#include <atomic>
#include <cstdint>
#include <vector>

#include "aclf/tensor.hpp"

// 1-D adaptive clustering. C[i][j] is the probability that the contiguous
// span i..j forms one attention cluster: the product over the span of
// per-element merge conditionals, each a sigmoid over the candidate element
// concatenated with the mean-pooled prefix. Accumulated in log space and
// exponentiated once per cell so long spans keep full precision.

namespace aclf {

// Instrumented call counter for the merge conditional; complexity assertions
// compare this against the exhaustive reference path.
inline std::atomic<std::uint64_t>& merge_call_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}
inline void reset_merge_call_count() { merge_call_count().store(0); }

// The learned merge conditional: weight over [candidate, span mean], bias.
struct MergeScorer {
  Tensor weight;  // [2d x 1]
  Tensor bias;    // [1]

  static MergeScorer init(std::size_t d, SplitMix64& rng) {
    MergeScorer s;
    s.weight = Tensor({2 * d, 1});
    s.weight.fill_uniform(rng, -init_limit(2 * d, 1), init_limit(2 * d, 1));
    s.bias = Tensor({1});
    return s;
  }

  std::size_t input_dim() const { return weight.shape()[0] / 2; }
};

// Fused merge logit: w . [s_k, mean(s_i..s_{k-1})] + b as one tape node.
// Requires i < k; the conditional is undefined otherwise.
inline Tensor span_merge_logit(Tape& tape, const MergeScorer& scorer,
                               const Tensor& seq, std::size_t i,
                               std::size_t k) {
  detail::require_matrix(seq, "span_merge_logit");
  const std::size_t n = seq.shape()[0], d = seq.shape()[1];
  detail::require(i < k && k < n,
                  "span_merge_logit: need i < k < n, got i=" +
                      std::to_string(i) + " k=" + std::to_string(k) +
                      " n=" + std::to_string(n));
  detail::require(scorer.weight.size() == 2 * d && scorer.bias.size() == 1,
                  "span_merge_logit: scorer sized for d=" +
                      std::to_string(scorer.input_dim()) +
                      ", sequence has d=" + std::to_string(d));
  merge_call_count().fetch_add(1, std::memory_order_relaxed);

  const double inv = 1.0 / static_cast<double>(k - i);
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = i; r < k; ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += seq.at(r, j) * inv;
  const double* w = scorer.weight.data();
  double z = scorer.bias.data()[0];
  for (std::size_t j = 0; j < d; ++j) z += w[j] * seq.at(k, j);
  for (std::size_t j = 0; j < d; ++j) z += w[d + j] * mean[j];

  Tensor out = Tensor::scalar(z);
  if (tape.enabled()) {
    auto sn = seq.node(), wn = scorer.weight.node(), bn = scorer.bias.node(),
         on = out.node();
    tape.record("span_merge_logit", out,
                [sn, wn, bn, on, i, k, d, inv, mean = std::move(mean)] {
                  sn->ensure_grad();
                  wn->ensure_grad();
                  bn->ensure_grad();
                  const double dz = on->grad[0];
                  bn->grad[0] += dz;
                  for (std::size_t j = 0; j < d; ++j) {
                    wn->grad[j] += dz * sn->data[k * d + j];
                    wn->grad[d + j] += dz * mean[j];
                    sn->grad[k * d + j] += dz * wn->data[j];
                  }
                  for (std::size_t r = i; r < k; ++r)
                    for (std::size_t j = 0; j < d; ++j)
                      sn->grad[r * d + j] += dz * wn->data[d + j] * inv;
                });
  }
  return out;
}

inline Tensor merge_probability(Tape& tape, const MergeScorer& scorer,
                                const Tensor& seq, std::size_t i,
                                std::size_t k) {
  return sigmoid(tape, span_merge_logit(tape, scorer, seq, i, k));
}

inline Tensor merge_log_probability(Tape& tape, const MergeScorer& scorer,
                                    const Tensor& seq, std::size_t i,
                                    std::size_t k) {
  return logsigmoid(tape, span_merge_logit(tape, scorer, seq, i, k));
}

// n x n clustering matrix: unit diagonal, symmetric, entries in [0,1],
// monotone decay away from the diagonal.
struct ClusterMatrix1D {
  std::size_t n = 0;
  Tensor values;  // [n x n]
};

namespace detail {
// Packed index of the strict upper triangle cell (i, j), i < j.
inline std::size_t upper_index(std::size_t i, std::size_t j, std::size_t n) {
  return i * n - i * (i + 1) / 2 + (j - i - 1);
}
}  // namespace detail

inline ClusterMatrix1D cluster_matrix_1d(Tape& tape, const MergeScorer& scorer,
                                         const Tensor& seq) {
  detail::require_matrix(seq, "cluster_matrix_1d");
  const std::size_t n = seq.shape()[0];
  detail::require(n >= 1, "cluster_matrix_1d: empty sequence");

  // Cumulative log probabilities per anchor: cum[(i,j)] = sum of the merge
  // conditionals over i..j.
  std::vector<Tensor> cum;
  cum.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor running;
    for (std::size_t j = i + 1; j < n; ++j) {
      Tensor lp = merge_log_probability(tape, scorer, seq, i, j);
      running = running.defined() ? add(tape, running, lp) : lp;
      cum.push_back(running);
    }
  }

  std::vector<int> idx(n * n, -1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const int cell = static_cast<int>(detail::upper_index(i, j, n));
      idx[i * n + j] = cell;
      idx[j * n + i] = cell;  // clustering i..j equals clustering j..i
    }
  Tensor log_c = assemble_indexed(tape, cum, idx, n, n);
  ClusterMatrix1D out;
  out.n = n;
  out.values = exp_elem(tape, log_c);
  return out;
}

// Convex blend toward 1 across layers: C~ = (1 - C) C~_prev + C. With no
// previous layer the current matrix passes through unchanged.
inline Tensor accumulate_layers(Tape& tape, const Tensor& c_current,
                                const Tensor* c_prev) {
  if (c_prev == nullptr || !c_prev->defined()) return c_current;
  detail::require(c_current.shape() == c_prev->shape(),
                  "accumulate_layers: shape mismatch " +
                      detail::shape_str(c_current.shape()) + " vs " +
                      detail::shape_str(c_prev->shape()));
  Tensor keep = affine(tape, c_current, -1.0, 1.0);
  return add(tape, mul(tape, keep, *c_prev), c_current);
}

// Halve a sequence by mean-pooling adjacent pairs; an odd tail element forms
// a singleton group.
inline Tensor downsample_sequence(Tape& tape, const Tensor& seq) {
  detail::require_matrix(seq, "downsample_sequence");
  const std::size_t n = seq.shape()[0];
  detail::require(n >= 1, "downsample_sequence: empty sequence");
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; i += 2) {
    if (i + 1 < n)
      groups.push_back({i, i + 1});
    else
      groups.push_back({i});
  }
  return pool_rows_groups(tape, seq, groups);
}

// Expand a half-resolution clustering matrix back to length n by the block
// index rule C[i][j] = C_small[i/2][j/2].
inline Tensor upsample_matrix(Tape& tape, const Tensor& c_small,
                              std::size_t n) {
  detail::require_matrix(c_small, "upsample_matrix");
  const std::size_t ns = c_small.shape()[0];
  detail::require(c_small.shape()[1] == ns, "upsample_matrix: not square");
  detail::require(ns == (n + 1) / 2,
                  "upsample_matrix: matrix over " + std::to_string(ns) +
                      " cannot expand to length " + std::to_string(n));
  std::vector<std::size_t> map(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      map[i * n + j] = (i / 2) * ns + (j / 2);
  return gather_entries(tape, c_small, map, n, n);
}

}  // namespace aclf
