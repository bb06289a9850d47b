#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "aclf/attention.hpp"
#include "aclf/cluster1d.hpp"
#include "aclf/cluster2d.hpp"
#include "aclf/rng.hpp"
#include "aclf/tensor.hpp"

// Slow, obviously-correct reference implementations used only by tests and
// the gradient-check command. These read parameter values but share no code
// path with the production modules they check: plain loops, naive products,
// no tape, no log-space accumulation.

namespace aclf::oracle {

inline std::atomic<std::uint64_t>& oracle_merge_call_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}
inline void reset_oracle_merge_call_count() {
  oracle_merge_call_count().store(0);
}

namespace ref {
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
}  // namespace ref

// Merge conditional on a line of cells, recomputed from scratch: explicit
// mean over the anchored prefix, explicit concatenation order [candidate,
// prefix mean], dot product, sigmoid.
inline double ref_merge_probability(const MergeScorer& scorer,
                                    const std::vector<double>& line,
                                    std::size_t d, std::size_t anchor,
                                    std::size_t k) {
  oracle_merge_call_count().fetch_add(1, std::memory_order_relaxed);
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = anchor; r < k; ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += line[r * d + j];
  for (std::size_t j = 0; j < d; ++j)
    mean[j] /= static_cast<double>(k - anchor);
  double z = scorer.bias.data()[0];
  for (std::size_t j = 0; j < d; ++j)
    z += scorer.weight.data()[j] * line[k * d + j];
  for (std::size_t j = 0; j < d; ++j)
    z += scorer.weight.data()[d + j] * mean[j];
  return ref::sigmoid(z);
}

// Direct evaluation of the clustering matrix: every cell is its own naive
// product of conditionals, no recurrence, no log-space.
inline std::vector<double> ref_cluster_1d(const MergeScorer& scorer,
                                          const Tensor& seq) {
  const std::size_t n = seq.rows(), d = seq.cols();
  const std::vector<double>& line = seq.values();
  std::vector<double> c(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) c[i * n + i] = 1.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double prod = 1.0;
      for (std::size_t k = i + 1; k <= j; ++k)
        prod *= ref_merge_probability(scorer, line, d, i, k);
      c[i * n + j] = prod;
      c[j * n + i] = prod;
    }
  return c;
}

// Exhaustive 4-index rectangle table: every rectangle's horizontal and
// vertical chains evaluated independently from scratch.
struct Ref2DTable {
  std::size_t h = 0, w = 0;
  std::vector<double> probs;  // [r0][r1][c0][c1]

  double at(std::size_t r0, std::size_t r1, std::size_t c0,
            std::size_t c1) const {
    return probs[((r0 * h + r1) * w + c0) * w + c1];
  }
};

inline Ref2DTable ref_cluster_2d(const DirectionalScorers& scorers,
                                 const Tensor& featmap, std::size_t h,
                                 std::size_t w) {
  Ref2DTable table;
  table.h = h;
  table.w = w;
  table.probs.assign(h * h * w * w, 0.0);
  const std::size_t d = featmap.cols();
  for (std::size_t r0 = 0; r0 < h; ++r0)
    for (std::size_t r1 = r0; r1 < h; ++r1)
      for (std::size_t c0 = 0; c0 < w; ++c0)
        for (std::size_t c1 = c0; c1 < w; ++c1) {
          std::vector<double> top_row(w * d), left_col(h * d);
          for (std::size_t c = 0; c < w; ++c)
            for (std::size_t j = 0; j < d; ++j)
              top_row[c * d + j] = featmap.at(r0 * w + c, j);
          for (std::size_t r = 0; r < h; ++r)
            for (std::size_t j = 0; j < d; ++j)
              left_col[r * d + j] = featmap.at(r * w + c0, j);
          double p = 1.0;
          for (std::size_t k = c0 + 1; k <= c1; ++k)
            p *= ref_merge_probability(scorers.horizontal, top_row, d, c0, k);
          for (std::size_t u = r0 + 1; u <= r1; ++u)
            p *= ref_merge_probability(scorers.vertical, left_col, d, r0, u);
          table.probs[((r0 * h + r1) * w + c0) * w + c1] = p;
        }
  return table;
}

// Bounding-rectangle flattening of the exhaustive table, for comparison with
// the production pairwise matrix.
inline std::vector<double> ref_flatten_pairwise(const Ref2DTable& table) {
  const std::size_t n = table.h * table.w;
  std::vector<double> pw(n * n, 0.0);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v) {
      const std::size_t ru = u / table.w, cu = u % table.w;
      const std::size_t rv = v / table.w, cv = v % table.w;
      pw[u * n + v] = table.at(std::min(ru, rv), std::max(ru, rv),
                               std::min(cu, cv), std::max(cu, cv));
    }
  return pw;
}

// Naive multi-head attention written as explicit per-head loops, including
// the modulation modes, output projection, residual and layer norm.
inline std::vector<double> ref_attention(const AttentionParams& params,
                                         const Tensor& q, const Tensor& k,
                                         const Tensor& v,
                                         const Tensor* modulation,
                                         const Tensor* mask,
                                         ClusterMode mode) {
  const std::size_t n_q = q.rows(), n_k = k.rows(), d = q.cols();
  const std::size_t heads = params.heads, dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  auto project = [&](const Tensor& x, const Tensor& wmat, std::size_t rows) {
    std::vector<double> out(rows * dh, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < dh; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c)
          acc += x.at(i, c) * wmat.at(c, j);
        out[i * dh + j] = acc;
      }
    return out;
  };

  std::vector<double> concat(n_q * d, 0.0);
  for (std::size_t l = 0; l < heads; ++l) {
    const auto ql = project(q, params.wq[l], n_q);
    const auto kl = project(k, params.wk[l], n_k);
    const auto vl = project(v, params.wv[l], n_k);

    std::vector<double> scores(n_q * n_k, 0.0);
    for (std::size_t i = 0; i < n_q; ++i)
      for (std::size_t j = 0; j < n_k; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c)
          acc += ql[i * dh + c] * kl[j * dh + c];
        scores[i * n_k + j] = acc * scale;
      }

    if (modulation != nullptr && mode == ClusterMode::kLogitScale)
      for (std::size_t p = 0; p < scores.size(); ++p)
        scores[p] *= modulation->data()[p];
    if (modulation != nullptr && mode == ClusterMode::kLogMask)
      for (std::size_t p = 0; p < scores.size(); ++p) {
        const double c = modulation->data()[p];
        scores[p] += c > 0.0 ? std::max(std::log(c), kLogMaskFloor)
                             : kLogMaskFloor;
      }
    if (mask != nullptr)
      for (std::size_t p = 0; p < scores.size(); ++p)
        scores[p] += mask->data()[p];

    std::vector<double> attn(n_q * n_k, 0.0);
    for (std::size_t i = 0; i < n_q; ++i) {
      double mx = scores[i * n_k];
      for (std::size_t j = 1; j < n_k; ++j)
        mx = std::max(mx, scores[i * n_k + j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < n_k; ++j) {
        attn[i * n_k + j] = std::exp(scores[i * n_k + j] - mx);
        sum += attn[i * n_k + j];
      }
      for (std::size_t j = 0; j < n_k; ++j) attn[i * n_k + j] /= sum;
    }
    if (modulation != nullptr && mode == ClusterMode::kPostRenorm) {
      for (std::size_t p = 0; p < attn.size(); ++p)
        attn[p] *= modulation->data()[p];
      for (std::size_t i = 0; i < n_q; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < n_k; ++j) sum += attn[i * n_k + j];
        const double denom = std::max(sum, kRenormEps);
        for (std::size_t j = 0; j < n_k; ++j) attn[i * n_k + j] /= denom;
      }
    }

    for (std::size_t i = 0; i < n_q; ++i)
      for (std::size_t j = 0; j < dh; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < n_k; ++t)
          acc += attn[i * n_k + t] * vl[t * dh + j];
        concat[i * d + l * dh + j] = acc;
      }
  }

  std::vector<double> out(n_q * d, 0.0);
  for (std::size_t i = 0; i < n_q; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c)
        acc += concat[i * d + c] * params.wh.at(c, j);
      out[i * d + j] = acc + q.at(i, j);  // residual
    }
  for (std::size_t i = 0; i < n_q; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += out[i * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = out[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = (out[i * d + j] - mean) * inv * params.ln_gamma.data()[j] +
                       params.ln_beta.data()[j];
  }
  return out;
}

// Central finite differences on a seeded sample of coordinates, compared
// against the tape gradients left by loss_with_grads.
struct FiniteDiffReport {
  struct Entry {
    std::string name;
    std::size_t sampled = 0;
    double max_rel_err = 0.0;
    std::size_t argmax = 0;     // flat coordinate of the worst error
    double analytic_at = 0.0;   // analytic gradient there
    double fd_at = 0.0;         // finite difference there
    double max_abs_fd = 0.0;    // largest |fd| seen for this parameter
  };
  std::vector<Entry> per_param;
  double step = 0.0;
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

inline FiniteDiffReport finite_diff(
    const std::function<double()>& loss_forward,
    const std::function<double()>& loss_with_grads,
    const std::vector<std::pair<std::string, Tensor>>& params,
    double sample_fraction, double step, std::uint64_t seed) {
  detail::require(step > 0.0, "finite_diff: step must be positive");
  detail::require(sample_fraction > 0.0 && sample_fraction <= 1.0,
                  "finite_diff: sample fraction must be in (0,1]");

  for (const auto& [name, t] : params) {
    (void)name;
    Tensor handle = t;
    handle.grad();
    handle.zero_grad();
  }
  loss_with_grads();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, t] : params) {
    (void)name;
    analytic.push_back(t.grad());
  }

  SplitMix64 rng(seed);
  FiniteDiffReport report;
  report.step = step;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p].second;
    const std::size_t n = t.size();
    std::size_t want = static_cast<std::size_t>(
        std::ceil(sample_fraction * static_cast<double>(n)));
    want = std::max<std::size_t>(1, std::min(want, n));
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    for (std::size_t i = 0; i < want; ++i) {
      const std::size_t j = i + rng.next_below(n - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(want);

    FiniteDiffReport::Entry entry;
    entry.name = params[p].first;
    entry.sampled = want;
    for (std::size_t c : coords) {
      const double saved = t.data()[c];
      t.data()[c] = saved + step;
      const double f_plus = loss_forward();
      t.data()[c] = saved - step;
      const double f_minus = loss_forward();
      t.data()[c] = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
        throw NumericError("finite_diff: non-finite loss probing " +
                           entry.name + " coordinate " + std::to_string(c));
      const double fd = (f_plus - f_minus) / (2.0 * step);
      const double an = analytic[p][c];
      const double rel = std::abs(fd - an) /
                         std::max({std::abs(fd), std::abs(an), 1e-8});
      entry.max_abs_fd = std::max(entry.max_abs_fd, std::abs(fd));
      if (rel >= entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.argmax = c;
        entry.analytic_at = an;
        entry.fd_at = fd;
      }
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = entry.name;
        report.worst_index = c;
      }
    }
    report.per_param.push_back(std::move(entry));
  }
  return report;
}

}  // namespace aclf::oracle
