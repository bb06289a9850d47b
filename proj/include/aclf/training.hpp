#pragma once

#include <cmath>
#include <string>
#include <thread>
#include <vector>

#include "aclf/model.hpp"

// Training loop pieces: the adaptive-moment optimizer and the deterministic
// batch step. Batch members run on independent model copies (one per worker
// thread); their gradients are reduced in sample-index order, so the result
// is bit-identical regardless of thread count.

namespace aclf {

class AdamOptimizer {
 public:
  AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  std::uint64_t step_count() const { return t_; }
  void set_step_count(std::uint64_t t) { t_ = t; }

  // One update from the gradients currently stored on the parameters.
  void step(const std::vector<std::pair<std::string, Tensor>>& params,
            double lr) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        m_[p].assign(params[p].second.size(), 0.0);
        v_[p].assign(params[p].second.size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor t = params[p].second;
      const std::vector<double>& g = t.grad();
      double* x = t.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        m_[p][i] = beta1_ * m_[p][i] + (1.0 - beta1_) * g[i];
        v_[p][i] = beta2_ * v_[p][i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = m_[p][i] / bc1;
        const double vhat = v_[p][i] / bc2;
        x[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainSample {
  Tensor featmap;           // [grid_h*grid_w x d_in]
  std::vector<int> tokens;  // full caption ids including BOS and EOS
};

namespace detail {

// Teacher-forced CE for one sample; gradients land on the given model's
// parameters (caller zeroes them). Throws NumericError naming the first
// non-finite tensor on the tape if the loss degenerates.
inline double sample_loss(const CaptionerModel& model, const TrainSample& s,
                          bool with_grads) {
  require(s.tokens.size() >= 2, "train sample: caption needs BOS and EOS");
  Tape tape;
  tape.set_enabled(with_grads);
  const auto enc = model.encode(tape, s.featmap);
  std::vector<int> input(s.tokens.begin(), s.tokens.end() - 1);
  std::vector<int> targets(s.tokens.begin() + 1, s.tokens.end());
  const auto dec = model.decode_teacher_forced(tape, enc.memory, input);
  Tensor loss = cross_entropy(tape, dec.logits, targets, kPadId);
  if (!std::isfinite(loss.item())) {
    const std::string where = tape.first_nonfinite();
    throw NumericError("non-finite training loss; first non-finite tensor: " +
                       (where.empty() ? std::string("loss") : where));
  }
  if (with_grads) {
    loss.grad()[0] = 1.0;
    tape.backward();
  }
  return loss.item();
}

}  // namespace detail

// One batch step: mean CE over the batch, gradients averaged in sample-index
// order, one optimizer update. Returns the loss of the batch as evaluated
// before the update.
inline double train_step(CaptionerModel& model,
                         const std::vector<TrainSample>& batch,
                         AdamOptimizer& opt, double lr,
                         std::size_t threads = 1) {
  detail::require(!batch.empty(), "train_step: empty batch");
  const auto& params = model.named_parameters();
  const std::size_t n_params = params.size();
  const std::size_t b = batch.size();

  std::vector<std::vector<std::vector<double>>> grads(b);
  std::vector<double> losses(b, 0.0);
  std::vector<std::string> errors(b);

  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, b));
  auto run_range = [&](const CaptionerModel& worker_model, std::size_t lo,
                       std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      try {
        worker_model.zero_grads();
        losses[i] = detail::sample_loss(worker_model, batch[i], true);
        auto& snap = grads[i];
        snap.resize(n_params);
        const auto& wp = worker_model.named_parameters();
        for (std::size_t p = 0; p < n_params; ++p)
          snap[p] = wp[p].second.grad();
      } catch (const std::exception& e) {
        errors[i] = e.what();
        return;
      }
    }
  };

  if (workers == 1) {
    run_range(model, 0, b);
  } else {
    std::vector<CaptionerModel> copies;
    copies.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) copies.push_back(model.deep_copy());
    std::vector<std::thread> pool;
    const std::size_t chunk = (b + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t lo = w * chunk, hi = std::min(b, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back(run_range, std::cref(copies[w]), lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  for (std::size_t i = 0; i < b; ++i)
    if (!errors[i].empty())
      throw NumericError("batch sample " + std::to_string(i) + ": " +
                         errors[i]);

  const double inv_b = 1.0 / static_cast<double>(b);
  model.zero_grads();
  for (std::size_t p = 0; p < n_params; ++p) {
    Tensor handle = params[p].second;
    std::vector<double>& g = handle.grad();
    for (std::size_t i = 0; i < b; ++i) {
      const std::vector<double>& gi = grads[i][p];
      for (std::size_t c = 0; c < g.size(); ++c) g[c] += gi[c] * inv_b;
    }
  }
  opt.step(params, lr);

  double mean_loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) mean_loss += losses[i] * inv_b;
  return mean_loss;
}

struct EvalMetrics {
  double ce = 0.0;
  double token_accuracy = 0.0;
  double exact_match = 0.0;
  std::size_t samples = 0;
};

// Teacher-forced CE and token accuracy plus (optionally) greedy exact match.
// Forward-only; samples can be evaluated on shared parameters in parallel.
inline EvalMetrics evaluate(const CaptionerModel& model,
                            const std::vector<TrainSample>& data,
                            bool with_exact_match, std::size_t threads = 1) {
  EvalMetrics m;
  m.samples = data.size();
  if (data.empty()) return m;

  std::vector<double> ce(data.size(), 0.0);
  std::vector<std::size_t> hits(data.size(), 0), counts(data.size(), 0);
  std::vector<int> exact(data.size(), 0);

  auto run_range = [&](std::size_t lo, std::size_t hi) {
    Tape tape;
    tape.set_enabled(false);
    for (std::size_t i = lo; i < hi; ++i) {
      const TrainSample& s = data[i];
      const auto enc = model.encode(tape, s.featmap);
      std::vector<int> input(s.tokens.begin(), s.tokens.end() - 1);
      std::vector<int> targets(s.tokens.begin() + 1, s.tokens.end());
      const auto dec = model.decode_teacher_forced(tape, enc.memory, input);
      ce[i] = cross_entropy(tape, dec.logits, targets, kPadId).item();
      const std::size_t vocab = model.config().vocab_size;
      for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] == kPadId) continue;
        const double* row = dec.logits.data() + r * vocab;
        std::size_t best = 0;
        for (std::size_t j = 1; j < vocab; ++j)
          if (row[j] > row[best]) best = j;
        ++counts[i];
        if (static_cast<int>(best) == targets[r]) ++hits[i];
      }
      if (with_exact_match) {
        std::vector<int> words(s.tokens.begin() + 1, s.tokens.end() - 1);
        exact[i] = generate_greedy(model, s.featmap) == words ? 1 : 0;
      }
    }
  };

  const std::size_t workers =
      std::max<std::size_t>(1, std::min(threads, data.size()));
  if (workers == 1) {
    run_range(0, data.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (data.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t lo = w * chunk, hi = std::min(data.size(), lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back(run_range, lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  std::size_t total_hits = 0, total_count = 0, total_exact = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    m.ce += ce[i];
    total_hits += hits[i];
    total_count += counts[i];
    total_exact += static_cast<std::size_t>(exact[i]);
  }
  m.ce /= static_cast<double>(data.size());
  m.token_accuracy = total_count == 0
                         ? 0.0
                         : static_cast<double>(total_hits) /
                               static_cast<double>(total_count);
  m.exact_match =
      static_cast<double>(total_exact) / static_cast<double>(data.size());
  return m;
}

}  // namespace aclf
