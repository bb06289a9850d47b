#include <gtest/gtest.h>

#include <cmath>

#include "aclf/cluster1d.hpp"
#include "aclf/oracle.hpp"
#include "test_util.hpp"

using namespace aclf;
using aclf_test::max_fd_rel_err;
using aclf_test::random_scorer;
using aclf_test::random_tensor;
using aclf_test::zero_scorer;

TEST(MergeProbability, ZeroScorerGivesHalf) {
  Tape tape;
  Tensor seq = random_tensor({4, 3}, 1);
  EXPECT_DOUBLE_EQ(
      merge_probability(tape, zero_scorer(3), seq, 0, 2).item(), 0.5);
}

TEST(MergeProbability, BiasOnlyCollapsesToSigmoid) {
  Tape tape;
  Tensor seq = random_tensor({4, 3}, 2);
  for (double b : {-2.0, 3.0}) {
    MergeScorer s = zero_scorer(3);
    s.bias.data()[0] = b;
    EXPECT_NEAR(merge_probability(tape, s, seq, 1, 3).item(),
                1.0 / (1.0 + std::exp(-b)), 1e-15);
  }
}

TEST(MergeProbability, AnchorAtOrAfterCandidateRejected) {
  Tape tape;
  Tensor seq = random_tensor({4, 3}, 3);
  MergeScorer s = zero_scorer(3);
  EXPECT_THROW(merge_probability(tape, s, seq, 2, 2), std::invalid_argument);
  EXPECT_THROW(merge_probability(tape, s, seq, 3, 1), std::invalid_argument);
}

// Independent in-test recomputation: explicit concat, dot product, sigmoid.
TEST(MergeProbability, MatchesExplicitRecomputation) {
  Tape tape;
  const std::size_t n = 4, d = 3;
  Tensor seq = random_tensor({n, d}, 7);
  MergeScorer s = random_scorer(d, 77);
  const std::size_t i = 1, k = 3;

  std::vector<double> cat(2 * d);
  for (std::size_t j = 0; j < d; ++j) cat[j] = seq.at(k, j);
  for (std::size_t j = 0; j < d; ++j)
    cat[d + j] = (seq.at(1, j) + seq.at(2, j)) / 2.0;
  double z = s.bias.data()[0];
  for (std::size_t j = 0; j < 2 * d; ++j) z += s.weight.data()[j] * cat[j];
  const double expected = 1.0 / (1.0 + std::exp(-z));

  EXPECT_NEAR(merge_probability(tape, s, seq, i, k).item(), expected, 1e-12);
}

TEST(ClusterMatrix1D, SingleElement) {
  Tape tape;
  ClusterMatrix1D c = cluster_matrix_1d(tape, zero_scorer(3),
                                        random_tensor({1, 3}, 4));
  ASSERT_EQ(c.n, 1u);
  EXPECT_DOUBLE_EQ(c.values.item(), 1.0);
}

TEST(ClusterMatrix1D, ZeroScorerClosedForm) {
  Tape tape;
  ClusterMatrix1D c = cluster_matrix_1d(tape, zero_scorer(3),
                                        random_tensor({4, 3}, 5));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double dist = static_cast<double>(i > j ? i - j : j - i);
      EXPECT_NEAR(c.values.at(i, j), std::pow(0.5, dist), 1e-12);
    }
  EXPECT_NEAR(c.values.at(0, 2), 0.25, 1e-12);
  EXPECT_NEAR(c.values.at(0, 3), 0.125, 1e-12);
}

TEST(ClusterMatrix1D, EmptyInputUnrepresentable) {
  // Tensors reject zero-length dimensions outright, which enforces the
  // non-empty precondition at construction.
  EXPECT_THROW(Tensor({0, 3}), std::invalid_argument);
}

TEST(ClusterMatrix1D, MatchesReferenceOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tape tape;
    const std::size_t n = 2 + seed % 9, d = 2 + seed % 5;
    Tensor seq = random_tensor({n, d}, 900 + seed);
    MergeScorer s = random_scorer(d, 500 + seed);
    ClusterMatrix1D c = cluster_matrix_1d(tape, s, seq);
    const std::vector<double> ref = oracle::ref_cluster_1d(s, seq);
    for (std::size_t p = 0; p < n * n; ++p)
      ASSERT_NEAR(c.values.data()[p], ref[p], 1e-12) << "seed " << seed;
  }
}

TEST(ClusterMatrix1D, LogSpaceAgreesWithDirectProductAtLongLength) {
  Tape tape;
  const std::size_t n = 16, d = 4;
  Tensor seq = random_tensor({n, d}, 61);
  MergeScorer s = random_scorer(d, 62);
  ClusterMatrix1D c = cluster_matrix_1d(tape, s, seq);
  const std::vector<double> ref = oracle::ref_cluster_1d(s, seq);
  for (std::size_t p = 0; p < n * n; ++p)
    ASSERT_NEAR(c.values.data()[p], ref[p], 1e-12);
}

TEST(ClusterMatrix1D, Invariants) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Tape tape;
    tape.set_enabled(false);
    const std::size_t n = 1 + seed % 16;
    Tensor seq = random_tensor({n, 4}, 7000 + seed, -2, 2);
    MergeScorer s = random_scorer(4, 7100 + seed);
    ClusterMatrix1D c = cluster_matrix_1d(tape, s, seq);
    for (std::size_t i = 0; i < n; ++i) {
      ASSERT_DOUBLE_EQ(c.values.at(i, i), 1.0);
      for (std::size_t j = 0; j < n; ++j) {
        const double v = c.values.at(i, j);
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
        ASSERT_EQ(v, c.values.at(j, i));  // exact symmetry
      }
      for (std::size_t j = i + 2; j < n; ++j)
        ASSERT_LE(c.values.at(i, j), c.values.at(i, j - 1) + 1e-12);
    }
  }
}

TEST(AccumulateLayers, DegenerateConvexCombination) {
  Tape tape;
  Tensor prev({2, 2}, {1.0, 0.4, 0.4, 1.0});
  Tensor c_zero({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor acc = accumulate_layers(tape, c_zero, &prev);
  EXPECT_DOUBLE_EQ(acc.at(0, 1), 0.4);  // off-diagonal passes through
  EXPECT_DOUBLE_EQ(acc.at(0, 0), 1.0);
}

TEST(AccumulateLayers, AbsorbingCase) {
  Tape tape;
  Tensor prev({2, 2}, {0.3, 0.2, 0.2, 0.3});
  Tensor ones({2, 2}, {1.0, 1.0, 1.0, 1.0});
  Tensor acc = accumulate_layers(tape, ones, &prev);
  for (std::size_t p = 0; p < 4; ++p) EXPECT_DOUBLE_EQ(acc.data()[p], 1.0);
}

TEST(AccumulateLayers, DirectSubstitution) {
  Tape tape;
  Tensor prev({1, 1}, {0.4});
  Tensor cur({1, 1}, {0.5});
  EXPECT_NEAR(accumulate_layers(tape, cur, &prev).item(), 0.7, 1e-15);
}

TEST(AccumulateLayers, NoPreviousPassesThrough) {
  Tape tape;
  Tensor cur({2, 2}, {1.0, 0.6, 0.6, 1.0});
  Tensor acc = accumulate_layers(tape, cur, nullptr);
  EXPECT_EQ(acc.values(), cur.values());
}

TEST(AccumulateLayers, ShapeMismatchRejected) {
  Tape tape;
  Tensor prev({2, 2});
  Tensor cur({3, 3});
  EXPECT_THROW(accumulate_layers(tape, cur, &prev), std::invalid_argument);
}

TEST(AccumulateLayers, MonotoneAcrossDepth) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tape tape;
    tape.set_enabled(false);
    const std::size_t n = 2 + seed % 8;
    Tensor prev;
    for (int layer = 0; layer < 3; ++layer) {
      Tensor seq = random_tensor({n, 4}, seed * 10 + layer);
      ClusterMatrix1D c =
          cluster_matrix_1d(tape, random_scorer(4, seed * 31 + layer), seq);
      Tensor acc =
          accumulate_layers(tape, c.values, prev.defined() ? &prev : nullptr);
      if (prev.defined())
        for (std::size_t p = 0; p < n * n; ++p) {
          ASSERT_GE(acc.data()[p], prev.data()[p] - 1e-12);
          ASSERT_LE(acc.data()[p], 1.0);
        }
      prev = acc;
    }
  }
}

TEST(DownsampleSequence, PairMeans) {
  Tape tape;
  Tensor seq({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor down = downsample_sequence(tape, seq);
  ASSERT_EQ(down.shape(), (std::vector<std::size_t>{2, 2}));
  EXPECT_DOUBLE_EQ(down.at(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(down.at(0, 1), 3.0);
  EXPECT_DOUBLE_EQ(down.at(1, 0), 6.0);
  EXPECT_DOUBLE_EQ(down.at(1, 1), 7.0);
}

TEST(DownsampleSequence, SingletonIsIdentity) {
  Tape tape;
  Tensor seq({1, 3}, {1, 2, 3});
  EXPECT_EQ(downsample_sequence(tape, seq).values(), seq.values());
}

TEST(DownsampleSequence, OddTailKeepsLastElement) {
  Tape tape;
  Tensor seq = random_tensor({5, 3}, 8);
  Tensor down = downsample_sequence(tape, seq);
  ASSERT_EQ(down.rows(), 3u);
  for (std::size_t j = 0; j < 3; ++j)
    EXPECT_DOUBLE_EQ(down.at(2, j), seq.at(4, j));
}

TEST(UpsampleMatrix, WithinBlockPairMapsToDiagonal) {
  Tape tape;
  Tensor small = cluster_matrix_1d(tape, random_scorer(3, 9),
                                   random_tensor({2, 3}, 10))
                     .values;
  Tensor up = upsample_matrix(tape, small, 4);
  EXPECT_DOUBLE_EQ(up.at(0, 1), small.at(0, 0));
  EXPECT_DOUBLE_EQ(up.at(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(up.at(1, 2), small.at(0, 1));
}

TEST(UpsampleMatrix, BlockConstant) {
  Tape tape;
  Tensor small = cluster_matrix_1d(tape, random_scorer(3, 11),
                                   random_tensor({3, 3}, 12))
                     .values;
  Tensor up = upsample_matrix(tape, small, 6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      ASSERT_EQ(up.at(i, j), small.at(i / 2, j / 2));
}

TEST(UpsampleMatrix, SizeMismatchRejected) {
  Tape tape;
  Tensor small({2, 2}, {1, 0.5, 0.5, 1});
  EXPECT_THROW(upsample_matrix(tape, small, 7), std::invalid_argument);
}

TEST(ClusterMatrix1D, GradientMatchesFiniteDifferences) {
  for (std::size_t n : {2u, 4u, 6u}) {
    Tensor seq = random_tensor({n, 3}, 40 + n);
    MergeScorer s = random_scorer(3, 50 + n);
    const double err = max_fd_rel_err(
        [&](Tape& t) {
          return sum_all(t, cluster_matrix_1d(t, s, seq).values);
        },
        {seq, s.weight, s.bias});
    EXPECT_LE(err, 1e-4) << "n=" << n;
  }
}
