#include <gtest/gtest.h>

#include <cmath>

#include "aclf/tensor.hpp"
#include "test_util.hpp"

using namespace aclf;
using aclf_test::max_fd_rel_err;
using aclf_test::random_tensor;

TEST(Tensor, ShapeDataInvariant) {
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  EXPECT_THROW(Tensor({0, 3}), std::invalid_argument);
}

TEST(Matmul, IdentityCase) {
  Tape tape;
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor z = matmul(tape, a, eye);
  EXPECT_EQ(z.values(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, HandArithmetic) {
  Tape tape;
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  Tensor z = matmul(tape, a, b);
  EXPECT_EQ(z.values(), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, ShapeMismatchReportsDimensions) {
  Tape tape;
  Tensor a({2, 3}), b({2, 2});
  try {
    matmul(tape, a, b);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos);
    EXPECT_NE(msg.find("2x2"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Tensor a = random_tensor({3, 3}, 11);
  Tensor b = random_tensor({3, 3}, 12);
  const double err = max_fd_rel_err(
      [&](Tape& t) { return sum_all(t, matmul(t, a, b)); }, {a, b}, 1e-5);
  EXPECT_LE(err, 1e-6);
}

TEST(SoftmaxRows, Symmetry) {
  Tape tape;
  Tensor y = softmax_rows(tape, Tensor({1, 2}, {0.0, 0.0}));
  EXPECT_DOUBLE_EQ(y.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.5);
}

TEST(SoftmaxRows, AnalyticRow) {
  Tape tape;
  Tensor y = softmax_rows(tape, Tensor({1, 2}, {std::log(2.0), 0.0}));
  EXPECT_NEAR(y.data()[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(y.data()[1], 1.0 / 3.0, 1e-15);
}

TEST(SoftmaxRows, LargeLogitHasNoOverflow) {
  Tape tape;
  Tensor y = softmax_rows(tape, Tensor({1, 2}, {1000.0, 0.0}));
  EXPECT_TRUE(y.all_finite());
  EXPECT_DOUBLE_EQ(y.data()[0], 1.0);
  EXPECT_LE(y.data()[1], 1e-300);  // underflow-to-zero regime
}

TEST(SoftmaxRows, RowsSumToOne) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tape tape;
    Tensor y = softmax_rows(tape, random_tensor({4, 7}, 100 + seed, -30, 30));
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        const double v = y.at(i, j);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tape tape;
  Tensor gamma({4}, {1, 1, 1, 1}), beta({4});
  Tensor y = layer_norm(tape, Tensor({1, 4}, {3, 3, 3, 3}), gamma, beta, 1e-6);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(y.data()[j], 0.0);
}

TEST(LayerNorm, AlreadyNormalizedRow) {
  Tape tape;
  Tensor gamma({2}, {1, 1}), beta({2});
  Tensor y = layer_norm(tape, Tensor({1, 2}, {1, -1}), gamma, beta, 1e-6);
  EXPECT_NEAR(y.data()[0], 1.0, 1e-5);
  EXPECT_NEAR(y.data()[1], -1.0, 1e-5);
}

TEST(LayerNorm, SingleFeatureRejected) {
  Tape tape;
  Tensor gamma({1}, {1.0}), beta({1});
  EXPECT_THROW(layer_norm(tape, Tensor({3, 1}), gamma, beta, 1e-6),
               std::invalid_argument);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Tensor x = random_tensor({4, 8}, 21);
  Tensor gamma = random_tensor({8}, 22, 0.5, 1.5);
  Tensor beta = random_tensor({8}, 23);
  const double err = max_fd_rel_err(
      [&](Tape& t) {
        // weight the output so the gradient is not row-degenerate
        Tensor w = random_tensor({8, 1}, 24);
        return sum_all(t, matmul(t, layer_norm(t, x, gamma, beta, 1e-6), w));
      },
      {x, gamma, beta}, 1e-5);
  EXPECT_LE(err, 1e-5);
}

TEST(Pointwise, SigmoidSymmetryPoint) {
  Tape tape;
  EXPECT_DOUBLE_EQ(sigmoid(tape, Tensor::scalar(0.0)).item(), 0.5);
}

TEST(Pointwise, SigmoidComplementIdentity) {
  Tape tape;
  for (double x : {-3.0, 0.7, 12.0}) {
    const double s =
        sigmoid(tape, Tensor::scalar(x)).item() +
        sigmoid(tape, Tensor::scalar(-x)).item();
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(Pointwise, MeanOverLastAxis) {
  Tape tape;
  Tensor m = mean_axis(tape, Tensor({2, 2}, {2, 4, 6, 8}), 1);
  EXPECT_EQ(m.shape(), (std::vector<std::size_t>{2, 1}));
  EXPECT_DOUBLE_EQ(m.data()[0], 3.0);
  EXPECT_DOUBLE_EQ(m.data()[1], 7.0);
}

TEST(Pointwise, AddShapeMismatchRejected) {
  Tape tape;
  EXPECT_THROW(add(tape, Tensor({2, 2}), Tensor({2, 3})),
               std::invalid_argument);
}

TEST(Pointwise, FiniteOutputsOnFiniteInputs) {
  Tape tape;
  Tensor x = random_tensor({3, 5}, 31, -50, 50);
  EXPECT_TRUE(sigmoid(tape, x).all_finite());
  EXPECT_TRUE(logsigmoid(tape, x).all_finite());
  EXPECT_TRUE(softmax_rows(tape, x).all_finite());
  EXPECT_TRUE(log_clamped(tape, Tensor({1, 2}, {0.0, 1.0}), -1e9).all_finite());
}

// Every operation's analytic gradient against central finite differences at
// ten seeds, through a scalar reduction.
TEST(GradientSweep, AllOperations) {
  struct Case {
    const char* name;
    std::function<double(std::uint64_t)> run;
  };
  auto weighted_sum = [](Tape& t, const Tensor& x, std::uint64_t seed) {
    // contract with a fixed random matrix so gradients differ per entry
    Tensor w = random_tensor({x.cols(), 1}, seed * 977 + 5);
    return sum_all(t, matmul(t, x, w));
  };
  std::vector<Case> cases = {
      {"transpose",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({3, 4}, s);
         return max_fd_rel_err(
             [&](Tape& t) { return weighted_sum(t, transpose(t, x), s); }, {x});
       }},
      {"add_rowvec",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({3, 4}, s), b = random_tensor({4}, s + 1);
         return max_fd_rel_err(
             [&](Tape& t) { return weighted_sum(t, add_rowvec(t, x, b), s); },
             {x, b});
       }},
      {"mul",
       [&](std::uint64_t s) {
         Tensor a = random_tensor({3, 4}, s), b = random_tensor({3, 4}, s + 1);
         return max_fd_rel_err(
             [&](Tape& t) { return weighted_sum(t, mul(t, a, b), s); }, {a, b});
       }},
      {"affine",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({3, 4}, s);
         return max_fd_rel_err(
             [&](Tape& t) {
               return weighted_sum(t, affine(t, x, 1.7, -0.3), s);
             },
             {x});
       }},
      {"sigmoid",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({3, 4}, s, -3, 3);
         return max_fd_rel_err(
             [&](Tape& t) { return weighted_sum(t, sigmoid(t, x), s); }, {x});
       }},
      {"logsigmoid",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({3, 4}, s, -3, 3);
         return max_fd_rel_err(
             [&](Tape& t) { return weighted_sum(t, logsigmoid(t, x), s); },
             {x});
       }},
      {"exp",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({3, 4}, s, -2, 0);
         return max_fd_rel_err(
             [&](Tape& t) { return weighted_sum(t, exp_elem(t, x), s); }, {x});
       }},
      {"log_clamped",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({3, 4}, s, 0.1, 1.0);
         return max_fd_rel_err(
             [&](Tape& t) {
               return weighted_sum(t, log_clamped(t, x, -1e9), s);
             },
             {x});
       }},
      {"softmax_rows",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({3, 4}, s, -2, 2);
         return max_fd_rel_err(
             [&](Tape& t) { return weighted_sum(t, softmax_rows(t, x), s); },
             {x});
       }},
      {"concat_cols",
       [&](std::uint64_t s) {
         Tensor a = random_tensor({3, 2}, s), b = random_tensor({3, 3}, s + 1);
         return max_fd_rel_err(
             [&](Tape& t) {
               return weighted_sum(t, concat_cols(t, {a, b}), s);
             },
             {a, b});
       }},
      {"gather_rows",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({4, 3}, s);
         return max_fd_rel_err(
             [&](Tape& t) {
               return weighted_sum(t, gather_rows(t, x, {2, 0, 2, 3}), s);
             },
             {x});
       }},
      {"row_slice",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({5, 3}, s);
         return max_fd_rel_err(
             [&](Tape& t) { return weighted_sum(t, row_slice(t, x, 1, 4), s); },
             {x});
       }},
      {"mean_rows_range",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({5, 3}, s);
         return max_fd_rel_err(
             [&](Tape& t) {
               return weighted_sum(t, mean_rows_range(t, x, 1, 4), s);
             },
             {x});
       }},
      {"mean_axis1",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({4, 5}, s);
         return max_fd_rel_err(
             [&](Tape& t) { return weighted_sum(t, mean_axis(t, x, 1), s); },
             {x});
       }},
      {"assemble_indexed",
       [&](std::uint64_t s) {
         Tensor a = random_tensor({1}, s), b = random_tensor({1}, s + 1);
         return max_fd_rel_err(
             [&](Tape& t) {
               Tensor m = assemble_indexed(t, {a, b}, {0, 1, 1, -1}, 2, 2);
               return weighted_sum(t, m, s);
             },
             {a, b});
       }},
      {"gather_entries",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({2, 2}, s);
         return max_fd_rel_err(
             [&](Tape& t) {
               Tensor g = gather_entries(t, x, {0, 0, 3, 2, 1, 1}, 2, 3);
               return weighted_sum(t, g, s);
             },
             {x});
       }},
      {"pool_rows_groups",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({5, 3}, s);
         return max_fd_rel_err(
             [&](Tape& t) {
               Tensor p = pool_rows_groups(t, x, {{0, 1}, {2, 3}, {4}});
               return weighted_sum(t, p, s);
             },
             {x});
       }},
      {"div_rowsum",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({3, 4}, s, 0.1, 1.0);
         return max_fd_rel_err(
             [&](Tape& t) {
               return weighted_sum(t, div_rowsum(t, x, 1e-12), s);
             },
             {x});
       }},
      {"layer_norm",
       [&](std::uint64_t s) {
         Tensor x = random_tensor({3, 4}, s);
         Tensor g = random_tensor({4}, s + 1, 0.5, 1.5);
         Tensor b = random_tensor({4}, s + 2);
         return max_fd_rel_err(
             [&](Tape& t) {
               return weighted_sum(t, layer_norm(t, x, g, b, 1e-6), s);
             },
             {x, g, b});
       }},
  };
  for (const Case& c : cases) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      EXPECT_LE(c.run(seed), 1e-4) << c.name << " at seed " << seed;
    }
  }
}

TEST(Tape, BackwardIsDeterministic) {
  auto run = [] {
    Tensor a = random_tensor({4, 4}, 3), b = random_tensor({4, 4}, 4);
    Tape tape;
    Tensor z = softmax_rows(tape, matmul(tape, sigmoid(tape, a), b));
    Tensor loss = sum_all(tape, mul(tape, z, z));
    loss.grad()[0] = 1.0;
    tape.backward();
    return std::pair(a.grad(), b.grad());
  };
  const auto r1 = run();
  const auto r2 = run();
  EXPECT_EQ(r1.first, r2.first);    // bit-identical
  EXPECT_EQ(r1.second, r2.second);
}

TEST(Tape, EmptyBackwardIsNoOp) {
  Tape tape;
  EXPECT_EQ(tape.size(), 0u);
  tape.backward();  // nothing to do
}

TEST(Tape, DisabledTapeRecordsNothing) {
  Tape tape;
  tape.set_enabled(false);
  Tensor a = random_tensor({2, 2}, 5);
  matmul(tape, a, a);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, FirstNonFiniteNamesTheOperation) {
  Tape tape;
  Tensor x({1, 2}, {800.0, 0.0});
  Tensor e = exp_elem(tape, x);  // overflows to inf
  matmul(tape, e, Tensor({2, 1}, {1.0, 1.0}));
  const std::string label = tape.first_nonfinite();
  EXPECT_NE(label.find("exp"), std::string::npos);
}
