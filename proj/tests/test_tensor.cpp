#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "dfad/tensor.hpp"
#include "support/finite_diff.hpp"
#include "support/op_cases.hpp"

using namespace dfad;
using namespace dfad::testing;

TEST(TensorOps, SpecExamples) {
  Tensor m = Tensor::from_rows({{1, 2}, {3, 4}});
  Tensor prod = matmul(m, Tensor::identity(2));
  EXPECT_EQ(std::vector<double>(prod.values().begin(), prod.values().end()),
            (std::vector<double>{1, 2, 3, 4}));

  Tensor s = sigmoid(Tensor::zeros({3}));
  for (double v : s.values()) EXPECT_EQ(v, 0.5);

  Tensor sm = row_softmax(Tensor::zeros({1, 3}));
  for (double v : sm.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);

  EXPECT_DOUBLE_EQ(mean(abs(Tensor::from_rows({{1, -3}, {0, 2}}))).item(), 1.5);
}

TEST(TensorOps, ShapeMismatchNamesShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
}

TEST(TensorOps, UnknownKindRejected) {
  EXPECT_THROW(op_kind_from_string("convolution"), std::invalid_argument);
  for (const auto& [kind, name] : kOpKindNames) EXPECT_EQ(op_kind_from_string(name), kind);
}

TEST(TensorOps, RecordsOnlyWhenTracked) {
  Tape::active().clear();
  Tensor a = Tensor::full({2, 2}, 1.0);
  Tensor b = add(a, a);
  EXPECT_EQ(Tape::active().size(), 0u);
  EXPECT_FALSE(b.node_id().has_value());
  a.set_requires_grad(true);
  Tensor c = add(a, a);
  EXPECT_EQ(Tape::active().size(), 1u);
  EXPECT_TRUE(Tape::active().holds(*c.node()));
  Tape::active().clear();
  EXPECT_FALSE(Tape::active().holds(*c.node()));
}

TEST(TensorOps, TapeIsTopological) {
  Tape::active().clear();
  Tensor x = Tensor::full({2, 2}, 0.5);
  x.set_requires_grad(true);
  Tensor y = sum(tanh(matmul(x, transpose(x))));
  const auto& entries = Tape::active().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    for (const auto& in : entries[i].inputs) {
      if (in->node_id && in->tape_generation == Tape::active().generation()) {
        EXPECT_LT(*in->node_id, i);
      }
    }
  }
  backward(y);
  Tape::active().clear();
}

TEST(Backward, SumGivesOnes) {
  Tape::active().clear();
  Tensor x({4}, {0.1, -2.0, 3.0, 4.5}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  Tape::active().clear();
}

TEST(Backward, MaeSubgradient) {
  Tape::active().clear();
  Tensor x({4}, {0.5, -1.0, 2.0, 0.0}, true);
  Tensor c({4}, {0.0, 1.0, 1.0, 0.5});
  backward(mean(abs(sub(x, c))));
  std::vector<double> expect{0.25, -0.25, 0.25, -0.25};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], expect[i]);
  Tape::active().clear();
}

TEST(Backward, AbsAtZeroHasZeroSubgradient) {
  Tape::active().clear();
  Tensor x({2}, {0.0, 1.0}, true);
  backward(sum(abs(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  Tape::active().clear();
}

TEST(Backward, GradientsAccumulate) {
  Tensor x({3}, {1.0, 2.0, 3.0}, true);
  for (int rep = 0; rep < 2; ++rep) {
    Tape::active().clear();
    backward(sum(scalar_mul(x, 2.0)));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 4.0);
  Tape::active().clear();
}

TEST(Backward, RejectsNonScalarAndOffTapeLoss) {
  Tape::active().clear();
  Tensor x({2}, {1.0, 2.0}, true);
  Tensor y = scalar_mul(x, 3.0);
  EXPECT_THROW(backward(y), ShapeError);
  Tensor s = Tensor::scalar(1.0);
  EXPECT_THROW(backward(s), std::logic_error);
  Tape::active().clear();
}

TEST(Backward, UnreachedParameterGetsZeroGrad) {
  Tape::active().clear();
  Tensor x({2}, {1.0, 2.0}, true);
  Tensor w({2}, {3.0, 4.0}, true);
  // w only feeds a branch that is multiplied by zero.
  Tensor loss = add(sum(x), sum(scalar_mul(w, 0.0)));
  backward(loss);
  ASSERT_TRUE(w.has_grad());
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
  Tape::active().clear();
}

TEST(GradientCheck, EveryOpKind) {
  std::mt19937_64 rng(1234);
  auto cases = all_cases(rng);
  std::set<OpKind> covered;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    OpKind kind = cases[i].kind;
    double err = check_case(std::move(cases[i]), 99 + i);
    covered.insert(kind);
    EXPECT_LT(err, 1e-4) << to_string(kind) << " case " << i;
  }
  for (const auto& [kind, name] : kOpKindNames) {
    EXPECT_TRUE(covered.count(kind)) << "no gradient case for " << name;
  }
}

TEST(GradientCheck, StraightThroughForwardsHardValues) {
  Tape::active().clear();
  Tensor hard({2}, {1.0, 0.0});
  Tensor soft({2}, {0.7, 0.2}, true);
  Tensor y = straight_through(hard, soft);
  EXPECT_EQ(y.at(0), 1.0);
  EXPECT_EQ(y.at(1), 0.0);
  backward(sum(scalar_mul(y, 3.0)));
  EXPECT_EQ(soft.grad()[0], 3.0);
  EXPECT_EQ(soft.grad()[1], 3.0);
  Tape::active().clear();
}

TEST(Properties, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = randn({5, 7}, rng, false);
    for (auto& v : x.mutable_values()) v *= 30.0;
    Tensor sm = row_softmax(x);
    Tensor lsm = row_log_softmax(x);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        s += sm(r, c);
        EXPECT_NEAR(lsm(r, c), std::log(sm(r, c)), 1e-9);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Properties, BroadcastBiasAddsPerRow) {
  Tensor x = Tensor::from_rows({{1, 2}, {3, 4}});
  Tensor b({2}, {10.0, 20.0});
  Tensor y = add(x, b);
  EXPECT_EQ(y(1, 0), 13.0);
  EXPECT_EQ(y(1, 1), 24.0);
}
