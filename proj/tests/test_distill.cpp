#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dfad/distill.hpp"

using namespace dfad;

namespace {

struct TinySetup {
  GnnConfig teacher_cfg{Family::gin, 2, 8, 3, 2, 2};
  GnnConfig student_cfg{Family::gin, 1, 4, 3, 2, 2};
  GeneratorConfig gen_cfg;
  Model teacher;

  TinySetup() {
    gen_cfg.latent_dim = 8;
    gen_cfg.node_count = 5;
    gen_cfg.feature_dim = 3;
    gen_cfg.hidden = {8, 8, 8};
    teacher = Model{teacher_cfg, init_params(teacher_cfg, 40)};
  }

  DistillConfig quick(std::size_t epochs = 2, std::size_t iters = 3) const {
    DistillConfig c;
    c.epochs = epochs;
    c.iterations_per_epoch = iters;
    c.batch_size = 4;
    c.seed = 5;
    return c;
  }
};

std::vector<Graph> toy_graphs(std::size_t count, std::uint64_t seed) {
  return make_cycles_vs_stars(count, seed).graphs;
}

}  // namespace

TEST(Losses, HandExamples) {
  Tensor qt = Tensor::from_rows({{1, 0}});
  Tensor qs = Tensor::from_rows({{0, 1}});
  EXPECT_DOUBLE_EQ(discrepancy_loss(LossKind::l_mae, qt, qs).item(), 1.0);
  EXPECT_DOUBLE_EQ(discrepancy_loss(LossKind::mse, qt, qs).item(), 1.0);
  Tensor u = Tensor::zeros({2, 4});
  EXPECT_EQ(discrepancy_loss(LossKind::kld, u, u).item(), 0.0);

  // KL by direct enumeration.
  double p0 = 1.0 / (1.0 + std::exp(-1.0)), p1 = 1.0 - p0;
  double kl = p0 * std::log(p0 / p1) + p1 * std::log(p1 / p0);
  EXPECT_NEAR(discrepancy_loss(LossKind::kld, qt, qs).item(), kl, 1e-12);
  EXPECT_NEAR(discrepancy_loss(LossKind::s_mae, qt, qs).item(), std::fabs(p0 - p1), 1e-12);
  EXPECT_NEAR(discrepancy_loss(LossKind::ce, qt, qs).item(), -std::log(p1), 1e-12);
}

TEST(Losses, IdenticalLogitsGiveZeroExceptCeFloor) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.0, 2.0);
  std::vector<double> v(12);
  for (auto& x : v) x = nd(rng);
  Tensor q({4, 3}, v);
  for (LossKind k : kAllLossKinds) {
    double l = discrepancy_loss(k, q, q).item();
    if (k == LossKind::ce) {
      double floor = 0.0;
      for (std::size_t b = 0; b < 4; ++b) {
        double mx = std::max({q(b, 0), q(b, 1), q(b, 2)});
        double z = std::exp(q(b, 0) - mx) + std::exp(q(b, 1) - mx) + std::exp(q(b, 2) - mx);
        floor += -std::log(1.0 / z);
      }
      EXPECT_NEAR(l, floor / 4.0, 1e-12);
    } else {
      EXPECT_NEAR(l, 0.0, 1e-15) << to_string(k);
    }
  }
}

TEST(Losses, NonNegativeAndKldZeroOnlyForEqualSoftmax) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> a(6), b(6);
    for (auto& x : a) x = nd(rng);
    for (auto& x : b) x = nd(rng);
    Tensor qa({2, 3}, a), qb({2, 3}, b);
    for (LossKind k : kAllLossKinds) EXPECT_GE(discrepancy_loss(k, qa, qb).item(), 0.0);
    EXPECT_GT(discrepancy_loss(LossKind::kld, qa, qb).item(), 0.0);
    // Shifting a row leaves its softmax unchanged.
    Tensor shifted = add_scalar(qa, 4.2);
    EXPECT_NEAR(discrepancy_loss(LossKind::kld, qa, shifted).item(), 0.0, 1e-9);
    EXPECT_NEAR(discrepancy_loss(LossKind::s_mae, qa, shifted).item(), 0.0, 1e-9);
  }
}

TEST(Losses, RejectsNanAndShapeMismatch) {
  Tensor good = Tensor::zeros({1, 2});
  Tensor bad({1, 2}, {std::nan(""), 0.0});
  for (LossKind k : kAllLossKinds) EXPECT_THROW(discrepancy_loss(k, good, bad), std::domain_error);
  EXPECT_THROW(discrepancy_loss(LossKind::mse, good, Tensor::zeros({2, 2})), ShapeError);
  EXPECT_EQ(loss_kind_from_string("l-mae"), LossKind::l_mae);
  EXPECT_THROW(loss_kind_from_string("hinge"), std::invalid_argument);
}

TEST(Evaluate, TieBreakAndManualCount) {
  // A model whose logits are identically zero: every prediction is class 0.
  GnnConfig cfg{Family::gcn, 1, 2, 7, 2, 2};
  ParamSet p = init_params(cfg, 0);
  for (auto& [_, t] : p.entries())
    for (auto& v : t.mutable_values()) v = 0.0;
  std::vector<Graph> graphs = toy_graphs(10, 3);
  graphs.pop_back();  // 5 of class 0, 4 of class 1
  EXPECT_DOUBLE_EQ(evaluate({cfg, p}, graphs), 5.0 / 9.0);
  EXPECT_EQ(predict(Tensor::from_rows({{0.3, 0.3}, {0.1, 0.2}})), (std::vector<int>{0, 1}));

  // Hand-built head: class 1 iff the mean of degree-bin 1 features is positive.
  // Stars have leaves (degree 1); cycles have none.
  Tensor w = p.get("classifier.weight");
  Tensor layer = p.get("layer0.weight");
  layer.mutable_values()[1 * 2 + 0] = 1.0;  // degree-1 bin -> hidden 0
  w.mutable_values()[0 * 2 + 1] = 1.0;      // hidden 0 -> class 1
  EXPECT_DOUBLE_EQ(evaluate({cfg, p}, graphs), 1.0);

  std::vector<Graph> wrong_dim(1, Graph::empty(2));
  wrong_dim[0].feature_dim = 3;
  wrong_dim[0].features.assign(6, 0.0);
  EXPECT_THROW(evaluate({cfg, p}, wrong_dim), ShapeError);
  EXPECT_THROW(evaluate({cfg, p}, std::span<const Graph>{}), std::invalid_argument);
}

TEST(Teacher, ToySetReachesFullValidationAccuracy) {
  auto train = toy_graphs(20, 1);
  auto val = toy_graphs(20, 2);
  GnnConfig cfg{Family::gin, 2, 16, 7, 2, 4};
  TeacherOptions opt;
  opt.epochs = 50;
  opt.lr = 0.01;
  opt.batch_size = 8;
  TeacherResult r = pretrain_teacher(cfg, train, val, opt);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(evaluate({cfg, r.params}, val), 1.0);
  EXPECT_LE(r.epoch_loss.size(), 50u);

  TeacherResult again = pretrain_teacher(cfg, train, val, opt);
  EXPECT_TRUE(again.params.identical_to(r.params));
}

TEST(Teacher, ZeroEpochsReturnsInitialisation) {
  auto train = toy_graphs(10, 1);
  GnnConfig cfg{Family::gcn, 1, 4, 7, 2, 4};
  TeacherOptions opt;
  opt.epochs = 0;
  opt.seed = 9;
  TeacherResult r = pretrain_teacher(cfg, train, train, opt);
  EXPECT_TRUE(r.params.identical_to(init_params(cfg, 9)));
  EXPECT_DOUBLE_EQ(r.accuracy, evaluate({cfg, init_params(cfg, 9)}, train));
}

TEST(Teacher, RejectsSingleClass) {
  std::vector<Graph> one_class;
  for (const auto& g : toy_graphs(10, 1))
    if (g.label == 0) one_class.push_back(g);
  GnnConfig cfg{Family::gcn, 1, 4, 7, 2, 4};
  EXPECT_THROW(pretrain_teacher(cfg, one_class, {}, {}), std::invalid_argument);
}

TEST(Adversarial, GenerationLossIsExactlyNegatedDistillationLoss) {
  TinySetup s;
  ParamSet student = init_params(s.student_cfg, 1);
  ParamSet gen = init_generator(s.gen_cfg, 2);
  std::mt19937_64 rng(3);
  Tensor z = sample_latent(4, s.gen_cfg.latent_dim, rng);
  for (LossKind k : kAllLossKinds) {
    double dis = distillation_loss(k, s.teacher, s.student_cfg, student, s.gen_cfg, gen, z).item();
    double gen_loss =
        generation_loss(k, s.teacher, s.student_cfg, student, s.gen_cfg, gen, z).item();
    EXPECT_EQ(gen_loss, -dis) << to_string(k);
  }
  Tape::active().clear();
}

TEST(Adversarial, StudentEqualToTeacherIsAFixedPoint) {
  TinySetup s;
  for (EdgeMode mode : {EdgeMode::hard_st, EdgeMode::soft}) {
    s.gen_cfg.edge_mode = mode;
    ParamSet gen = init_generator(s.gen_cfg, 2);
    ParamSet student = s.teacher.params.clone();
    Model frozen{s.teacher.config, s.teacher.params.clone()};
    frozen.params.set_requires_grad(false);
    student.set_requires_grad(false);
    std::mt19937_64 rng(4);
    Tensor z = sample_latent(4, s.gen_cfg.latent_dim, rng);
    Tape::active().clear();
    Tensor l = generation_loss(LossKind::l_mae, frozen, s.teacher_cfg, student, s.gen_cfg, gen, z);
    EXPECT_EQ(l.item(), 0.0);
    backward(l);
    Tape::active().clear();
    for (const auto& [name, t] : gen.entries()) {
      ASSERT_TRUE(t.has_grad()) << name;
      for (double g : t.grad()) EXPECT_EQ(g, 0.0) << name;
    }
  }

  // The same holds inside the training loop: with zero weight decay nothing moves.
  DistillConfig cfg = s.quick(1, 1);
  cfg.student_weight_decay = 0.0;
  DistillInit init;
  init.student = s.teacher.params;
  ParamSet gen0 = init_generator(s.gen_cfg, cfg.seed + 2);
  DistillResult r = distill(s.teacher, s.teacher_cfg, s.gen_cfg, cfg, {}, init);
  EXPECT_EQ(r.log.student_loss[0], 0.0);
  EXPECT_EQ(r.log.generator_loss[0], 0.0);
  EXPECT_TRUE(r.generator.identical_to(gen0));
  EXPECT_TRUE(r.student.identical_to(s.teacher.params));
}

TEST(Adversarial, InnerLoopAccounting) {
  TinySetup s;
  DistillConfig cfg = s.quick(2, 3);
  ASSERT_EQ(cfg.k, 5u);
  DistillResult r = distill(s.teacher, s.student_cfg, s.gen_cfg, cfg);
  EXPECT_EQ(r.log.student_steps, 2u * 3u * 5u);
  EXPECT_EQ(r.log.generator_steps, 2u * 3u);
  EXPECT_EQ(r.log.student_loss.size(), 6u);
  EXPECT_EQ(r.log.generator_loss.size(), 6u);
  EXPECT_TRUE(r.log.epoch_accuracy.empty());

  cfg.k = 2;
  r = distill(s.teacher, s.student_cfg, s.gen_cfg, cfg);
  EXPECT_EQ(r.log.student_steps, 12u);
  EXPECT_EQ(r.log.generator_steps, 6u);
}

TEST(Adversarial, TeacherIsByteFrozen) {
  TinySetup s;
  ParamSet before = s.teacher.params.clone();
  DistillConfig cfg = s.quick();
  auto eval = toy_graphs(6, 1);
  for (auto& g : eval) {
    g.feature_dim = 3;
    g.features.assign(g.n * 3, 1.0);
  }
  distill(s.teacher, s.student_cfg, s.gen_cfg, cfg, eval);
  random_baseline(s.teacher, s.student_cfg, s.gen_cfg, cfg, eval);
  kd_baseline(s.teacher, s.student_cfg, eval, 1.0, cfg, eval);
  EXPECT_TRUE(s.teacher.params.identical_to(before));
  for (const auto& [_, t] : s.teacher.params.entries()) EXPECT_FALSE(t.has_grad());
}

TEST(Adversarial, SeededRunsAreIdentical) {
  TinySetup s;
  DistillConfig cfg = s.quick();
  DistillResult a = distill(s.teacher, s.student_cfg, s.gen_cfg, cfg);
  DistillResult b = distill(s.teacher, s.student_cfg, s.gen_cfg, cfg);
  EXPECT_TRUE(a.student.identical_to(b.student));
  EXPECT_TRUE(a.generator.identical_to(b.generator));
  EXPECT_EQ(a.log.student_loss, b.log.student_loss);
  EXPECT_EQ(a.log.generator_loss, b.log.generator_loss);
  cfg.seed = 6;
  DistillResult c = distill(s.teacher, s.student_cfg, s.gen_cfg, cfg);
  EXPECT_FALSE(a.student.identical_to(c.student));
}

TEST(Adversarial, StudentLearnsAndGeneratorMoves) {
  TinySetup s;
  DistillConfig cfg = s.quick(3, 10);
  cfg.student_lr = 0.01;
  DistillResult r = distill(s.teacher, s.student_cfg, s.gen_cfg, cfg);
  EXPECT_FALSE(r.generator.identical_to(init_generator(s.gen_cfg, cfg.seed + 2)));
  double first = r.log.student_loss.front(), last = r.log.student_loss.back();
  EXPECT_LT(last, first);
}

TEST(Baselines, RandomNeverTouchesGenerator) {
  TinySetup s;
  DistillConfig cfg = s.quick();
  DistillResult r = random_baseline(s.teacher, s.student_cfg, s.gen_cfg, cfg);
  EXPECT_TRUE(r.generator.identical_to(init_generator(s.gen_cfg, cfg.seed + 2)));
  EXPECT_TRUE(r.log.generator_loss.empty());
  EXPECT_EQ(r.log.generator_steps, 0u);
  EXPECT_EQ(r.log.student_steps, 2u * 3u * 5u);
  EXPECT_EQ(r.log.to_jsonl().find("generator_loss"), std::string::npos);
}

TEST(Baselines, KdRunsOnASingleGraphAndMatchesStepBudget) {
  auto data = toy_graphs(10, 1);
  GnnConfig t{Family::gin, 2, 8, 7, 2, 4};
  GnnConfig st{Family::gin, 1, 4, 7, 2, 4};
  Model teacher{t, init_params(t, 1)};
  DistillConfig cfg;
  cfg.epochs = 2;
  cfg.iterations_per_epoch = 2;
  cfg.batch_size = 4;
  DistillResult r = kd_baseline(teacher, st, data, 1.0 / 10.0, cfg);
  EXPECT_EQ(r.log.student_steps, 2u * 2u * 5u);
  EXPECT_TRUE(r.generator.empty());
  EXPECT_THROW(kd_baseline(teacher, st, data, 0.01, cfg), std::invalid_argument);
  DistillResult again = kd_baseline(teacher, st, data, 1.0 / 10.0, cfg);
  EXPECT_TRUE(again.student.identical_to(r.student));
}

TEST(Baselines, MismatchedDimensionsRejected) {
  TinySetup s;
  GnnConfig bad = s.student_cfg;
  bad.input_dim = 4;
  EXPECT_THROW(distill(s.teacher, bad, s.gen_cfg, s.quick()), std::invalid_argument);
  DistillConfig cfg = s.quick();
  cfg.k = 0;
  EXPECT_THROW(distill(s.teacher, s.student_cfg, s.gen_cfg, cfg), std::invalid_argument);
}

TEST(Config, JsonRoundTrip) {
  DistillConfig c;
  c.loss = LossKind::kld;
  c.seed = 77;
  c.epochs = 3;
  DistillConfig back = nlohmann::json(c).get<DistillConfig>();
  EXPECT_EQ(back.loss, LossKind::kld);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.epochs, 3u);
  EXPECT_EQ(back.schedule.milestones, c.schedule.milestones);
}
