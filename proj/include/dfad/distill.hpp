#pragma once

// Teacher pre-training, data-free adversarial distillation and the KD /
// RANDOM baselines.
//
// One distillation iteration:
//   k times:  z ~ N(0, I), X = G(z), minimise L_DIS = D(T(X), S(X)) over the student
//   once:     fresh z, X = G(z), minimise L_GEN = -L_DIS over the generator,
//             gradient flowing through both frozen discriminators.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfad/generator.hpp"
#include "dfad/gnn.hpp"
#include "dfad/graph_data.hpp"
#include "dfad/optim.hpp"
#include "dfad/tensor.hpp"

namespace dfad {

enum class LossKind { l_mae, s_mae, mse, kld, ce };

inline constexpr LossKind kAllLossKinds[] = {LossKind::l_mae, LossKind::s_mae, LossKind::mse,
                                             LossKind::kld, LossKind::ce};

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::l_mae: return "L-MAE";
    case LossKind::s_mae: return "S-MAE";
    case LossKind::mse: return "MSE";
    case LossKind::kld: return "KLD";
    case LossKind::ce: return "CE";
  }
  return "?";
}

inline LossKind loss_kind_from_string(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (auto k : kAllLossKinds) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown loss '" + s + "' (expected L-MAE, S-MAE, MSE, KLD or CE)");
}

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, ParamSet last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const ParamSet& last_good() const { return last_good_; }

 private:
  ParamSet last_good_;
};

namespace detail {

inline bool all_finite(const Tensor& t) {
  auto v = t.values();
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline Tensor argmax_onehot(const Tensor& q) {
  std::size_t b = q.dim(0), c = q.dim(1);
  std::vector<double> out(b * c, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (q(i, j) > q(i, best)) best = j;
    }
    out[i * c + best] = 1.0;
  }
  return Tensor({b, c}, std::move(out));
}

}  // namespace detail

/// Discrepancy between teacher logits `qt` and student logits `qs`, both [B, C].
///   L-MAE  mean |qt - qs|
///   S-MAE  mean |softmax(qt) - softmax(qs)|
///   MSE    mean (qt - qs)^2
///   KLD    (1/B) sum_b KL(softmax(qt_b) || softmax(qs_b))
///   CE     (1/B) sum_b -log softmax(qs_b)[argmax qt_b]
inline Tensor discrepancy_loss(LossKind kind, const Tensor& qt, const Tensor& qs) {
  if (qt.shape() != qs.shape() || qt.rank() != 2) {
    throw ShapeError("discrepancy_loss: teacher logits " + shape_str(qt.shape()) +
                     " vs student logits " + shape_str(qs.shape()));
  }
  if (!detail::all_finite(qt) || !detail::all_finite(qs)) {
    throw std::domain_error("discrepancy_loss: non-finite logits");
  }
  const double inv_b = 1.0 / static_cast<double>(qt.dim(0));
  switch (kind) {
    case LossKind::l_mae: return mean(abs(sub(qt, qs)));
    case LossKind::s_mae: return mean(abs(sub(row_softmax(qt), row_softmax(qs))));
    case LossKind::mse: {
      Tensor d = sub(qt, qs);
      return mean(mul(d, d));
    }
    case LossKind::kld: {
      Tensor lt = row_log_softmax(qt);
      Tensor ls = row_log_softmax(qs);
      return scalar_mul(sum(mul(exp(lt), sub(lt, ls))), inv_b);
    }
    case LossKind::ce:
      return scalar_mul(sum(mul(detail::argmax_onehot(qt), row_log_softmax(qs))), -inv_b);
  }
  throw std::invalid_argument("unknown loss kind");
}

/// Index of the largest logit per row; ties go to the lowest class index.
inline std::vector<int> predict(const Tensor& logits) {
  std::vector<int> out;
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.dim(1); ++j) {
      if (logits(i, j) > logits(i, best)) best = j;
    }
    out.push_back(static_cast<int>(best));
  }
  return out;
}

inline double evaluate(const Model& model, std::span<const Graph> graphs,
                       std::size_t batch_size = 64) {
  if (graphs.empty()) throw std::invalid_argument("evaluate: empty graph list");
  for (const auto& g : graphs) {
    if (g.feature_dim != model.config.input_dim) {
      throw ShapeError("evaluate: graph feature dim " + std::to_string(g.feature_dim) +
                       " does not match model input dim " +
                       std::to_string(model.config.input_dim));
    }
  }
  ParamSet frozen = model.params.clone();
  frozen.set_requires_grad(false);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < graphs.size(); start += batch_size) {
    auto chunk = graphs.subspan(start, std::min(batch_size, graphs.size() - start));
    GraphBatch batch = make_batch(chunk);
    auto pred = predict(model_forward(model.config, frozen, batch));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == chunk[i].label;
  }
  return static_cast<double>(correct) / static_cast<double>(graphs.size());
}

// ---------------------------------------------------------------------------
// Teacher

struct TeacherOptions {
  std::size_t epochs = 100;
  double lr = 1e-3;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct TeacherResult {
  ParamSet params;
  double accuracy = 0.0;  // best validation accuracy
  std::size_t best_epoch = 0;
  std::vector<double> epoch_loss;
};

/// Cross-entropy training; returns the snapshot with the best validation
/// accuracy (earliest epoch on ties). Zero epochs returns the initialisation.
inline TeacherResult pretrain_teacher(const GnnConfig& cfg, std::span<const Graph> train,
                                      std::span<const Graph> val, const TeacherOptions& opt) {
  if (train.empty()) throw std::invalid_argument("pretrain_teacher: empty training set");
  {
    std::vector<int> labels;
    for (const auto& g : train) labels.push_back(g.label);
    std::sort(labels.begin(), labels.end());
    if (std::unique(labels.begin(), labels.end()) - labels.begin() < 2) {
      throw std::invalid_argument("pretrain_teacher: training labels cover fewer than 2 classes");
    }
  }
  std::span<const Graph> monitor = val.empty() ? train : val;
  std::mt19937_64 rng(opt.seed);
  ParamSet params = init_params(cfg, opt.seed);
  AdamState adam(opt.lr, opt.weight_decay);

  TeacherResult best;
  best.params = params.clone();
  best.accuracy = evaluate({cfg, params}, monitor);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      std::vector<Graph> chunk;
      for (std::size_t i = start; i < std::min(order.size(), start + opt.batch_size); ++i) {
        chunk.push_back(train[order[i]]);
      }
      Tape::active().clear();
      GraphBatch batch = make_batch(chunk);
      Tensor logits = model_forward(cfg, params, batch);
      Tensor onehot = Tensor::zeros(logits.shape());
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        onehot.mutable_values()[i * cfg.num_classes + static_cast<std::size_t>(chunk[i].label)] = 1.0;
      }
      Tensor loss = scalar_mul(sum(mul(onehot, row_log_softmax(logits))),
                               -1.0 / static_cast<double>(chunk.size()));
      if (!std::isfinite(loss.item())) {
        Tape::active().clear();
        throw TrainingDiverged("pretrain_teacher: loss became non-finite at epoch " +
                                   std::to_string(epoch),
                               best.params);
      }
      backward(loss);
      adam_step(params, adam);
      epoch_loss += loss.item();
      ++batches;
    }
    Tape::active().clear();
    best.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    double acc = evaluate({cfg, params}, monitor);
    if (acc > best.accuracy) {
      best.accuracy = acc;
      best.params = params.clone();
      best.best_epoch = epoch + 1;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Distillation

struct DistillConfig {
  std::size_t epochs = 100;
  std::size_t iterations_per_epoch = 50;
  std::size_t batch_size = 32;
  std::size_t k = 5;
  LossKind loss = LossKind::l_mae;
  double student_lr = 1e-3;
  double generator_lr = 1e-3;
  double student_weight_decay = 5e-4;
  double generator_weight_decay = 0.0;
  LrSchedule schedule{};
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("DistillConfig: epochs must be >= 1");
    if (iterations_per_epoch < 1) {
      throw std::invalid_argument("DistillConfig: iterations_per_epoch must be >= 1");
    }
    if (batch_size < 1) throw std::invalid_argument("DistillConfig: batch_size must be >= 1");
    if (k < 1) throw std::invalid_argument("DistillConfig: k must be >= 1");
    if (!(student_lr > 0.0) || !(generator_lr > 0.0)) {
      throw std::invalid_argument("DistillConfig: learning rates must be > 0");
    }
  }
};

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = {{"epochs", c.epochs},
       {"iterations_per_epoch", c.iterations_per_epoch},
       {"batch_size", c.batch_size},
       {"k", c.k},
       {"loss", to_string(c.loss)},
       {"student_lr", c.student_lr},
       {"generator_lr", c.generator_lr},
       {"student_weight_decay", c.student_weight_decay},
       {"generator_weight_decay", c.generator_weight_decay},
       {"lr_milestones", c.schedule.milestones},
       {"lr_factor", c.schedule.factor},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, DistillConfig& c) {
  c.epochs = j.at("epochs").get<std::size_t>();
  c.iterations_per_epoch = j.at("iterations_per_epoch").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.loss = loss_kind_from_string(j.at("loss").get<std::string>());
  c.student_lr = j.at("student_lr").get<double>();
  c.generator_lr = j.at("generator_lr").get<double>();
  c.student_weight_decay = j.value("student_weight_decay", 5e-4);
  c.generator_weight_decay = j.value("generator_weight_decay", 0.0);
  c.schedule.milestones = j.value("lr_milestones", std::vector<double>{0.1, 0.3, 0.5});
  c.schedule.factor = j.value("lr_factor", 0.3);
  c.seed = j.at("seed").get<std::uint64_t>();
}

struct TrainLog {
  std::vector<double> student_loss;    // per iteration: mean L_DIS over the k student steps
  std::vector<double> generator_loss;  // per iteration: L_DIS seen by the generator step
  std::vector<double> epoch_accuracy;  // per epoch, when an eval set was given
  std::size_t student_steps = 0;
  std::size_t generator_steps = 0;
  double wall_seconds = 0.0;

  /// One JSON object per line: {"kind":"iteration",...} then {"kind":"epoch",...}.
  std::string to_jsonl() const {
    std::string out;
    for (std::size_t i = 0; i < student_loss.size(); ++i) {
      nlohmann::json j{{"kind", "iteration"}, {"index", i}, {"student_loss", student_loss[i]}};
      if (i < generator_loss.size()) j["generator_loss"] = generator_loss[i];
      out += j.dump() + "\n";
    }
    for (std::size_t e = 0; e < epoch_accuracy.size(); ++e) {
      out += nlohmann::json{{"kind", "epoch"}, {"index", e}, {"accuracy", epoch_accuracy[e]}}
                 .dump() +
             "\n";
    }
    out += nlohmann::json{{"kind", "summary"},
                          {"student_steps", student_steps},
                          {"generator_steps", generator_steps},
                          {"wall_seconds", wall_seconds}}
               .dump() +
           "\n";
    return out;
  }
};

struct DistillResult {
  ParamSet student;
  ParamSet generator;  // empty for the KD baseline
  TrainLog log;
};

/// Optional starting points; fresh seeded initialisations otherwise.
struct DistillInit {
  std::optional<ParamSet> student;
  std::optional<ParamSet> generator;
};

/// L_DIS on a generated batch. Gradients reach whichever of the student and
/// generator parameter sets currently have requires_grad on.
inline Tensor distillation_loss(LossKind kind, const Model& teacher, const GnnConfig& student_cfg,
                                const ParamSet& student, const GeneratorConfig& gen_cfg,
                                const ParamSet& generator, const Tensor& z) {
  GeneratedBatch x = generate(gen_cfg, generator, z);
  Tensor qt = model_forward(teacher.config, teacher.params, x.features, x.adjacency, x.node_mask);
  Tensor qs = model_forward(student_cfg, student, x.features, x.adjacency, x.node_mask);
  return discrepancy_loss(kind, qt, qs);
}

/// L_GEN = -L_DIS.
inline Tensor generation_loss(LossKind kind, const Model& teacher, const GnnConfig& student_cfg,
                              const ParamSet& student, const GeneratorConfig& gen_cfg,
                              const ParamSet& generator, const Tensor& z) {
  return scalar_mul(distillation_loss(kind, teacher, student_cfg, student, gen_cfg, generator, z),
                    -1.0);
}

namespace detail {

inline void check_compatible(const Model& teacher, const GnnConfig& student_cfg) {
  if (teacher.config.input_dim != student_cfg.input_dim ||
      teacher.config.num_classes != student_cfg.num_classes) {
    throw std::invalid_argument("teacher " + teacher.config.label() + " (T=" +
                                std::to_string(teacher.config.input_dim) + ", C=" +
                                std::to_string(teacher.config.num_classes) +
                                ") and student (T=" + std::to_string(student_cfg.input_dim) +
                                ", C=" + std::to_string(student_cfg.num_classes) +
                                ") disagree on input or class dimensions");
  }
}

inline Model frozen_copy(const Model& m) {
  Model out{m.config, m.params.clone()};
  out.params.set_requires_grad(false);
  return out;
}

inline DistillResult adversarial_loop(const Model& teacher_in, const GnnConfig& student_cfg,
                                      const GeneratorConfig& gen_cfg, const DistillConfig& cfg,
                                      std::span<const Graph> eval_set, const DistillInit& init,
                                      bool train_generator) {
  cfg.validate();
  gen_cfg.validate();
  check_compatible(teacher_in, student_cfg);
  if (gen_cfg.feature_dim != student_cfg.input_dim) {
    throw std::invalid_argument("generator feature_dim " + std::to_string(gen_cfg.feature_dim) +
                                " does not match model input dim " +
                                std::to_string(student_cfg.input_dim));
  }
  const auto started = std::chrono::steady_clock::now();
  const Model teacher = frozen_copy(teacher_in);
  std::mt19937_64 rng(cfg.seed);
  DistillResult res;
  res.student = init.student ? init.student->clone() : init_params(student_cfg, cfg.seed + 1);
  res.generator = init.generator ? init.generator->clone() : init_generator(gen_cfg, cfg.seed + 2);
  AdamState s_opt(cfg.student_lr, cfg.student_weight_decay);
  AdamState g_opt(cfg.generator_lr, cfg.generator_weight_decay);
  ParamSet last_good = res.student.clone();
  auto& tape = Tape::active();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    s_opt.learning_rate = cfg.schedule.rate(cfg.student_lr, epoch, cfg.epochs);
    g_opt.learning_rate = cfg.schedule.rate(cfg.generator_lr, epoch, cfg.epochs);
    for (std::size_t it = 0; it < cfg.iterations_per_epoch; ++it) {
      // Distillation stage: generator fixed, student updated k times.
      res.generator.set_requires_grad(false);
      res.student.set_requires_grad(true);
      double acc = 0.0;
      for (std::size_t step = 0; step < cfg.k; ++step) {
        tape.clear();
        Tensor z = sample_latent(cfg.batch_size, gen_cfg.latent_dim, rng);
        Tensor loss;
        try {
          loss = distillation_loss(cfg.loss, teacher, student_cfg, res.student, gen_cfg,
                                   res.generator, z);
        } catch (const std::domain_error& e) {
          tape.clear();
          throw TrainingDiverged(std::string("distill: ") + e.what() + " at epoch " +
                                     std::to_string(epoch),
                                 last_good);
        }
        if (!std::isfinite(loss.item())) {
          tape.clear();
          throw TrainingDiverged("distill: student loss non-finite at epoch " +
                                     std::to_string(epoch),
                                 last_good);
        }
        backward(loss);
        adam_step(res.student, s_opt);
        acc += loss.item();
      }
      res.log.student_loss.push_back(acc / static_cast<double>(cfg.k));

      // Generation stage: discriminators fixed, generator maximises L_DIS.
      if (train_generator) {
        res.student.set_requires_grad(false);
        res.generator.set_requires_grad(true);
        tape.clear();
        Tensor z = sample_latent(cfg.batch_size, gen_cfg.latent_dim, rng);
        Tensor loss;
        try {
          loss = generation_loss(cfg.loss, teacher, student_cfg, res.student, gen_cfg,
                                 res.generator, z);
        } catch (const std::domain_error& e) {
          tape.clear();
          throw TrainingDiverged(std::string("distill: ") + e.what() + " at epoch " +
                                     std::to_string(epoch),
                                 last_good);
        }
        if (!std::isfinite(loss.item())) {
          tape.clear();
          throw TrainingDiverged("distill: generator loss non-finite at epoch " +
                                     std::to_string(epoch),
                                 last_good);
        }
        backward(loss);
        adam_step(res.generator, g_opt);
        res.log.generator_loss.push_back(-loss.item());
      }
    }
    tape.clear();
    last_good = res.student.clone();
    if (!eval_set.empty()) {
      res.log.epoch_accuracy.push_back(evaluate({student_cfg, res.student}, eval_set));
    }
  }
  tape.clear();
  res.student.set_requires_grad(true);
  res.generator.set_requires_grad(true);
  res.log.student_steps = s_opt.step;
  res.log.generator_steps = g_opt.step;
  res.log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return res;
}

}  // namespace detail

/// Data-free adversarial distillation. The teacher is never modified.
inline DistillResult distill(const Model& teacher, const GnnConfig& student_cfg,
                             const GeneratorConfig& gen_cfg, const DistillConfig& cfg,
                             std::span<const Graph> eval_set = {}, const DistillInit& init = {}) {
  return detail::adversarial_loop(teacher, student_cfg, gen_cfg, cfg, eval_set, init, true);
}

/// Same loop with the generation stage removed: the student only ever sees
/// graphs from the randomly initialised generator.
inline DistillResult random_baseline(const Model& teacher, const GnnConfig& student_cfg,
                                     const GeneratorConfig& gen_cfg, const DistillConfig& cfg,
                                     std::span<const Graph> eval_set = {},
                                     const DistillInit& init = {}) {
  return detail::adversarial_loop(teacher, student_cfg, gen_cfg, cfg, eval_set, init, false);
}

/// Distillation on real graphs: a seeded stratified `fraction` of `data`,
/// same discrepancy loss, no generator. Runs the same number of student
/// updates as distill() (epochs * iterations_per_epoch * k), each on a
/// mini-batch drawn by cycling a reshuffled pass over the subset.
inline DistillResult kd_baseline(const Model& teacher_in, const GnnConfig& student_cfg,
                                 std::span<const Graph> data, double fraction,
                                 const DistillConfig& cfg, std::span<const Graph> eval_set = {}) {
  cfg.validate();
  detail::check_compatible(teacher_in, student_cfg);
  const auto started = std::chrono::steady_clock::now();
  std::vector<Graph> subset = stratified_subset(data, fraction, cfg.seed + 3);
  if (subset.empty()) throw std::invalid_argument("kd_baseline: empty subset");
  const Model teacher = detail::frozen_copy(teacher_in);
  std::mt19937_64 rng(cfg.seed);
  DistillResult res;
  res.student = init_params(student_cfg, cfg.seed + 1);
  AdamState opt(cfg.student_lr, cfg.student_weight_decay);
  ParamSet last_good = res.student.clone();
  auto& tape = Tape::active();

  std::vector<std::size_t> order(subset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  const std::size_t bs = std::min(cfg.batch_size, subset.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.learning_rate = cfg.schedule.rate(cfg.student_lr, epoch, cfg.epochs);
    for (std::size_t it = 0; it < cfg.iterations_per_epoch; ++it) {
      double acc = 0.0;
      for (std::size_t step = 0; step < cfg.k; ++step) {
        std::vector<Graph> chunk;
        while (chunk.size() < bs) {
          if (cursor == order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
          }
          chunk.push_back(subset[order[cursor++]]);
        }
        tape.clear();
        GraphBatch batch = make_batch(chunk);
        Tensor qt = model_forward(teacher.config, teacher.params, batch);
        Tensor qs = model_forward(student_cfg, res.student, batch);
        Tensor loss = discrepancy_loss(cfg.loss, qt, qs);
        if (!std::isfinite(loss.item())) {
          tape.clear();
          throw TrainingDiverged("kd_baseline: loss non-finite at epoch " + std::to_string(epoch),
                                 last_good);
        }
        backward(loss);
        adam_step(res.student, opt);
        acc += loss.item();
      }
      res.log.student_loss.push_back(acc / static_cast<double>(cfg.k));
    }
    tape.clear();
    last_good = res.student.clone();
    if (!eval_set.empty()) {
      res.log.epoch_accuracy.push_back(evaluate({student_cfg, res.student}, eval_set));
    }
  }
  res.log.student_steps = opt.step;
  res.log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return res;
}

}  // namespace dfad
