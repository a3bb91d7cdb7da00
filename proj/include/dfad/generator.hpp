#pragma once

// Latent-to-graph generator. An MLP maps z ~ N(0, I) to node features
// F in R^{N x T}; the adjacency is A = sigmoid(F F^T), binarised with a
// strict "> tau" threshold and a zeroed diagonal.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfad/checkpoint.hpp"
#include "dfad/gnn.hpp"
#include "dfad/optim.hpp"
#include "dfad/tensor.hpp"

namespace dfad {

/// How discriminators see generated edges.
///  hard_st: thresholded 0/1 adjacency forward, gradient routed into the
///           soft adjacency (straight-through).
///  soft:    the soft adjacency itself (fully differentiable).
enum class EdgeMode { hard_st, soft };

inline std::string to_string(EdgeMode m) { return m == EdgeMode::soft ? "soft" : "hard-st"; }

inline EdgeMode edge_mode_from_string(const std::string& s) {
  if (s == "hard-st") return EdgeMode::hard_st;
  if (s == "soft") return EdgeMode::soft;
  throw std::invalid_argument("unknown edge mode '" + s + "' (expected hard-st or soft)");
}

struct GeneratorConfig {
  std::size_t latent_dim = 32;
  std::size_t node_count = 18;
  std::size_t feature_dim = 1;
  std::vector<std::size_t> hidden{64, 128, 256};
  double tau = 0.5;
  EdgeMode edge_mode = EdgeMode::hard_st;

  void validate() const {
    if (latent_dim < 1) throw std::invalid_argument("GeneratorConfig: latent_dim must be >= 1");
    if (node_count < 2) throw std::invalid_argument("GeneratorConfig: node_count must be >= 2");
    if (feature_dim < 1) throw std::invalid_argument("GeneratorConfig: feature_dim must be >= 1");
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("GeneratorConfig: tau must lie in (0, 1)");
    for (auto h : hidden) {
      if (h < 1) throw std::invalid_argument("GeneratorConfig: hidden widths must be >= 1");
    }
  }

  bool operator==(const GeneratorConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"latent_dim", c.latent_dim}, {"node_count", c.node_count},
       {"feature_dim", c.feature_dim}, {"hidden", c.hidden},
       {"tau", c.tau},               {"edge_mode", to_string(c.edge_mode)}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.node_count = j.at("node_count").get<std::size_t>();
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  c.tau = j.at("tau").get<double>();
  c.edge_mode = edge_mode_from_string(j.at("edge_mode").get<std::string>());
}

inline ParamSet init_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamSet p;
  std::size_t in = cfg.latent_dim;
  for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
    std::string pre = "fc" + std::to_string(i) + ".";
    p.add(pre + "weight", glorot_uniform(in, cfg.hidden[i], rng));
    p.add(pre + "bias", Tensor::zeros({cfg.hidden[i]}, true));
    in = cfg.hidden[i];
  }
  const std::size_t out = cfg.node_count * cfg.feature_dim;
  p.add("out.weight", glorot_uniform(in, out, rng));
  p.add("out.bias", Tensor::zeros({out}, true));
  return p;
}

/// B x D standard-normal latent batch.
inline Tensor sample_latent(std::size_t batch, std::size_t dim, std::mt19937_64& rng) {
  if (batch < 1) throw std::invalid_argument("sample_latent: batch size must be >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(batch * dim);
  for (auto& x : v) x = normal(rng);
  return Tensor({batch, dim}, std::move(v));
}

struct GeneratedBatch {
  Tensor features;   // F       [B, N, T]
  Tensor a_soft;     // sigmoid(F F^T) [B, N, N]
  Tensor a_hard;     // 0/1, zero diagonal, constant
  Tensor adjacency;  // what discriminators consume (depends on edge mode)
  Tensor node_mask;  // all ones [B, N]

  std::size_t batch_size() const { return features.dim(0); }
};

inline GeneratedBatch generate(const GeneratorConfig& cfg, const ParamSet& params, const Tensor& z) {
  cfg.validate();
  if (z.rank() != 2 || z.dim(1) != cfg.latent_dim) {
    throw ShapeError("generate: latent batch " + shape_str(z.shape()) + " does not match D=" +
                     std::to_string(cfg.latent_dim));
  }
  const std::size_t b = z.dim(0), n = cfg.node_count, t = cfg.feature_dim;
  Tensor h = z;
  for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
    std::string pre = "fc" + std::to_string(i) + ".";
    h = tanh(add(matmul(h, params.get(pre + "weight")), params.get(pre + "bias")));
  }
  Tensor flat = add(matmul(h, params.get("out.weight")), params.get("out.bias"));
  GeneratedBatch g;
  g.features = reshape(flat, {b, n, t});
  g.a_soft = sigmoid(batched_matmul(g.features, transpose(g.features)));

  std::vector<double> hard(b * n * n, 0.0), off_diag(n * n, 1.0);
  auto soft = g.a_soft.values();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        std::size_t k = (s * n + i) * n + j;
        hard[k] = (i != j && soft[k] > cfg.tau) ? 1.0 : 0.0;
      }
  for (std::size_t i = 0; i < n; ++i) off_diag[i * n + i] = 0.0;
  g.a_hard = Tensor({b, n, n}, std::move(hard));

  Tensor soft_no_diag = mul(g.a_soft, Tensor({n, n}, std::move(off_diag)));
  g.adjacency = cfg.edge_mode == EdgeMode::soft ? soft_no_diag
                                                : straight_through(g.a_hard, soft_no_diag);
  g.node_mask = Tensor::full({b, n}, 1.0);
  return g;
}

/// Multiply-add counts of one generate() call.
struct GeneratorCost {
  std::size_t mlp = 0;        // dense layers
  std::size_t adjacency = 0;  // F F^T products, B * N^2 * T
};

inline GeneratorCost generator_cost(const GeneratorConfig& cfg, std::size_t batch) {
  GeneratorCost c;
  std::size_t in = cfg.latent_dim;
  for (auto h : cfg.hidden) {
    c.mlp += batch * in * h;
    in = h;
  }
  c.mlp += batch * in * cfg.node_count * cfg.feature_dim;
  c.adjacency = batch * cfg.node_count * cfg.node_count * cfg.feature_dim;
  return c;
}

struct Generator {
  GeneratorConfig config;
  ParamSet params;
};

inline Checkpoint to_checkpoint(const Generator& g) {
  return Checkpoint{"generator", nlohmann::json(g.config), g.params};
}

inline Generator generator_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "generator") {
    throw CheckpointError("expected a generator checkpoint, got '" + c.kind + "'");
  }
  Generator g{c.config.get<GeneratorConfig>(), c.params};
  ParamSet fresh = init_generator(g.config, 0);
  if (fresh.size() != g.params.size()) {
    throw CheckpointError("generator checkpoint tensors do not match its config");
  }
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    if (fresh.entries()[i].first != g.params.entries()[i].first ||
        fresh.entries()[i].second.shape() != g.params.entries()[i].second.shape()) {
      throw CheckpointError("generator checkpoint tensor '" + g.params.entries()[i].first +
                            "' does not match its config");
    }
  }
  return g;
}

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coordinates_checked = 0;
};

/// Central finite-difference check of d L / d theta_g for
/// L = mean |teacher(G(z)) - student(G(z))| with soft edges. Checks up to
/// `coords_per_tensor` seeded coordinates of every generator tensor.
inline GradCheckReport generator_grad_check(const GeneratorConfig& gen_cfg, const ParamSet& gen,
                                            const Model& teacher, const Model& student,
                                            const Tensor& z, double tolerance = 1e-3,
                                            std::size_t coords_per_tensor = 16,
                                            double step = 1e-5, std::uint64_t seed = 7) {
  if (gen_cfg.edge_mode != EdgeMode::soft) {
    throw std::invalid_argument(
        "generator_grad_check requires edge mode 'soft'; hard-st uses a biased straight-through "
        "gradient");
  }
  ParamSet g = gen.clone();
  ParamSet tp = teacher.params.clone();
  ParamSet sp = student.params.clone();
  tp.set_requires_grad(false);
  sp.set_requires_grad(false);
  g.set_requires_grad(true);

  auto loss_of = [&]() {
    GeneratedBatch x = generate(gen_cfg, g, z);
    Tensor qt = model_forward(teacher.config, tp, x.features, x.adjacency, x.node_mask);
    Tensor qs = model_forward(student.config, sp, x.features, x.adjacency, x.node_mask);
    return mean(abs(sub(qt, qs)));
  };

  Tape::active().clear();
  g.zero_grad();
  Tensor loss = loss_of();
  backward(loss);
  Tape::active().clear();

  GradCheckReport rep;
  std::mt19937_64 rng(seed);
  g.set_requires_grad(false);
  for (auto& [name, t] : g.entries()) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> idx(t.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(coords_per_tensor, idx.size()));
    for (auto i : idx) {
      auto w = t.mutable_values();
      double orig = w[i];
      w[i] = orig + step;
      double up = loss_of().item();
      w[i] = orig - step;
      double down = loss_of().item();
      w[i] = orig;
      double numeric = (up - down) / (2.0 * step);
      double scale = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-6});
      double rel = std::fabs(analytic[i] - numeric) / scale;
      ++rep.coordinates_checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = name;
        rep.worst_index = i;
      }
    }
  }
  rep.passed = rep.max_rel_error < tolerance;
  return rep;
}

}  // namespace dfad
