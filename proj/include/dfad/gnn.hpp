#pragma once

// Message-passing graph classifiers (GIN, GCN, GraphSAGE, GAT) with a masked
// mean readout over the last layer and a linear classification head.
//
// Layer rules, with A the (possibly soft) adjacency and X the node features:
//   GIN   X' = ReLU(ReLU((X + A X) W1) W2)                  (eps fixed at 0)
//   GCN   X' = ReLU(D^-1/2 (A + I) D^-1/2 X W)              (D = rowsum(A + I))
//   SAGE  X' = ReLU(X W_self + mean_{j in N(i)}(X_j) W_neigh)
//   GAT   per head: a_ij = softmax_j over N(i) u {i} of LeakyReLU_0.2(s_i + t_j),
//         s = X W a_src, t = X W a_dst; heads concatenated, then ReLU.
// Convolutions have no bias; the head does. Padded nodes carry zero features
// and no edges, so they never reach real nodes and are excluded from readout.

#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfad/checkpoint.hpp"
#include "dfad/graph_data.hpp"
#include "dfad/optim.hpp"
#include "dfad/tensor.hpp"

namespace dfad {

enum class Family { gin, gcn, sage, gat };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::gin: return "GIN";
    case Family::gcn: return "GCN";
    case Family::sage: return "SAGE";
    case Family::gat: return "GAT";
  }
  return "?";
}

inline Family family_from_string(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (s == "GIN") return Family::gin;
  if (s == "GCN") return Family::gcn;
  if (s == "SAGE" || s == "GRAPHSAGE") return Family::sage;
  if (s == "GAT") return Family::gat;
  throw std::invalid_argument("unknown model family '" + s + "' (expected GIN, GCN, SAGE or GAT)");
}

inline constexpr Family kAllFamilies[] = {Family::gin, Family::gcn, Family::sage, Family::gat};

struct GnnConfig {
  Family family = Family::gin;
  std::size_t layers = 5;
  std::size_t hidden = 128;
  std::size_t input_dim = 1;
  std::size_t num_classes = 2;
  std::size_t gat_heads = 4;

  void validate() const {
    if (layers < 1) throw std::invalid_argument("GnnConfig: layers must be >= 1");
    if (hidden < 1) throw std::invalid_argument("GnnConfig: hidden must be >= 1");
    if (input_dim < 1) throw std::invalid_argument("GnnConfig: input_dim must be >= 1");
    if (num_classes < 1) throw std::invalid_argument("GnnConfig: num_classes must be >= 1");
    if (family == Family::gat) {
      if (gat_heads < 1) throw std::invalid_argument("GnnConfig: gat_heads must be >= 1");
      if (hidden % gat_heads != 0) {
        throw std::invalid_argument("GnnConfig: GAT hidden " + std::to_string(hidden) +
                                    " is not divisible by " + std::to_string(gat_heads) +
                                    " heads");
      }
    }
  }

  /// e.g. "GIN-5-128"
  std::string label() const {
    return to_string(family) + "-" + std::to_string(layers) + "-" + std::to_string(hidden);
  }

  bool operator==(const GnnConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const GnnConfig& c) {
  j = {{"family", to_string(c.family)}, {"layers", c.layers},
       {"hidden", c.hidden},            {"input_dim", c.input_dim},
       {"num_classes", c.num_classes},  {"gat_heads", c.gat_heads}};
}

inline void from_json(const nlohmann::json& j, GnnConfig& c) {
  c.family = family_from_string(j.at("family").get<std::string>());
  c.layers = j.at("layers").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.gat_heads = j.value("gat_heads", std::size_t{4});
}

/// Exact number of trainable scalars for `cfg`.
inline std::size_t param_count(const GnnConfig& cfg) {
  cfg.validate();
  std::size_t total = 0;
  std::size_t in = cfg.input_dim, h = cfg.hidden;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    switch (cfg.family) {
      case Family::gin: total += in * h + h * h; break;
      case Family::gcn: total += in * h; break;
      case Family::sage: total += 2 * in * h; break;
      case Family::gat: total += in * h + 2 * h; break;  // per head: in*d + 2d, d = h/heads
    }
    in = h;
  }
  return total + h * cfg.num_classes + cfg.num_classes;
}

/// Glorot-uniform weights, zero head bias, deterministic in `seed`.
inline ParamSet init_params(const GnnConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamSet p;
  std::size_t in = cfg.input_dim, h = cfg.hidden;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::string pre = "layer" + std::to_string(l) + ".";
    switch (cfg.family) {
      case Family::gin:
        p.add(pre + "mlp0.weight", glorot_uniform(in, h, rng));
        p.add(pre + "mlp1.weight", glorot_uniform(h, h, rng));
        break;
      case Family::gcn:
        p.add(pre + "weight", glorot_uniform(in, h, rng));
        break;
      case Family::sage:
        p.add(pre + "self.weight", glorot_uniform(in, h, rng));
        p.add(pre + "neigh.weight", glorot_uniform(in, h, rng));
        break;
      case Family::gat: {
        std::size_t d = h / cfg.gat_heads;
        for (std::size_t k = 0; k < cfg.gat_heads; ++k) {
          std::string hp = pre + "head" + std::to_string(k) + ".";
          p.add(hp + "weight", glorot_uniform(in, d, rng));
          p.add(hp + "att_src", glorot_uniform(d, 1, rng));
          p.add(hp + "att_dst", glorot_uniform(d, 1, rng));
        }
        break;
      }
    }
    in = h;
  }
  p.add("classifier.weight", glorot_uniform(h, cfg.num_classes, rng));
  p.add("classifier.bias", Tensor::zeros({cfg.num_classes}, true));
  return p;
}

/// Optional hook receiving every GAT attention matrix [B, N, N].
using AttentionObserver = std::function<void(std::size_t layer, std::size_t head, const Tensor&)>;

namespace detail {

// [B, N, in] x [in, out] -> [B, N, out]
inline Tensor node_linear(const Tensor& x, const Tensor& w) {
  std::size_t b = x.dim(0), n = x.dim(1);
  return reshape(matmul(reshape(x, {b * n, x.dim(2)}), w), {b, n, w.dim(1)});
}

// Softmax over the last axis restricted to positions with weight > 0,
// scaled by the weights: a_ij = w_ij exp(e_ij) / sum_j w_ij exp(e_ij).
// With 0/1 weights this is the usual masked softmax.
inline Tensor weighted_softmax(const Tensor& scores, const Tensor& weights) {
  std::size_t c = scores.shape().back();
  std::size_t rows = scores.size() / c;
  std::vector<double> shift(rows, 0.0);
  auto e = scores.values();
  auto w = weights.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (w[r * c + j] > 0.0) m = std::max(m, e[r * c + j]);
    }
    shift[r] = std::isfinite(m) ? m : 0.0;
  }
  Shape sshape = scores.shape();
  sshape.back() = 1;
  // The shift is a per-row constant; softmax is invariant to it.
  Tensor shifted = sub(scores, Tensor(sshape, std::move(shift)));
  Tensor num = mul(weights, exp(shifted));
  return div(num, sum_last_axis(num));
}

}  // namespace detail

/// Pre-softmax logits [B, C].
///   features  [B, N, T]   (may require grad, e.g. generator output)
///   adjacency [B, N, N]   hard 0/1 or soft values in [0, 1]
///   node_mask [B, N]      1 for real nodes
inline Tensor model_forward(const GnnConfig& cfg, const ParamSet& params, const Tensor& features,
                            const Tensor& adjacency, const Tensor& node_mask,
                            const AttentionObserver& observer = {}) {
  cfg.validate();
  if (features.rank() != 3 || features.dim(2) != cfg.input_dim) {
    throw ShapeError("model_forward: features " + shape_str(features.shape()) +
                     " do not match input_dim " + std::to_string(cfg.input_dim));
  }
  const std::size_t b = features.dim(0), n = features.dim(1);
  if (adjacency.shape() != Shape{b, n, n}) {
    throw ShapeError("model_forward: adjacency " + shape_str(adjacency.shape()) +
                     " does not match features " + shape_str(features.shape()));
  }
  if (node_mask.shape() != Shape{b, n}) {
    throw ShapeError("model_forward: node_mask " + shape_str(node_mask.shape()) +
                     " does not match features " + shape_str(features.shape()));
  }

  Tensor x = features;
  // Self-loop-augmented adjacency, shared by GCN and GAT.
  std::optional<Tensor> with_self;
  std::optional<Tensor> gcn_norm;
  std::optional<Tensor> sage_inv_deg;
  if (cfg.family == Family::gcn || cfg.family == Family::gat) {
    with_self = add(adjacency, Tensor::identity(n));
  }
  if (cfg.family == Family::gcn) {
    Tensor dinv = pow(sum_last_axis(*with_self), -0.5);  // [B, N, 1]
    gcn_norm = mul(mul(dinv, *with_self), transpose(dinv));
  }
  if (cfg.family == Family::sage) sage_inv_deg = safe_reciprocal(sum_last_axis(adjacency));

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    switch (cfg.family) {
      case Family::gin: {
        Tensor agg = add(x, batched_matmul(adjacency, x));
        Tensor hid = relu(detail::node_linear(agg, params.get(pre + "mlp0.weight")));
        x = relu(detail::node_linear(hid, params.get(pre + "mlp1.weight")));
        break;
      }
      case Family::gcn: {
        Tensor xw = detail::node_linear(x, params.get(pre + "weight"));
        x = relu(batched_matmul(*gcn_norm, xw));
        break;
      }
      case Family::sage: {
        Tensor neigh = mul(*sage_inv_deg, batched_matmul(adjacency, x));
        x = relu(add(detail::node_linear(x, params.get(pre + "self.weight")),
                     detail::node_linear(neigh, params.get(pre + "neigh.weight"))));
        break;
      }
      case Family::gat: {
        std::vector<Tensor> heads;
        for (std::size_t k = 0; k < cfg.gat_heads; ++k) {
          const std::string hp = pre + "head" + std::to_string(k) + ".";
          Tensor wh = detail::node_linear(x, params.get(hp + "weight"));       // [B, N, d]
          Tensor s = detail::node_linear(wh, params.get(hp + "att_src"));      // [B, N, 1]
          Tensor t = detail::node_linear(wh, params.get(hp + "att_dst"));      // [B, N, 1]
          Tensor scores = leaky_relu(add(s, transpose(t)), 0.2);               // [B, N, N]
          Tensor alpha = detail::weighted_softmax(scores, *with_self);
          if (observer) observer(l, k, alpha);
          heads.push_back(batched_matmul(alpha, wh));
        }
        x = relu(heads.size() == 1 ? heads[0] : concat_cols(heads));
        break;
      }
    }
  }
  Tensor pooled = masked_mean_rows(x, node_mask);  // [B, h]
  return add(matmul(pooled, params.get("classifier.weight")), params.get("classifier.bias"));
}

/// Forward on a padded batch; `soft_adjacency`, when given, replaces the
/// batch's hard adjacency in every aggregation.
inline Tensor model_forward(const GnnConfig& cfg, const ParamSet& params, const GraphBatch& batch,
                            const std::optional<Tensor>& soft_adjacency = std::nullopt) {
  return model_forward(cfg, params, batch.features, soft_adjacency.value_or(batch.adjacency),
                       batch.node_mask);
}

struct Model {
  GnnConfig config;
  ParamSet params;
};

inline Checkpoint to_checkpoint(const Model& m) {
  return Checkpoint{"gnn", nlohmann::json(m.config), m.params};
}

inline Model model_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "gnn") throw CheckpointError("expected a gnn checkpoint, got '" + c.kind + "'");
  Model m{c.config.get<GnnConfig>(), c.params};
  ParamSet fresh = init_params(m.config, 0);
  if (fresh.size() != m.params.size()) {
    throw CheckpointError("checkpoint tensors do not match config " + m.config.label());
  }
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    const auto& [na, ta] = fresh.entries()[i];
    const auto& [nb, tb] = m.params.entries()[i];
    if (na != nb || ta.shape() != tb.shape()) {
      throw CheckpointError("checkpoint tensor '" + nb + "' does not match config " +
                            m.config.label());
    }
  }
  return m;
}

}  // namespace dfad
