#ifndef RPFEM_GRAPH_TRANSFORMER_HPP_
#define RPFEM_GRAPH_TRANSFORMER_HPP_

#include <optional>
#include <string>
#include <vector>

#include "rpfem/grad_check.hpp"
#include "rpfem/ops.hpp"
#include "rpfem/random.hpp"
#include "rpfem/relation_head.hpp"

namespace rpfem {

/// Where an edge tensor came from. The first context update consumes the
/// relation head's prediction; later ones consume the evolved adjacency.
enum class EdgeSource { prior, adjacency };

/// [N x N x F] edge features tagged with their origin.
struct EdgeTensor {
  Tensor values;
  EdgeSource source = EdgeSource::prior;
};

struct ContextLayerConfig {
  std::size_t node_dim = 16;       // F_z; also the width of incoming nodes
  std::size_t edge_dim = 16;       // F_e for the first layer, F_a after
  std::size_t adjacency_dim = 16;  // F_a, split evenly between head and tail roles
  bool produces_adjacency = false;
  double slope = 0.01;
  double eps = 1e-5;

  void validate() const {
    if (node_dim == 0 || edge_dim == 0) throw ConfigError("context layer: zero width");
    if (produces_adjacency && (adjacency_dim == 0 || adjacency_dim % 2 != 0)) {
      throw ConfigError("context layer: adjacency width must be positive and even, got " +
                        std::to_string(adjacency_dim));
    }
    if (!(slope > 0.0) || !(eps > 0.0)) throw ConfigError("context layer: slope and eps must be positive");
  }
};

/// One graph-transformer layer. The adjacency weights exist only on layers
/// followed by another layer; nothing reads the last layer's adjacency.
struct ContextUpdateLayer {
  ContextLayerConfig config;
  Tensor edge_w, edge_b;    // edge transform, F_edge -> F_z
  Tensor score_w, score_b;  // neighbor scorer, [f_ij (+) n_i] -> 1
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Tensor head_w, head_b, tail_w, tail_b;  // node transforms, F_z -> F_a/2
  Tensor adj_w, adj_b;                    // [delta_i (+) h_i] -> F_a/2

  static ContextUpdateLayer init(const ContextLayerConfig& config, Rng& rng) {
    config.validate();
    const std::size_t F = config.node_dim, half = config.adjacency_dim / 2;
    auto zeros = [](std::size_t n) { return Tensor::zeros(Shape{n}, true); };
    ContextUpdateLayer l;
    l.config = config;
    l.edge_w = xavier_uniform(config.edge_dim, F, rng);
    l.edge_b = zeros(F);
    l.score_w = xavier_uniform(2 * F, 1, rng);
    l.score_b = zeros(1);
    l.ff1_w = xavier_uniform(F, F, rng);
    l.ff1_b = zeros(F);
    l.ff2_w = xavier_uniform(F, F, rng);
    l.ff2_b = zeros(F);
    l.ln1_gain = Tensor(NDArray::filled(Shape{F}, 1.0), true);
    l.ln1_bias = zeros(F);
    l.ln2_gain = Tensor(NDArray::filled(Shape{F}, 1.0), true);
    l.ln2_bias = zeros(F);
    if (config.produces_adjacency) {
      l.head_w = xavier_uniform(F, half, rng);
      l.head_b = zeros(half);
      l.tail_w = xavier_uniform(F, half, rng);
      l.tail_b = zeros(half);
      l.adj_w = xavier_uniform(config.edge_dim + half, half, rng);
      l.adj_b = zeros(half);
    }
    return l;
  }

  std::vector<NamedTensor> parameters(const std::string& prefix) const {
    std::vector<NamedTensor> out = {
        {prefix + ".edge_w", edge_w},     {prefix + ".edge_b", edge_b},
        {prefix + ".score_w", score_w},   {prefix + ".score_b", score_b},
        {prefix + ".ff1_w", ff1_w},       {prefix + ".ff1_b", ff1_b},
        {prefix + ".ff2_w", ff2_w},       {prefix + ".ff2_b", ff2_b},
        {prefix + ".ln1_gain", ln1_gain}, {prefix + ".ln1_bias", ln1_bias},
        {prefix + ".ln2_gain", ln2_gain}, {prefix + ".ln2_bias", ln2_bias},
    };
    if (config.produces_adjacency) {
      out.insert(out.end(), {{prefix + ".head_w", head_w},
                             {prefix + ".head_b", head_b},
                             {prefix + ".tail_w", tail_w},
                             {prefix + ".tail_b", tail_b},
                             {prefix + ".adj_w", adj_w},
                             {prefix + ".adj_b", adj_b}});
    }
    return out;
  }
};

/// Intermediate values of one context update, for diagnostics.
struct ContextTrace {
  NDArray head_attention;  // [N x N], rows over neighbors j
  NDArray tail_attention;
  NDArray message_norm_input;   // pre-affine LayerNorm output, first site
  NDArray refine_norm_input;    // pre-affine LayerNorm output, second site
  NDArray message_norm_raw;     // the rows those were computed from
  NDArray refine_norm_raw;
};

struct ContextState {
  Tensor Z;
  std::optional<EdgeTensor> A;
  std::size_t layer = 0;
};

namespace detail {

inline void check_context_inputs(const Tensor& nodes, const EdgeTensor& edges,
                                 const ContextUpdateLayer& layer, std::size_t l) {
  const auto& cfg = layer.config;
  if (nodes.rank() != 2 || nodes.dim(0) == 0) {
    throw ContractError("context update: nodes must be a non-empty [N x F] matrix, got " +
                        shape_str(nodes.shape()));
  }
  const std::size_t N = nodes.dim(0);
  if (nodes.dim(1) != cfg.node_dim) {
    throw DimensionError("context update: node width " + std::to_string(nodes.dim(1)) +
                         " but layer expects " + std::to_string(cfg.node_dim));
  }
  if (edges.values.shape() != Shape{N, N, cfg.edge_dim}) {
    throw DimensionError("context update: edges " + shape_str(edges.values.shape()) +
                         " but layer expects " + shape_str(Shape{N, N, cfg.edge_dim}));
  }
  const bool first = l == 0;
  if (first != (edges.source == EdgeSource::prior)) {
    throw ContractError("context update: layer " + std::to_string(l) +
                        (first ? " needs the predicted prior edges"
                               : " needs the adjacency from the previous layer"));
  }
}

inline std::vector<std::size_t> transpose_pair_indices(std::size_t n) {
  std::vector<std::size_t> out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = j * n + i;
  }
  return out;
}

// Softmax over neighbors of LReLU(score([f_ij (+) n_i])), then the
// attention-weighted sum of f_ij. `pair_feats` is [N^2 x F], row i*N+j.
inline Tensor role_message(const Tensor& pair_feats, const Tensor& node_rows,
                           const ContextUpdateLayer& layer, std::size_t n, NDArray* alpha_out) {
  const std::size_t F = layer.config.node_dim;
  const Tensor logits = ops::leaky_relu(
      ops::affine(ops::concat({pair_feats, node_rows}, 1), layer.score_w, layer.score_b),
      layer.config.slope);
  const Tensor alpha = ops::softmax(ops::reshape(logits, Shape{n, n}), 1);
  if (alpha_out) *alpha_out = alpha.value();
  const Tensor msg = ops::batched_matmul(ops::reshape(alpha, Shape{n, 1, n}),
                                         ops::reshape(pair_feats, Shape{n, n, F}));
  return ops::reshape(msg, Shape{n, F});
}

inline Tensor feed_forward(const Tensor& x, const ContextUpdateLayer& layer) {
  const double slope = layer.config.slope;
  const Tensor hidden = ops::leaky_relu(ops::affine(x, layer.ff1_w, layer.ff1_b), slope);
  return ops::leaky_relu(ops::affine(hidden, layer.ff2_w, layer.ff2_b), slope);
}

}  // namespace detail

/// Message passing over the edge tensor. Head-role messages aggregate the
/// outgoing edges of node i (row i), tail-role messages its incoming edges
/// (column i). Returns Z only; see update_adjacency for A.
inline ContextState context_update(const Tensor& nodes, const EdgeTensor& edges,
                                   const ContextUpdateLayer& layer, std::size_t l,
                                   ContextTrace* trace = nullptr) {
  detail::check_context_inputs(nodes, edges, layer, l);
  const auto& cfg = layer.config;
  const std::size_t N = nodes.dim(0);
  const auto [rows, cols] = detail::pair_indices(N);

  const Tensor flat = ops::reshape(edges.values, Shape{N * N, cfg.edge_dim});
  const Tensor f = ops::affine(flat, layer.edge_w, layer.edge_b);  // [N^2 x F_z]
  const Tensor node_rows = ops::gather_rows(nodes, rows);
  const Tensor f_tail = ops::gather_rows(f, detail::transpose_pair_indices(N));

  const Tensor m_head = detail::role_message(f, node_rows, layer, N,
                                             trace ? &trace->head_attention : nullptr);
  const Tensor m_tail = detail::role_message(f_tail, node_rows, layer, N,
                                             trace ? &trace->tail_attention : nullptr);

  const Tensor pre1 = ops::add(ops::add(nodes, m_head), m_tail);
  const Tensor z_hat = ops::layer_norm(pre1, layer.ln1_gain, layer.ln1_bias, cfg.eps);
  const Tensor pre2 = ops::add(z_hat, detail::feed_forward(z_hat, layer));
  const Tensor z = ops::layer_norm(pre2, layer.ln2_gain, layer.ln2_bias, cfg.eps);
  if (trace) {
    trace->message_norm_input = ops::normalize_rows(pre1.value(), cfg.eps);
    trace->refine_norm_input = ops::normalize_rows(pre2.value(), cfg.eps);
    trace->message_norm_raw = pre1.value();
    trace->refine_norm_raw = pre2.value();
  }
  return {z, std::nullopt, l};
}

/// Evolves the edge tensor for the next layer:
///   h_i = H(n_i), t_i = T(n_i)
///   a_i = LReLU(A([mean_j delta_ij (+) h_i])), b_i likewise over column i
///   (c_i, d_i) = softmax over the two roles of (a_i, b_i), per feature
///   A_ij = [c_i * h_i (+) d_j * t_j]
inline EdgeTensor update_adjacency(const Tensor& nodes, const EdgeTensor& edges,
                                   const ContextUpdateLayer& layer, std::size_t l) {
  detail::check_context_inputs(nodes, edges, layer, l);
  const auto& cfg = layer.config;
  if (!cfg.produces_adjacency) {
    throw ContractError("update_adjacency: layer " + std::to_string(l) + " has no adjacency weights");
  }
  const std::size_t N = nodes.dim(0), half = cfg.adjacency_dim / 2;
  const double inv_n = 1.0 / static_cast<double>(N);

  const Tensor h_head = ops::affine(nodes, layer.head_w, layer.head_b);
  const Tensor h_tail = ops::affine(nodes, layer.tail_w, layer.tail_b);
  const Tensor delta_head = ops::scale(ops::sum_axis(edges.values, 1), inv_n);  // row i
  const Tensor delta_tail = ops::scale(ops::sum_axis(edges.values, 0), inv_n);  // column i

  const Tensor a_head = ops::leaky_relu(
      ops::affine(ops::concat({delta_head, h_head}, 1), layer.adj_w, layer.adj_b), cfg.slope);
  const Tensor a_tail = ops::leaky_relu(
      ops::affine(ops::concat({delta_tail, h_tail}, 1), layer.adj_w, layer.adj_b), cfg.slope);

  const Tensor roles = ops::softmax(
      ops::reshape(ops::concat({a_head, a_tail}, 1), Shape{N, 2, half}), 1);
  const Tensor c_head = ops::reshape(ops::slice_axis(roles, 1, 0, 1), Shape{N, half});
  const Tensor c_tail = ops::reshape(ops::slice_axis(roles, 1, 1, 2), Shape{N, half});
  const Tensor u_head = ops::mul(c_head, h_head);
  const Tensor u_tail = ops::mul(c_tail, h_tail);

  const auto [rows, cols] = detail::pair_indices(N);
  const Tensor A = ops::concat({ops::gather_rows(u_head, rows), ops::gather_rows(u_tail, cols)}, 1);
  return {ops::reshape(A, Shape{N, N, cfg.adjacency_dim}), EdgeSource::adjacency};
}

/// Builds L layers: the first reads F_e-wide edges, later ones F_a-wide
/// adjacency; every layer but the last evolves the adjacency.
inline std::vector<ContextUpdateLayer> make_context_stack(std::size_t layers, std::size_t node_dim,
                                                          std::size_t edge_dim,
                                                          std::size_t adjacency_dim, Rng& rng,
                                                          double slope = 0.01) {
  if (layers == 0) throw ConfigError("context stack needs at least one layer");
  std::vector<ContextUpdateLayer> out;
  for (std::size_t l = 0; l < layers; ++l) {
    ContextLayerConfig cfg;
    cfg.node_dim = node_dim;
    cfg.edge_dim = l == 0 ? edge_dim : adjacency_dim;
    cfg.adjacency_dim = adjacency_dim;
    cfg.produces_adjacency = l + 1 < layers;
    cfg.slope = slope;
    Rng layer_rng = rng.split(l);
    out.push_back(ContextUpdateLayer::init(cfg, layer_rng));
  }
  return out;
}

/// Runs L context updates over (P, E); the edges are dropped at the end.
inline Tensor run_stack(const Tensor& P, const Tensor& E,
                        const std::vector<ContextUpdateLayer>& layers,
                        std::vector<ContextTrace>* traces = nullptr) {
  if (layers.empty()) throw ContractError("run_stack: empty layer list");
  Tensor nodes = P;
  EdgeTensor edges{E, EdgeSource::prior};
  if (traces) traces->assign(layers.size(), {});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::optional<EdgeTensor> next;
    if (l + 1 < layers.size()) next = update_adjacency(nodes, edges, layers[l], l);
    nodes = context_update(nodes, edges, layers[l], l, traces ? &(*traces)[l] : nullptr).Z;
    if (next) edges = *next;
  }
  return nodes;
}

}  // namespace rpfem

#endif  // RPFEM_GRAPH_TRANSFORMER_HPP_
