#ifndef RPFEM_RELATION_HEAD_HPP_
#define RPFEM_RELATION_HEAD_HPP_

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rpfem/grad_check.hpp"
#include "rpfem/ops.hpp"
#include "rpfem/random.hpp"
#include "rpfem/rpkg.hpp"

namespace rpfem {

struct RelationHeadConfig {
  std::size_t proposal_dim = 16;  // F_p
  std::size_t prior_dim = 16;     // F_r, width of the class embeddings
  std::size_t channels = 8;       // R
  std::size_t heads = 2;
  std::size_t attn_dim = 16;   // query/key width
  std::size_t value_dim = 16;  // per-head value width
  std::size_t edge_dim = 16;   // F_e

  void validate() const {
    if (proposal_dim == 0 || prior_dim == 0 || channels == 0 || heads == 0 || attn_dim == 0 ||
        value_dim == 0 || edge_dim == 0) {
      throw ConfigError("relation head: all widths and the head count must be positive");
    }
  }
};

/// Per head: query [2F_p x d_a], key [2F_r x d_a], value [R x d_v]. One
/// output projection [H*d_v x F_e] merges the concatenated heads.
struct RelationHeadWeights {
  RelationHeadConfig config;
  std::vector<Tensor> query, key, value;
  Tensor output;

  static RelationHeadWeights init(const RelationHeadConfig& config, Rng& rng) {
    config.validate();
    RelationHeadWeights w;
    w.config = config;
    for (std::size_t h = 0; h < config.heads; ++h) {
      w.query.push_back(xavier_uniform(2 * config.proposal_dim, config.attn_dim, rng));
      w.key.push_back(xavier_uniform(2 * config.prior_dim, config.attn_dim, rng));
      w.value.push_back(xavier_uniform(config.channels, config.value_dim, rng));
    }
    w.output = xavier_uniform(config.heads * config.value_dim, config.edge_dim, rng);
    return w;
  }

  std::vector<NamedTensor> parameters(const std::string& prefix = "relation") const {
    std::vector<NamedTensor> out;
    for (std::size_t h = 0; h < query.size(); ++h) {
      const std::string head = prefix + ".head" + std::to_string(h);
      out.emplace_back(head + ".query", query[h]);
      out.emplace_back(head + ".key", key[h]);
      out.emplace_back(head + ".value", value[h]);
    }
    out.emplace_back(prefix + ".output", output);
    return out;
  }
};

namespace detail {

inline void check_relation_inputs(const Tensor& P, const Rpkg& g, const RelationHeadWeights& w) {
  const auto& cfg = w.config;
  if (g.num_classes() == 0) throw ContractError("relation head: RPKG has no classes");
  if (P.rank() != 2 || P.dim(0) == 0) {
    throw ContractError("relation head: proposals must be a non-empty [N x F_p] matrix, got " +
                        shape_str(P.shape()));
  }
  if (P.dim(1) != cfg.proposal_dim) {
    throw ConfigError("relation head: proposal width " + std::to_string(P.dim(1)) +
                      " but weights expect F_p = " + std::to_string(cfg.proposal_dim));
  }
  if (g.embedding_dim() != cfg.prior_dim) {
    throw ConfigError("relation head: RPKG embedding width " + std::to_string(g.embedding_dim()) +
                      " but weights expect F_r = " + std::to_string(cfg.prior_dim));
  }
  if (g.channels() != cfg.channels) {
    throw ConfigError("relation head: RPKG has R = " + std::to_string(g.channels()) +
                      " channels but weights expect R = " + std::to_string(cfg.channels));
  }
  if (w.query.size() != cfg.heads || w.key.size() != cfg.heads || w.value.size() != cfg.heads) {
    throw ConfigError("relation head: weight list does not match head count");
  }
}

/// Row r = i*n + j of the returned pair lists refers to (i, j).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> pair_indices(std::size_t n) {
  std::vector<std::size_t> first(n * n), second(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      first[i * n + j] = i;
      second[i * n + j] = j;
    }
  }
  return {std::move(first), std::move(second)};
}

/// W [x_a (+) x_b] for every ordered pair, computed as W_top x_a + W_bottom x_b
/// so the [n^2 x 2F] stacked inputs are never built.
inline Tensor pair_projection(const Tensor& x, const Tensor& weight) {
  const std::size_t n = x.dim(0), width = x.dim(1);
  const auto [first, second] = pair_indices(n);
  const Tensor top = ops::matmul(x, ops::slice_rows(weight, 0, width));
  const Tensor bottom = ops::matmul(x, ops::slice_rows(weight, width, 2 * width));
  return ops::add(ops::gather_rows(top, first), ops::gather_rows(bottom, second));
}

}  // namespace detail

/// Predicts the N x N x F_e edge tensor of the fully connected scene graph
/// over proposals P. Every ordered proposal pair queries all C^2 class pairs
/// of the prior graph; the softmax-weighted, projected prior edges are
/// summed per head, heads are concatenated and mapped to F_e.
inline Tensor predict_edges(const Tensor& P, const Rpkg& g, const RelationHeadWeights& w) {
  detail::check_relation_inputs(P, g, w);
  const auto& cfg = w.config;
  const std::size_t N = P.dim(0), C = g.num_classes();
  const Tensor D(g.D);
  const Tensor priors(Shape{C * C, cfg.channels}, g.K.data);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.attn_dim));

  std::vector<Tensor> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Tensor queries = detail::pair_projection(P, w.query[h]);  // [N^2 x d_a]
    const Tensor keys = detail::pair_projection(D, w.key[h]);       // [C^2 x d_a]
    const Tensor values = ops::matmul(priors, w.value[h]);          // [C^2 x d_v]
    heads.push_back(ops::attention(queries, keys, values, scale));
  }
  const Tensor merged = cfg.heads == 1 ? heads.front() : ops::concat(heads, 1);
  return ops::reshape(ops::matmul(merged, w.output), Shape{N, N, cfg.edge_dim});
}

/// Attention weights [H x N x N x C x C]; each (h, i, j) slice is a
/// distribution over class pairs. Materializes everything, so keep it to
/// small graphs.
inline NDArray attention_maps(const Tensor& P, const Rpkg& g, const RelationHeadWeights& w) {
  detail::check_relation_inputs(P, g, w);
  NoGradGuard no_grad;
  const auto& cfg = w.config;
  const std::size_t N = P.dim(0), C = g.num_classes(), pairs = N * N, classes = C * C;
  const Tensor D(g.D);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.attn_dim));
  NDArray out(Shape{cfg.heads, N, N, C, C});
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Tensor queries = detail::pair_projection(P, w.query[h]);
    const Tensor keys = detail::pair_projection(D, w.key[h]);
    NDArray logits(Shape{pairs, classes});
    for (std::size_t r = 0; r < pairs; ++r) {
      for (std::size_t s = 0; s < classes; ++s) {
        double dot = 0.0;
        for (std::size_t d = 0; d < cfg.attn_dim; ++d) {
          dot += queries.data()[r * cfg.attn_dim + d] * keys.data()[s * cfg.attn_dim + d];
        }
        logits.data[r * classes + s] = dot * scale;
      }
    }
    const Tensor alpha = ops::softmax(Tensor(std::move(logits)), 1);
    std::copy(alpha.data().begin(), alpha.data().end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(h * pairs * classes));
  }
  return out;
}

}  // namespace rpfem

#endif  // RPFEM_RELATION_HEAD_HPP_
