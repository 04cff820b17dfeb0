#ifndef RPFEM_TESTS_RELATION_ORACLE_HPP_
#define RPFEM_TESTS_RELATION_ORACLE_HPP_

#include <cmath>
#include <vector>

#include "rpfem/relation_head.hpp"

namespace rpfem::testing {

// Straight loops over (i, j, a, b) with no shared code from the library
// path: every query, key and value is recomputed from the raw weights.
struct RelationOracle {
  NDArray edges;  // N x N x F_e
  NDArray alpha;  // H x N x N x C x C
};

inline RelationOracle relation_oracle(const NDArray& P, const Rpkg& g, const RelationHeadWeights& w) {
  const auto& cfg = w.config;
  const std::size_t N = P.shape[0], C = g.num_classes(), Fp = cfg.proposal_dim,
                    Fr = cfg.prior_dim, R = cfg.channels, H = cfg.heads, da = cfg.attn_dim,
                    dv = cfg.value_dim, Fe = cfg.edge_dim;
  RelationOracle out{NDArray(Shape{N, N, Fe}), NDArray(Shape{H, N, N, C, C})};
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      std::vector<double> merged(H * dv, 0.0);
      for (std::size_t h = 0; h < H; ++h) {
        const NDArray& Wq = w.query[h].value();
        const NDArray& Wk = w.key[h].value();
        const NDArray& Wv = w.value[h].value();
        std::vector<double> q(da, 0.0);
        for (std::size_t d = 0; d < da; ++d) {
          for (std::size_t f = 0; f < Fp; ++f) {
            q[d] += P.at(i, f) * Wq.at(f, d) + P.at(j, f) * Wq.at(Fp + f, d);
          }
        }
        std::vector<double> logit(C * C, 0.0);
        double top = -INFINITY;
        for (std::size_t a = 0; a < C; ++a) {
          for (std::size_t b = 0; b < C; ++b) {
            double s = 0.0;
            for (std::size_t d = 0; d < da; ++d) {
              double k = 0.0;
              for (std::size_t f = 0; f < Fr; ++f) {
                k += g.D.at(a, f) * Wk.at(f, d) + g.D.at(b, f) * Wk.at(Fr + f, d);
              }
              s += q[d] * k;
            }
            logit[a * C + b] = s / std::sqrt(static_cast<double>(da));
            top = std::max(top, logit[a * C + b]);
          }
        }
        double z = 0.0;
        for (double& l : logit) z += (l = std::exp(l - top));
        for (std::size_t a = 0; a < C; ++a) {
          for (std::size_t b = 0; b < C; ++b) {
            const double alpha = logit[a * C + b] / z;
            out.alpha.data[(((h * N + i) * N + j) * C + a) * C + b] = alpha;
            for (std::size_t e = 0; e < dv; ++e) {
              double v = 0.0;
              for (std::size_t r = 0; r < R; ++r) v += g.K.data[(a * C + b) * R + r] * Wv.at(r, e);
              merged[h * dv + e] += alpha * v;
            }
          }
        }
      }
      const NDArray& Wo = w.output.value();
      for (std::size_t e = 0; e < Fe; ++e) {
        double s = 0.0;
        for (std::size_t k = 0; k < H * dv; ++k) s += merged[k] * Wo.at(k, e);
        out.edges.data[(i * N + j) * Fe + e] = s;
      }
    }
  }
  return out;
}

/// A random graph over C classes carrying all three relations.
inline Rpkg random_rpkg(std::size_t C, std::size_t Fr, Rng& rng) {
  Rpkg g;
  for (std::size_t c = 0; c < C; ++c) g.classes.push_back("c" + std::to_string(c));
  g.D = random_normal(Shape{C, Fr}, rng);
  g.relations = {kAllRelations.begin(), kAllRelations.end()};
  g.K = random_uniform(Shape{C, C, g.channels()}, rng, 0.0, 1.0);
  return g;
}

}  // namespace rpfem::testing

#endif  // RPFEM_TESTS_RELATION_ORACLE_HPP_
