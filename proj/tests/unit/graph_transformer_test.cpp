#include <gtest/gtest.h>

#include <cmath>

#include "rpfem/graph_transformer.hpp"
#include "test_helpers.hpp"

namespace rpfem {
namespace {

using testing::max_abs_diff;

constexpr std::size_t kF = 4, kFe = 3, kFa = 6;

struct StackInputs {
  Tensor P, E;
  std::vector<ContextUpdateLayer> layers;
};

// Perturbs the LayerNorm affine terms so the gradients see non-trivial values.
void jitter_norms(std::vector<ContextUpdateLayer>& layers, Rng& rng) {
  for (auto& l : layers) {
    for (Tensor* t : {&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias, &l.edge_b, &l.score_b}) {
      for (double& v : t->mutable_data()) v += rng.uniform(-0.3, 0.3);
    }
  }
}

StackInputs make_setup(std::uint64_t seed, std::size_t N, std::size_t L) {
  Rng rng(seed);
  Rng wr = rng.split("layers"), dr = rng.split("data");
  StackInputs s;
  s.layers = make_context_stack(L, kF, kFe, kFa, wr);
  jitter_norms(s.layers, wr);
  s.P = Tensor(random_normal(Shape{N, kF}, dr), true);
  s.E = Tensor(random_normal(Shape{N, N, kFe}, dr), true);
  return s;
}

NDArray permute_nodes(const NDArray& x, const std::vector<std::size_t>& perm) {
  const std::size_t N = perm.size(), F = x.shape[1];
  NDArray out(x.shape);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t k = 0; k < F; ++k) out.at(i, k) = x.at(perm[i], k);
  }
  return out;
}

NDArray permute_edges(const NDArray& x, const std::vector<std::size_t>& perm) {
  const std::size_t N = perm.size(), F = x.shape[2];
  NDArray out(x.shape);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      for (std::size_t k = 0; k < F; ++k) {
        out.data[(i * N + j) * F + k] = x.data[(perm[i] * N + perm[j]) * F + k];
      }
    }
  }
  return out;
}

TEST(ContextUpdate, SingleNode) {
  StackInputs s = make_setup(1, 1, 1);
  ContextTrace trace;
  const ContextState st = context_update(s.P, {s.E, EdgeSource::prior}, s.layers[0], 0, &trace);
  EXPECT_EQ(st.Z.shape(), (Shape{1, kF}));
  EXPECT_EQ(trace.head_attention.data, std::vector<double>{1.0});
  EXPECT_EQ(trace.tail_attention.data, std::vector<double>{1.0});
  for (double v : st.Z.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(ContextUpdate, AttentionRowsAreDistributions) {
  StackInputs s = make_setup(2, 5, 1);
  ContextTrace trace;
  context_update(s.P, {s.E, EdgeSource::prior}, s.layers[0], 0, &trace);
  for (const NDArray* a : {&trace.head_attention, &trace.tail_attention}) {
    ASSERT_EQ(a->shape, (Shape{5, 5}));
    for (std::size_t i = 0; i < 5; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GT(a->at(i, j), 0.0);
        total += a->at(i, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(ContextUpdate, ZeroEdgeTransformLeavesOnlyTheNodeTerm) {
  StackInputs s = make_setup(3, 4, 1);
  ContextUpdateLayer& layer = s.layers[0];
  for (Tensor* t : {&layer.edge_w, &layer.edge_b}) {
    for (double& v : t->mutable_data()) v = 0.0;
  }
  ContextTrace trace;
  const ContextState st = context_update(s.P, {s.E, EdgeSource::prior}, layer, 0, &trace);
  EXPECT_LE(max_abs_diff(trace.message_norm_input.data, ops::normalize_rows(s.P.value()).data), 1e-12);

  NoGradGuard no_grad;
  const Tensor zh = ops::layer_norm(s.P, layer.ln1_gain, layer.ln1_bias);
  const Tensor hidden = ops::leaky_relu(ops::affine(zh, layer.ff1_w, layer.ff1_b));
  const Tensor ff = ops::leaky_relu(ops::affine(hidden, layer.ff2_w, layer.ff2_b));
  const Tensor want = ops::layer_norm(ops::add(zh, ff), layer.ln2_gain, layer.ln2_bias);
  EXPECT_LE(max_abs_diff(st.Z.data(), want.data()), 1e-12);
}

TEST(ContextUpdate, NormalizedRowsHaveZeroMeanUnitVariance) {
  StackInputs s = make_setup(4, 6, 1);
  ContextTrace trace;
  context_update(s.P, {s.E, EdgeSource::prior}, s.layers[0], 0, &trace);
  for (const NDArray* x : {&trace.message_norm_input, &trace.refine_norm_input}) {
    for (std::size_t i = 0; i < 6; ++i) {
      double mean = 0.0, var = 0.0;
      for (std::size_t k = 0; k < kF; ++k) mean += x->at(i, k) / kF;
      for (std::size_t k = 0; k < kF; ++k) var += (x->at(i, k) - mean) * (x->at(i, k) - mean) / kF;
      EXPECT_NEAR(mean, 0.0, 1e-12);
      EXPECT_NEAR(var, 1.0, 1e-3);
    }
  }
}

TEST(ContextUpdate, DefaultNormOutputIsStandardized) {
  Rng rng(5);
  const auto layers = make_context_stack(1, kF, kFe, kFa, rng);
  const Tensor P(random_normal(Shape{3, kF}, rng)), E(random_normal(Shape{3, 3, kFe}, rng));
  const Tensor Z = run_stack(P, E, layers);
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0.0;
    for (std::size_t k = 0; k < kF; ++k) mean += Z.value().at(i, k) / kF;
    EXPECT_NEAR(mean, 0.0, 1e-12);
  }
}

TEST(ContextUpdate, EdgeKindMustMatchLayerIndex) {
  StackInputs s = make_setup(6, 3, 2);
  EXPECT_THROW(context_update(s.P, {s.E, EdgeSource::adjacency}, s.layers[0], 0), ContractError);
  const EdgeTensor A = update_adjacency(s.P, {s.E, EdgeSource::prior}, s.layers[0], 0);
  const EdgeTensor as_prior{A.values, EdgeSource::prior};
  EXPECT_THROW(context_update(s.P, as_prior, s.layers[1], 1), ContractError);
  EXPECT_NO_THROW(context_update(s.P, A, s.layers[1], 1));
}

TEST(ContextUpdate, ShapeMismatchIsDimensionError) {
  StackInputs s = make_setup(7, 3, 1);
  EXPECT_THROW(context_update(s.P, {Tensor::zeros(Shape{3, 2, kFe}), EdgeSource::prior}, s.layers[0], 0),
               DimensionError);
  EXPECT_THROW(context_update(Tensor::zeros(Shape{3, kF + 1}), {s.E, EdgeSource::prior}, s.layers[0], 0),
               DimensionError);
}

TEST(Adjacency, ZeroScorerSplitsRolesEvenly) {
  StackInputs s = make_setup(8, 4, 2);
  ContextUpdateLayer& layer = s.layers[0];
  for (Tensor* t : {&layer.adj_w, &layer.adj_b}) {
    for (double& v : t->mutable_data()) v = 0.0;
  }
  const EdgeTensor A = update_adjacency(s.P, {s.E, EdgeSource::prior}, layer, 0);
  ASSERT_EQ(A.values.shape(), (Shape{4, 4, kFa}));
  EXPECT_EQ(A.source, EdgeSource::adjacency);
  NoGradGuard no_grad;
  const NDArray h = ops::affine(s.P, layer.head_w, layer.head_b).value();
  const NDArray t = ops::affine(s.P, layer.tail_w, layer.tail_b).value();
  const std::size_t half = kFa / 2;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      for (std::size_t k = 0; k < half; ++k) {
        EXPECT_NEAR(A.values.data()[(i * 4 + j) * kFa + k], 0.5 * h.at(i, k), 1e-15);
        EXPECT_NEAR(A.values.data()[(i * 4 + j) * kFa + half + k], 0.5 * t.at(j, k), 1e-15);
      }
    }
  }
}

TEST(Adjacency, RoleWeightsSumToOne) {
  // With h and t both set to ones, each A_ij entry pair is (c_i, d_j); c_i + d_i = 1.
  StackInputs s = make_setup(9, 3, 2);
  ContextUpdateLayer& layer = s.layers[0];
  for (Tensor* w : {&layer.head_w, &layer.tail_w}) {
    for (double& v : w->mutable_data()) v = 0.0;
  }
  for (Tensor* b : {&layer.head_b, &layer.tail_b}) {
    for (double& v : b->mutable_data()) v = 1.0;
  }
  const EdgeTensor A = update_adjacency(s.P, {s.E, EdgeSource::prior}, layer, 0);
  const std::size_t half = kFa / 2;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < half; ++k) {
      const double c = A.values.data()[(i * 3 + i) * kFa + k];
      const double d = A.values.data()[(i * 3 + i) * kFa + half + k];
      EXPECT_GT(c, 0.0);
      EXPECT_GT(d, 0.0);
      EXPECT_NEAR(c + d, 1.0, 1e-14);
    }
  }
}

TEST(Adjacency, LayerWithoutWeightsRefuses) {
  StackInputs s = make_setup(10, 3, 1);
  EXPECT_FALSE(s.layers[0].config.produces_adjacency);
  EXPECT_FALSE(s.layers[0].head_w.defined());
  EXPECT_THROW(update_adjacency(s.P, {s.E, EdgeSource::prior}, s.layers[0], 0), ContractError);
}

TEST(Adjacency, OddWidthIsConfigError) {
  Rng rng(0);
  EXPECT_THROW(make_context_stack(2, kF, kFe, 5, rng), ConfigError);
  EXPECT_THROW(make_context_stack(0, kF, kFe, 4, rng), ConfigError);
}

TEST(Stack, SingleLayerSkipsAdjacency) {
  StackInputs s = make_setup(11, 4, 1);
  const Tensor Z = run_stack(s.P, s.E, s.layers);
  const Tensor manual = context_update(s.P, {s.E, EdgeSource::prior}, s.layers[0], 0).Z;
  EXPECT_EQ(Z.value(), manual.value());
  const GradTape tape(Z);
  for (const detail::Node* n : tape.nodes()) {
    // Role softmax of the adjacency update works on a rank-3 tensor; nothing
    // in a single-layer graph should be rank 3 except the input edges.
    if (n->op && std::string_view(n->op) == "softmax") {
      EXPECT_EQ(n->value.shape.size(), 2u);
    }
  }
}

TEST(Stack, TwoLayersEqualManualComposition) {
  StackInputs s = make_setup(12, 4, 2);
  const Tensor Z = run_stack(s.P, s.E, s.layers);
  const EdgeTensor prior{s.E, EdgeSource::prior};
  const EdgeTensor A = update_adjacency(s.P, prior, s.layers[0], 0);
  const Tensor Z1 = context_update(s.P, prior, s.layers[0], 0).Z;
  const Tensor Z2 = context_update(Z1, A, s.layers[1], 1).Z;
  EXPECT_EQ(Z.value(), Z2.value());
}

TEST(Stack, PermutationEquivariance) {
  const std::vector<std::size_t> perm = {2, 4, 0, 3, 1};
  for (std::size_t L = 1; L <= 3; ++L) {
    StackInputs s = make_setup(20 + L, 5, L);
    std::vector<ContextTrace> traces, ptraces;
    const Tensor Z = run_stack(s.P, s.E, s.layers, &traces);
    const Tensor Zp = run_stack(Tensor(permute_nodes(s.P.value(), perm)),
                                Tensor(permute_edges(s.E.value(), perm)), s.layers, &ptraces);
    EXPECT_LE(max_abs_diff(Zp.data(), permute_nodes(Z.value(), perm).data), 1e-12) << "L = " << L;
    for (std::size_t l = 0; l < L; ++l) {
      const NDArray& a = traces[l].head_attention;
      const NDArray& b = ptraces[l].head_attention;
      for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(b.at(i, j), a.at(perm[i], perm[j]), 1e-12);
      }
    }
  }
}

TEST(Stack, GradientsMatchFiniteDifferences) {
  for (std::size_t L = 1; L <= 2; ++L) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      StackInputs s = make_setup(1000 * L + seed, 3, L);
      Rng wr(seed);
      const Tensor weights = testing::random_const(Shape{3, kF}, wr);
      std::vector<NamedTensor> inputs = {{"P", s.P}, {"E", s.E}};
      for (std::size_t l = 0; l < L; ++l) {
        for (auto& p : s.layers[l].parameters("layer" + std::to_string(l))) inputs.push_back(p);
      }
      const auto report = grad_check([&] { return testing::weighted_sum(run_stack(s.P, s.E, s.layers), weights); },
                                     inputs, 1e-5, 1e-4);
      EXPECT_TRUE(report.passed()) << "L = " << L << " seed " << seed << " max rel error "
                                   << report.max_rel_error();
    }
  }
}

}  // namespace
}  // namespace rpfem
