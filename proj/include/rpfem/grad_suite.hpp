#ifndef RPFEM_GRAD_SUITE_HPP_
#define RPFEM_GRAD_SUITE_HPP_

#include <functional>
#include <string>
#include <vector>

#include "rpfem/grad_check.hpp"
#include "rpfem/graph_transformer.hpp"
#include "rpfem/relation_head.hpp"
#include "rpfem/toy/model.hpp"

namespace rpfem {

struct SuiteResult {
  std::string name;
  std::size_t runs = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::size_t seeds = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
};

namespace detail {

struct SuiteCase {
  std::string name;
  std::function<Tensor()> f;
  std::vector<NamedTensor> inputs;
};

inline Tensor suite_param(Shape s, Rng& rng) { return Tensor(random_normal(std::move(s), rng), true); }
inline Tensor suite_const(Shape s, Rng& rng) { return Tensor(random_normal(std::move(s), rng), false); }
inline Tensor weighted(const Tensor& x, const Tensor& w) { return ops::sum(ops::mul(x, w)); }

// Fresh random inputs for every case at one seed. Everything the lambdas
// touch is owned by the shared_ptr they capture.
inline std::vector<SuiteCase> suite_cases(std::uint64_t seed) {
  Rng rng(seed);
  struct Vars {
    Tensor a, b, m, bias, b3, c3, q, k, v, w34, w32, w222, w33;
    std::vector<int> labels{0, 3, 2};
  };
  auto x = std::make_shared<Vars>();
  x->a = suite_param({3, 4}, rng);
  x->b = suite_param({3, 4}, rng);
  x->m = suite_param({4, 2}, rng);
  x->bias = suite_param({4}, rng);
  x->b3 = suite_param({2, 3, 4}, rng);
  x->c3 = suite_param({2, 4, 2}, rng);
  x->q = suite_param({3, 4}, rng);
  x->k = suite_param({5, 4}, rng);
  x->v = suite_param({5, 3}, rng);
  x->w34 = suite_const({3, 4}, rng);
  x->w32 = suite_const({3, 2}, rng);
  x->w222 = suite_const({2, 3, 2}, rng);
  x->w33 = suite_const({3, 3}, rng);

  std::vector<SuiteCase> cases = {
      {"add", [x] { return weighted(ops::add(x->a, x->b), x->w34); }, {{"a", x->a}, {"b", x->b}}},
      {"sub", [x] { return weighted(ops::sub(x->a, x->b), x->w34); }, {{"a", x->a}, {"b", x->b}}},
      {"mul", [x] { return weighted(ops::mul(x->a, x->b), x->w34); }, {{"a", x->a}, {"b", x->b}}},
      {"scale", [x] { return weighted(ops::scale(x->a, -1.7), x->w34); }, {{"a", x->a}}},
      {"add_bias", [x] { return weighted(ops::add_bias(x->a, x->bias), x->w34); },
       {{"a", x->a}, {"bias", x->bias}}},
      {"matmul", [x] { return weighted(ops::matmul(x->a, x->m), x->w32); }, {{"a", x->a}, {"m", x->m}}},
      {"batched_matmul", [x] { return weighted(ops::batched_matmul(x->b3, x->c3), x->w222); },
       {{"b3", x->b3}, {"c3", x->c3}}},
      {"leaky_relu", [x] { return weighted(ops::leaky_relu(x->a, 0.01), x->w34); }, {{"a", x->a}}},
      {"softmax", [x] { return weighted(ops::softmax(x->a, 1), x->w34); }, {{"a", x->a}}},
      {"layer_norm", [x] { return weighted(ops::layer_norm(x->a, x->bias, x->bias), x->w34); },
       {{"a", x->a}, {"bias", x->bias}}},
      {"concat",
       [x] { return ops::sum(ops::mul(ops::concat({x->a, x->b}, 0), ops::concat({x->w34, x->w34}, 0))); },
       {{"a", x->a}, {"b", x->b}}},
      {"slice_axis",
       [x] { return weighted(ops::slice_axis(x->b3, 2, 1, 3), ops::reshape(x->w34, {2, 3, 2})); },
       {{"b3", x->b3}}},
      {"gather_rows", [x] { return weighted(ops::gather_rows(x->a, {2, 0, 2}), x->w34); }, {{"a", x->a}}},
      {"sum_axis",
       [x] { return weighted(ops::sum_axis(x->b3, 1), ops::reshape(ops::slice_rows(x->w34, 0, 2), {2, 4})); },
       {{"b3", x->b3}}},
      {"cross_entropy", [x] { return ops::cross_entropy(x->a, x->labels); }, {{"a", x->a}}},
      {"attention", [x] { return weighted(ops::attention(x->q, x->k, x->v, 0.5), x->w33); },
       {{"q", x->q}, {"k", x->k}, {"v", x->v}}},
  };

  // Relation head on a random graph with all relations.
  {
    RelationHeadConfig rc;
    rc.proposal_dim = 4;
    rc.prior_dim = 3;
    rc.heads = 1 + seed % 3;
    rc.attn_dim = 5;
    rc.value_dim = 3;
    rc.edge_dim = 4;
    Rng wr = rng.split("relation");
    auto w = std::make_shared<RelationHeadWeights>(RelationHeadWeights::init(rc, wr));
    auto g = std::make_shared<Rpkg>();
    for (std::size_t c = 0; c < 3; ++c) g->classes.push_back("c" + std::to_string(c));
    g->D = random_normal({3, 3}, rng);
    g->relations = {kAllRelations.begin(), kAllRelations.end()};
    g->K = random_uniform({3, 3, 8}, rng, 0.0, 1.0);
    Tensor P = suite_param({3, 4}, rng);
    const Tensor wE = suite_const({3, 3, 4}, rng);
    std::vector<NamedTensor> inputs = {{"P", P}};
    for (auto& p : w->parameters()) inputs.push_back(p);
    cases.push_back({"relation_head", [w, g, P, wE] { return weighted(predict_edges(P, *g, *w), wE); }, inputs});
  }

  // Context stacks, L = 1..3.
  for (std::size_t L = 1; L <= 3; ++L) {
    Rng wr = rng.split(L);
    auto layers = std::make_shared<std::vector<ContextUpdateLayer>>(make_context_stack(L, 4, 3, 4, wr));
    for (auto& l : *layers) {
      for (Tensor* t : {&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias}) {
        for (double& v : t->mutable_data()) v += wr.uniform(-0.3, 0.3);
      }
    }
    Tensor P = suite_param({3, 4}, rng), E = suite_param({3, 3, 3}, rng);
    const Tensor wZ = suite_const({3, 4}, rng);
    std::vector<NamedTensor> inputs = {{"P", P}, {"E", E}};
    for (std::size_t l = 0; l < L; ++l) {
      for (auto& p : (*layers)[l].parameters("layer" + std::to_string(l))) inputs.push_back(p);
    }
    cases.push_back({"context_stack_L" + std::to_string(L),
                     [layers, P, E, wZ] { return weighted(run_stack(P, E, *layers), wZ); }, inputs});
  }

  // Toy classifier end to end under cross-entropy.
  {
    toy::ToyTaskSpec spec = toy::default_toy_spec(seed);
    spec.F_p = 4;
    spec.N = 4;
    spec.prototypes = toy::toy_prototypes(spec.C, spec.F_p, seed);
    auto g = std::make_shared<Rpkg>(toy::toy_rpkg(spec, 20, seed, {kAllRelations.begin(), kAllRelations.end()}));
    toy::ModelConfig mc;
    mc.layers = 2;
    mc.prior_dim = mc.node_dim = 4;
    mc.attn_dim = mc.value_dim = mc.edge_dim = mc.adjacency_dim = 4;
    Rng wr = rng.split("toy");
    auto m = std::make_shared<toy::EnhancedHead>(toy::EnhancedHead::init(mc, spec.F_p, spec.C, wr));
    Rng sr = rng.split("scene");
    const toy::ToyScene scene = toy::generate_scene(spec, sr);
    Tensor P(scene.P, true);
    auto labels = std::make_shared<std::vector<int>>(scene.labels);
    std::vector<NamedTensor> inputs = {{"P", P}};
    for (auto& p : m->named_parameters()) inputs.push_back(p);
    cases.push_back({"toy_forward", [m, g, P, labels] { return ops::cross_entropy(toy::forward(P, g.get(), *m), *labels); },
                     inputs});
  }
  return cases;
}

}  // namespace detail

/// Every differentiable op, the relation head, context stacks of depth 1-3
/// and the toy classifier, each checked at `seeds` consecutive seeds.
inline std::vector<SuiteResult> run_grad_suite(const SuiteOptions& opt = {},
                                               const std::function<void(const SuiteResult&)>& on_case = nullptr) {
  std::vector<SuiteResult> results;
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    auto cases = detail::suite_cases(opt.seed + s);
    if (results.empty()) {
      for (const auto& c : cases) results.push_back({c.name});
    }
    for (std::size_t k = 0; k < cases.size(); ++k) {
      const auto report = grad_check(cases[k].f, cases[k].inputs, opt.step, opt.tolerance);
      SuiteResult& r = results[k];
      ++r.runs;
      r.max_rel_error = std::max(r.max_rel_error, report.max_rel_error());
      r.passed = r.passed && report.passed();
    }
  }
  if (on_case) {
    for (const auto& r : results) on_case(r);
  }
  return results;
}

}  // namespace rpfem

#endif  // RPFEM_GRAD_SUITE_HPP_
