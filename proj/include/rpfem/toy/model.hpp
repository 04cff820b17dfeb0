#ifndef RPFEM_TOY_MODEL_HPP_
#define RPFEM_TOY_MODEL_HPP_

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rpfem/graph_transformer.hpp"
#include "rpfem/optim.hpp"
#include "rpfem/parallel.hpp"
#include "rpfem/relation_head.hpp"
#include "rpfem/toy/task.hpp"

namespace rpfem::toy {

struct ModelConfig {
  bool baseline = false;  // classifier over P alone
  std::size_t heads = 2;
  std::size_t layers = 1;
  std::size_t prior_dim = 16;  // F_r
  std::size_t channels = 8;    // R
  std::size_t attn_dim = 16;
  std::size_t value_dim = 16;
  std::size_t edge_dim = 16;       // F_e
  std::size_t node_dim = 16;       // F_z
  std::size_t adjacency_dim = 16;  // F_a

  void validate(std::size_t proposal_dim) const {
    if (baseline) return;
    if (heads == 0) throw ConfigError("model: need at least one relation head");
    if (layers == 0) throw ConfigError("model: need at least one context layer");
    if (node_dim != proposal_dim) {
      throw ConfigError("model: F_z = " + std::to_string(node_dim) + " must equal F_p = " +
                        std::to_string(proposal_dim) + " (the first layer adds messages to P)");
    }
    if (adjacency_dim == 0 || adjacency_dim % 2 != 0) throw ConfigError("model: F_a must be positive and even");
  }

  nlohmann::json to_json() const {
    if (baseline) return {{"baseline", true}};
    return {{"baseline", false},   {"heads", heads},         {"layers", layers},
            {"prior_dim", prior_dim}, {"channels", channels}, {"attn_dim", attn_dim},
            {"value_dim", value_dim}, {"edge_dim", edge_dim}, {"node_dim", node_dim},
            {"adjacency_dim", adjacency_dim}};
  }
};

/// Relation head + context layers + a linear classifier over [p_i (+) z_i]
/// with C+1 outputs (the last one flags duplicates). In baseline mode only
/// the classifier exists and it reads p_i alone.
struct EnhancedHead {
  ModelConfig config;
  std::size_t proposal_dim = 0, outputs = 0;
  RelationHeadWeights relation;
  std::vector<ContextUpdateLayer> layers;
  Tensor cls_w, cls_b;

  static EnhancedHead init(const ModelConfig& config, std::size_t proposal_dim, std::size_t classes,
                           Rng& rng) {
    config.validate(proposal_dim);
    EnhancedHead m;
    m.config = config;
    m.proposal_dim = proposal_dim;
    m.outputs = classes + 1;
    if (!config.baseline) {
      RelationHeadConfig rc;
      rc.proposal_dim = proposal_dim;
      rc.prior_dim = config.prior_dim;
      rc.channels = config.channels;
      rc.heads = config.heads;
      rc.attn_dim = config.attn_dim;
      rc.value_dim = config.value_dim;
      rc.edge_dim = config.edge_dim;
      Rng rel = rng.split("relation");
      m.relation = RelationHeadWeights::init(rc, rel);
      Rng ctx = rng.split("context");
      m.layers = make_context_stack(config.layers, config.node_dim, config.edge_dim,
                                    config.adjacency_dim, ctx);
    }
    Rng cls = rng.split("classifier");
    const std::size_t in = config.baseline ? proposal_dim : proposal_dim + config.node_dim;
    m.cls_w = xavier_uniform(in, m.outputs, cls);
    m.cls_b = Tensor::zeros(Shape{m.outputs}, true);
    return m;
  }

  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    if (!config.baseline) {
      out = relation.parameters("relation");
      for (std::size_t l = 0; l < layers.size(); ++l) {
        for (auto& p : layers[l].parameters("context" + std::to_string(l))) out.push_back(std::move(p));
      }
    }
    out.emplace_back("classifier.w", cls_w);
    out.emplace_back("classifier.b", cls_b);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }
};

/// logits [N x (C+1)]. `rpkg` may be null in baseline mode.
inline Tensor forward(const Tensor& P, const Rpkg* rpkg, const EnhancedHead& m) {
  if (P.rank() != 2 || P.dim(1) != m.proposal_dim) {
    throw DimensionError("forward: proposals " + shape_str(P.shape()) + " but model expects width " +
                         std::to_string(m.proposal_dim));
  }
  if (m.config.baseline) return ops::affine(P, m.cls_w, m.cls_b);
  if (!rpkg) throw ConfigError("forward: the enhanced model needs an RPKG");
  const Tensor E = predict_edges(P, *rpkg, m.relation);
  const Tensor Z = run_stack(P, E, m.layers);
  return ops::affine(ops::concat({P, Z}, 1), m.cls_w, m.cls_b);
}

inline Tensor forward(const ToyScene& scene, const Rpkg* rpkg, const EnhancedHead& m) {
  return forward(Tensor(scene.P), rpkg, m);
}

// ---------------------------------------------------------------------------
// Evaluation

struct Metrics {
  double overall_acc = 0.0;
  std::optional<double> ambiguous_acc;
  std::optional<double> duplicate_detection_rate;
  std::vector<std::optional<double>> per_class_acc;  // C+1 entries, last = duplicate
  std::size_t proposals = 0, ambiguous = 0, duplicates = 0;

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
    nlohmann::json per = nlohmann::json::array();
    for (const auto& v : per_class_acc) per.push_back(opt(v));
    return {{"overall_acc", overall_acc},
            {"ambiguous_acc", opt(ambiguous_acc)},
            {"duplicate_detection_rate", opt(duplicate_detection_rate)},
            {"per_class_acc", per},
            {"proposals", proposals},
            {"ambiguous", ambiguous},
            {"duplicates", duplicates}};
  }
};

inline std::vector<int> argmax_rows(const NDArray& logits) {
  const std::size_t n = logits.shape[0], k = logits.shape[1];
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

/// Accuracy counts from given predictions; kept separate from the model so
/// the bookkeeping can be tested on its own.
inline Metrics score_predictions(const std::vector<ToyScene>& scenes,
                                 const std::vector<std::vector<int>>& predictions, std::size_t classes) {
  if (scenes.empty()) throw ContractError("evaluate: need at least one scene");
  std::vector<std::size_t> hit(classes + 1, 0), seen(classes + 1, 0);
  std::size_t correct = 0, amb_correct = 0;
  Metrics m;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& sc = scenes[s];
    for (std::size_t i = 0; i < sc.size(); ++i) {
      const auto label = static_cast<std::size_t>(sc.labels[i]);
      const bool ok = predictions[s][i] == sc.labels[i];
      ++m.proposals;
      ++seen[label];
      if (ok) {
        ++correct;
        ++hit[label];
      }
      if (sc.ambiguous[i]) {
        ++m.ambiguous;
        if (ok) ++amb_correct;
      }
    }
  }
  const auto ratio = [](std::size_t a, std::size_t b) { return static_cast<double>(a) / static_cast<double>(b); };
  m.overall_acc = ratio(correct, m.proposals);
  if (m.ambiguous) m.ambiguous_acc = ratio(amb_correct, m.ambiguous);
  m.duplicates = seen[classes];
  if (m.duplicates) m.duplicate_detection_rate = ratio(hit[classes], m.duplicates);
  for (std::size_t c = 0; c <= classes; ++c) {
    m.per_class_acc.push_back(seen[c] ? std::optional<double>(ratio(hit[c], seen[c])) : std::nullopt);
  }
  return m;
}

inline std::vector<std::vector<int>> predict(const EnhancedHead& model, const Rpkg* rpkg,
                                             const std::vector<ToyScene>& scenes) {
  std::vector<std::vector<int>> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t s) {
    NoGradGuard no_grad;
    out[s] = argmax_rows(forward(scenes[s], rpkg, model).value());
  });
  return out;
}

inline Metrics evaluate(const EnhancedHead& model, const Rpkg* rpkg, const std::vector<ToyScene>& scenes) {
  return score_predictions(scenes, predict(model, rpkg, scenes), model.outputs - 1);
}

/// Enough scenes to hold at least `proposals` proposals.
inline std::size_t scenes_for(const ToyTaskSpec& spec, std::size_t proposals) {
  return (proposals + spec.N - 1) / spec.N;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t steps = 1500;
  double lr = 3e-3;
  std::size_t batch = 8;  // scenes per step
  std::uint64_t seed = 0;
  std::size_t eval_every = 250;
  std::size_t eval_scenes = 32;

  nlohmann::json to_json() const {
    return {{"steps", steps}, {"lr", lr}, {"batch", batch}, {"seed", seed},
            {"eval_every", eval_every}, {"eval_scenes", eval_scenes}};
  }
};

struct LogRow {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<Metrics> eval;
};

struct TrainResult {
  EnhancedHead model;
  std::vector<LogRow> log;
};

/// Mean cross-entropy over every proposal of the scenes.
inline Tensor batch_loss(const EnhancedHead& model, const Rpkg* rpkg, const std::vector<ToyScene>& scenes) {
  std::vector<Tensor> rows;
  std::vector<int> labels;
  for (const auto& s : scenes) {
    rows.push_back(forward(s, rpkg, model));
    labels.insert(labels.end(), s.labels.begin(), s.labels.end());
  }
  const Tensor logits = rows.size() == 1 ? rows.front() : ops::concat(rows, 0);
  return ops::cross_entropy(logits, labels);
}

/// Adam over freshly generated scenes. Weights, training scenes and the
/// validation scenes use separate streams of `config.seed`.
inline TrainResult train(const ToyTaskSpec& spec, const Rpkg* rpkg, const ModelConfig& mc,
                         const TrainConfig& config,
                         const std::function<void(const LogRow&)>& on_log = nullptr) {
  if (config.steps == 0) throw ConfigError("train: steps must be at least 1");
  if (config.batch == 0) throw ConfigError("train: batch must be at least 1");
  if (!(config.lr >= 0.0)) throw ConfigError("train: learning rate must be non-negative");
  spec.validate();
  if (!mc.baseline) {
    if (!rpkg) throw ConfigError("train: the enhanced model needs an RPKG (or use the baseline)");
    if (rpkg->num_classes() != spec.C) {
      throw ConfigError("train: RPKG has " + std::to_string(rpkg->num_classes()) + " classes, task has " +
                        std::to_string(spec.C));
    }
  }
  const Rng root(config.seed);
  Rng weights = root.split("weights");
  TrainResult result{EnhancedHead::init(mc, spec.F_p, spec.C, weights), {}};
  auto params = result.model.parameters();
  Adam adam(AdamConfig{config.lr});
  const auto validation = generate_scenes(spec, config.eval_scenes, config.seed, "validation");
  const Rng scene_root = root.split("train");

  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<ToyScene> batch;
    Rng step_rng = scene_root.split(step);
    for (std::size_t b = 0; b < config.batch; ++b) batch.push_back(generate_scene(spec, step_rng));
    zero_grad(params);
    const Tensor loss = batch_loss(result.model, rpkg, batch);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw DivergenceError("train: loss is " + std::to_string(value) + " at step " + std::to_string(step));
    }
    loss.backward();
    adam.step(params);
    LogRow row{step, value, std::nullopt};
    if (config.eval_every && (step % config.eval_every == 0 || step == config.steps)) {
      row.eval = evaluate(result.model, rpkg, validation);
    }
    if (on_log) on_log(row);
    result.log.push_back(std::move(row));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Output

/// %.17g: round-trips every double.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_optional(const std::optional<double>& v) { return v ? fmt_double(*v) : ""; }

inline std::string metrics_csv(const std::vector<LogRow>& log) {
  std::string out = "step,loss,overall_acc,ambiguous_acc,duplicate_detection_rate\n";
  for (const auto& r : log) {
    out += std::to_string(r.step) + "," + fmt_double(r.loss) + ",";
    if (r.eval) {
      out += fmt_double(r.eval->overall_acc) + "," + fmt_optional(r.eval->ambiguous_acc) + "," +
             fmt_optional(r.eval->duplicate_detection_rate);
    } else {
      out += ",,";
    }
    out += "\n";
  }
  return out;
}

}  // namespace rpfem::toy

#endif  // RPFEM_TOY_MODEL_HPP_
