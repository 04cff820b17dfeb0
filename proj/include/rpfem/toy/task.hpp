#ifndef RPFEM_TOY_TASK_HPP_
#define RPFEM_TOY_TASK_HPP_

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "rpfem/rpkg.hpp"

namespace rpfem::toy {

/// A set of classes that appear together in one scene, with its sampling weight.
struct SceneTemplate {
  std::vector<int> classes;
  double weight = 1.0;
};

/// Synthetic detection task. Proposals are noisy class prototypes; an
/// ambiguous proposal sits halfway between its class and the class's
/// confusable partner, and only the rest of the scene tells them apart.
struct ToyTaskSpec {
  std::size_t C = 8;
  std::size_t F_p = 16;
  std::size_t N = 12;
  double noise = 0.3;          // sigma_n
  double ambiguity = 0.5;      // rho
  double duplicate_rate = 0.1;
  double duplicate_scale = 0.6;  // duplicate features: scale * prototype + noise
  std::uint64_t seed = 0;
  NDArray prototypes;  // C x F_p
  std::vector<SceneTemplate> scenes;
  std::vector<int> partner;  // confusable class of each class

  int duplicate_label() const { return static_cast<int>(C); }

  void validate() const {
    if (C == 0) throw ConfigError("toy spec: empty class set");
    if (F_p == 0 || N == 0) throw ConfigError("toy spec: F_p and N must be positive");
    if (!(noise > 0.0)) throw ConfigError("toy spec: noise scale must be positive");
    if (!(ambiguity >= 0.0 && ambiguity <= 1.0)) throw ConfigError("toy spec: ambiguity rate outside [0, 1]");
    if (!(duplicate_rate >= 0.0 && duplicate_rate <= 1.0)) {
      throw ConfigError("toy spec: duplicate rate outside [0, 1]");
    }
    if (prototypes.shape != Shape{C, F_p}) {
      throw ConfigError("toy spec: prototypes " + shape_str(prototypes.shape) + ", expected " +
                        shape_str(Shape{C, F_p}));
    }
    if (partner.size() != C) throw ConfigError("toy spec: partner list needs one entry per class");
    for (int p : partner) {
      if (p < 0 || static_cast<std::size_t>(p) >= C) throw ConfigError("toy spec: partner out of range");
    }
    if (scenes.empty()) throw ConfigError("toy spec: no scene templates");
    double total = 0.0;
    for (const auto& s : scenes) {
      if (s.classes.empty()) throw ConfigError("toy spec: empty scene template");
      if (!(s.weight >= 0.0)) throw ConfigError("toy spec: negative template weight");
      for (int c : s.classes) {
        if (c < 0 || static_cast<std::size_t>(c) >= C) throw ConfigError("toy spec: template class out of range");
      }
      total += s.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("toy spec: template weights sum to " + std::to_string(total));
  }

  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    for (std::size_t c = 0; c < C; ++c) out.push_back("class" + std::to_string(c));
    return out;
  }

  /// Everything that determines generated data, for config hashing.
  nlohmann::json to_json() const {
    nlohmann::json templates = nlohmann::json::array();
    for (const auto& s : scenes) templates.push_back({{"classes", s.classes}, {"weight", s.weight}});
    return {{"C", C},
            {"F_p", F_p},
            {"N", N},
            {"noise", noise},
            {"ambiguity", ambiguity},
            {"duplicate_rate", duplicate_rate},
            {"duplicate_scale", duplicate_scale},
            {"seed", seed},
            {"partner", partner},
            {"scenes", templates}};
  }
};

inline NDArray toy_prototypes(std::size_t C, std::size_t F, std::uint64_t seed) {
  Rng rng = Rng(seed).split("prototypes");
  return random_normal(Shape{C, F}, rng);
}

/// Default spec: even classes always appear together, odd classes always
/// appear together, and each class is confusable with its neighbour of the
/// other parity. Context alone decides an ambiguous proposal.
inline ToyTaskSpec default_toy_spec(std::uint64_t seed = 0) {
  ToyTaskSpec s;
  s.seed = seed;
  s.prototypes = toy_prototypes(s.C, s.F_p, seed);
  for (std::size_t c = 0; c < s.C; ++c) s.partner.push_back(static_cast<int>(c ^ 1u));
  SceneTemplate even, odd;
  for (int c = 0; c < static_cast<int>(s.C); ++c) (c % 2 ? odd : even).classes.push_back(c);
  even.weight = odd.weight = 0.5;
  s.scenes = {even, odd};
  return s;
}

/// Same classes and prototypes, but every non-empty class subset is equally
/// likely and nothing is ambiguous or duplicated: scene context carries no
/// label signal.
inline ToyTaskSpec independent_toy_spec(std::uint64_t seed = 0) {
  ToyTaskSpec s = default_toy_spec(seed);
  s.ambiguity = 0.0;
  s.duplicate_rate = 0.0;
  s.scenes.clear();
  const std::size_t subsets = (std::size_t{1} << s.C) - 1;
  for (std::size_t mask = 1; mask <= subsets; ++mask) {
    SceneTemplate t;
    for (std::size_t c = 0; c < s.C; ++c) {
      if (mask & (std::size_t{1} << c)) t.classes.push_back(static_cast<int>(c));
    }
    t.weight = 1.0 / static_cast<double>(subsets);
    s.scenes.push_back(std::move(t));
  }
  return s;
}

struct ToyScene {
  NDArray P;                 // N x F_p
  std::vector<int> labels;   // class index, or C for a duplicate
  std::vector<char> ambiguous;
  std::vector<BBox> boxes;
  std::size_t template_index = 0;

  std::size_t size() const { return labels.size(); }
};

inline constexpr double kToyImageWidth = 640.0, kToyImageHeight = 480.0;

namespace detail {

inline std::size_t sample_template(const ToyTaskSpec& spec, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t t = 0; t < spec.scenes.size(); ++t) {
    acc += spec.scenes[t].weight;
    if (u < acc) return t;
  }
  return spec.scenes.size() - 1;
}

// Each class lives in its own horizontal band, so the vertical ordering of
// boxes follows the class index.
inline BBox toy_box(const ToyTaskSpec& spec, int cls, Rng& rng) {
  const double band = kToyImageHeight / static_cast<double>(spec.C);
  const double cy = band * (static_cast<double>(cls) + 0.5 + rng.uniform(-0.3, 0.3));
  const double cx = rng.uniform(60.0, kToyImageWidth - 60.0);
  const double w = rng.uniform(30.0, 60.0), h = rng.uniform(0.5, 0.9) * band;
  return {cx - 0.5 * w, cy - 0.5 * h, w, h};
}

inline void add_features(const ToyTaskSpec& spec, std::vector<double>& out,
                         const std::vector<std::pair<int, double>>& mixture, Rng& rng) {
  for (std::size_t f = 0; f < spec.F_p; ++f) {
    double v = 0.0;
    for (const auto& [cls, w] : mixture) v += w * spec.prototypes.at(static_cast<std::size_t>(cls), f);
    out.push_back(v + spec.noise * rng.normal());
  }
}

}  // namespace detail

/// One scene of exactly N proposals. Every class of the sampled template
/// appears once, further objects are drawn from the template until N
/// proposals exist, and each object may spawn a duplicate proposal.
/// Proposal order is shuffled.
inline ToyScene generate_scene(const ToyTaskSpec& spec, Rng& rng) {
  const std::size_t t = detail::sample_template(spec, rng);
  const auto& classes = spec.scenes[t].classes;
  struct Proposal {
    std::vector<double> features;
    int label;
    bool ambiguous;
    BBox box;
  };
  std::vector<Proposal> props;
  for (std::size_t obj = 0; props.size() < spec.N; ++obj) {
    const int cls = obj < classes.size() ? classes[obj] : classes[rng.index(classes.size())];
    const int other = spec.partner[static_cast<std::size_t>(cls)];
    Proposal p{{}, cls, false, detail::toy_box(spec, cls, rng)};
    p.ambiguous = other != cls && rng.bernoulli(spec.ambiguity);
    if (p.ambiguous) {
      detail::add_features(spec, p.features, {{cls, 0.5}, {other, 0.5}}, rng);
    } else {
      detail::add_features(spec, p.features, {{cls, 1.0}}, rng);
    }
    const BBox box = p.box;
    props.push_back(std::move(p));
    if (props.size() < spec.N && rng.bernoulli(spec.duplicate_rate)) {
      Proposal d{{}, spec.duplicate_label(), false, box};
      d.box.x += rng.uniform(-4.0, 4.0);
      d.box.y += rng.uniform(-4.0, 4.0);
      detail::add_features(spec, d.features, {{cls, spec.duplicate_scale}}, rng);
      props.push_back(std::move(d));
    }
  }
  for (std::size_t i = props.size(); i > 1; --i) std::swap(props[i - 1], props[rng.index(i)]);

  ToyScene scene;
  scene.template_index = t;
  scene.P = NDArray(Shape{spec.N, spec.F_p});
  for (std::size_t i = 0; i < spec.N; ++i) {
    std::copy(props[i].features.begin(), props[i].features.end(),
              scene.P.data.begin() + static_cast<std::ptrdiff_t>(i * spec.F_p));
    scene.labels.push_back(props[i].label);
    scene.ambiguous.push_back(props[i].ambiguous ? 1 : 0);
    scene.boxes.push_back(props[i].box);
  }
  return scene;
}

/// Scene k depends only on (seed, stream, k).
inline std::vector<ToyScene> generate_scenes(const ToyTaskSpec& spec, std::size_t count,
                                             std::uint64_t seed, std::string_view stream) {
  spec.validate();
  const Rng root = Rng(seed).split(stream);
  std::vector<ToyScene> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    Rng rng = root.split(k);
    out.push_back(generate_scene(spec, rng));
  }
  return out;
}

/// Files that feed the RPKG builder.
struct ToyCorpusFiles {
  std::string annotations;  // JSON lines
  nlohmann::json labelmap;
  nlohmann::json embeddings;
};

/// Ground-truth objects of n_images scenes (duplicates are proposals, not
/// objects, so they are left out), an identity label map, and the
/// prototypes as class embeddings.
inline ToyCorpusFiles generate_corpus(const ToyTaskSpec& spec, std::size_t n_images, std::uint64_t seed) {
  if (n_images == 0) throw ConfigError("generate_corpus: need at least one image");
  spec.validate();
  const auto names = spec.class_names();
  const Rng root = Rng(seed).split("corpus");
  ToyCorpusFiles files;
  for (std::size_t k = 0; k < n_images; ++k) {
    Rng rng = root.split(k);
    const ToyScene scene = generate_scene(spec, rng);
    nlohmann::json objects = nlohmann::json::array();
    for (std::size_t i = 0; i < scene.size(); ++i) {
      if (scene.labels[i] == spec.duplicate_label()) continue;
      const BBox& b = scene.boxes[i];
      objects.push_back({{"label", names[static_cast<std::size_t>(scene.labels[i])]},
                         {"bbox", {b.x, b.y, b.w, b.h}}});
    }
    char id[32];
    std::snprintf(id, sizeof id, "toy%06zu", k);
    nlohmann::json rec = {{"image_id", id},
                          {"width", kToyImageWidth},
                          {"height", kToyImageHeight},
                          {"objects", std::move(objects)}};
    files.annotations += rec.dump() + "\n";
  }
  nlohmann::json identity = nlohmann::json::object();
  for (const auto& n : names) identity[n] = n;
  files.labelmap = {{"target_classes", names}, {"source_to_target", identity}};
  files.embeddings = embeddings_to_json(names, spec.prototypes);
  return files;
}

/// Builds the prior graph of a generated corpus in memory.
inline Rpkg toy_rpkg(const ToyTaskSpec& spec, std::size_t n_images, std::uint64_t seed,
                     const std::vector<Relation>& relations) {
  const ToyCorpusFiles files = generate_corpus(spec, n_images, seed);
  std::istringstream in(files.annotations);
  const Corpus corpus = ingest_corpus(in, LabelMap::from_json(files.labelmap));
  return build_rpkg(corpus, spec.prototypes, relations);
}

}  // namespace rpfem::toy

#endif  // RPFEM_TOY_TASK_HPP_
