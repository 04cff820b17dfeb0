#ifndef RPFEM_RPKG_HPP_
#define RPFEM_RPKG_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rpfem/bytes.hpp"
#include "rpfem/errors.hpp"
#include "rpfem/random.hpp"
#include "rpfem/tensor.hpp"

namespace rpfem {

// ---------------------------------------------------------------------------
// Relation types

enum class Relation { cooccurrence, orientation, distance };

inline constexpr std::array<Relation, 3> kAllRelations = {
    Relation::cooccurrence, Relation::orientation, Relation::distance};

/// Number of K channels a relation contributes.
constexpr std::size_t relation_width(Relation r) {
  switch (r) {
    case Relation::cooccurrence: return 1;
    case Relation::orientation: return 5;
    case Relation::distance: return 2;
  }
  return 0;
}

constexpr std::string_view relation_name(Relation r) {
  switch (r) {
    case Relation::cooccurrence: return "cooccurrence";
    case Relation::orientation: return "orientation";
    case Relation::distance: return "distance";
  }
  return "?";
}

inline std::vector<std::string> relation_channel_names(Relation r) {
  switch (r) {
    case Relation::cooccurrence: return {"cooccurrence"};
    case Relation::orientation: return {"center_of", "left_of", "right_of", "above", "below"};
    case Relation::distance: return {"distance_mean", "distance_std"};
  }
  return {};
}

inline Relation parse_relation(std::string_view text) {
  if (text == "cooccurrence" || text == "cooc") return Relation::cooccurrence;
  if (text == "orientation" || text == "orient") return Relation::orientation;
  if (text == "distance" || text == "dist") return Relation::distance;
  throw ConfigError("unknown relation '" + std::string(text) + "'");
}

/// Parses "a,b,c" (or "all") into a canonical-order, duplicate-free list.
inline std::vector<Relation> parse_relation_list(std::string_view text) {
  if (text == "all") return {kAllRelations.begin(), kAllRelations.end()};
  std::set<int> picked;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const auto token = text.substr(start, comma == std::string_view::npos ? text.npos : comma - start);
    if (!token.empty()) picked.insert(static_cast<int>(parse_relation(token)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (picked.empty()) throw ConfigError("empty relation selection");
  std::vector<Relation> out;
  for (int r : picked) out.push_back(static_cast<Relation>(r));
  return out;
}

inline std::string relation_list_str(const std::vector<Relation>& relations) {
  std::string out;
  for (Relation r : relations) {
    if (!out.empty()) out += ',';
    out += relation_name(r);
  }
  return out;
}

inline std::size_t relation_channels(const std::vector<Relation>& relations) {
  std::size_t total = 0;
  for (Relation r : relations) total += relation_width(r);
  return total;
}

// ---------------------------------------------------------------------------
// Corpus

struct BBox {
  double x = 0, y = 0, w = 0, h = 0;

  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  /// Strictly inside, so a point on the border is not "in" the box.
  bool contains_strictly(double px, double py) const {
    return px > x && px < x + w && py > y && py < y + h;
  }
};

struct ObjectInstance {
  std::string label;
  BBox bbox;
  int class_index = -1;
};

struct AnnotatedImage {
  std::string image_id;
  double width = 0, height = 0;
  std::vector<ObjectInstance> objects;
};

/// Images relabeled to the target vocabulary.
struct Corpus {
  std::vector<std::string> classes;
  std::vector<AnnotatedImage> images;
};

struct LabelMap {
  std::vector<std::string> target_classes;
  std::map<std::string, std::string> source_to_target;

  void validate() const {
    std::set<std::string> seen;
    for (const auto& c : target_classes) {
      if (!seen.insert(c).second) throw ConfigError("labelmap: duplicate target class '" + c + "'");
    }
    for (const auto& [src, dst] : source_to_target) {
      if (!seen.count(dst)) {
        throw ConfigError("labelmap: '" + src + "' maps to unknown target class '" + dst + "'");
      }
    }
  }

  int index_of(const std::string& target) const {
    auto it = std::find(target_classes.begin(), target_classes.end(), target);
    return it == target_classes.end() ? -1 : static_cast<int>(it - target_classes.begin());
  }

  static LabelMap from_json(const nlohmann::json& j) {
    LabelMap map;
    try {
      map.target_classes = j.at("target_classes").get<std::vector<std::string>>();
      map.source_to_target = j.at("source_to_target").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("labelmap: ") + e.what());
    }
    map.validate();
    return map;
  }

  static LabelMap load(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(bytes::read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
};

namespace detail {

inline AnnotatedImage parse_record(const nlohmann::json& j) {
  AnnotatedImage img;
  img.image_id = j.at("image_id").get<std::string>();
  img.width = j.at("width").get<double>();
  img.height = j.at("height").get<double>();
  if (!(img.width > 0 && img.height > 0)) throw FormatError("image size must be positive");
  for (const auto& o : j.at("objects")) {
    ObjectInstance obj;
    obj.label = o.at("label").get<std::string>();
    const auto box = o.at("bbox").get<std::vector<double>>();
    if (box.size() != 4) throw FormatError("bbox needs 4 numbers");
    if (!(box[2] > 0 && box[3] > 0)) throw FormatError("bbox width and height must be positive");
    obj.bbox = {box[0], box[1], box[2], box[3]};
    img.objects.push_back(std::move(obj));
  }
  return img;
}

/// Clamps to the image; false when nothing of the box remains.
inline bool clamp_box(BBox& b, double width, double height) {
  const double x0 = std::clamp(b.x, 0.0, width), x1 = std::clamp(b.x + b.w, 0.0, width);
  const double y0 = std::clamp(b.y, 0.0, height), y1 = std::clamp(b.y + b.h, 0.0, height);
  b = {x0, y0, x1 - x0, y1 - y0};
  return b.w > 0 && b.h > 0;
}

}  // namespace detail

/// Reads line-delimited annotation records and relabels them. Objects with
/// no mapping are dropped; their image is kept even if it ends up empty.
inline Corpus ingest_corpus(std::istream& in, const LabelMap& map) {
  map.validate();
  Corpus corpus;
  corpus.classes = map.target_classes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    AnnotatedImage img;
    try {
      img = detail::parse_record(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw FormatError("line " + std::to_string(line_no) + ": malformed record: " + e.what());
    }
    std::vector<ObjectInstance> kept;
    for (auto& obj : img.objects) {
      auto it = map.source_to_target.find(obj.label);
      if (it == map.source_to_target.end()) continue;
      if (!detail::clamp_box(obj.bbox, img.width, img.height)) continue;
      obj.label = it->second;
      obj.class_index = map.index_of(obj.label);
      kept.push_back(std::move(obj));
    }
    img.objects = std::move(kept);
    corpus.images.push_back(std::move(img));
  }
  return corpus;
}

inline Corpus ingest_corpus(const std::filesystem::path& path, const LabelMap& map) {
  std::istringstream in(bytes::read_file(path));
  try {
    return ingest_corpus(in, map);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Priors

/// One relation's C x C x width statistics with the class list they index.
struct PriorTable {
  Relation relation{};
  std::vector<std::string> classes;
  NDArray values;
};

/// cooc(A,B) = #images with A and B / #images with A, counted per image.
/// The diagonal counts images holding at least two instances of A.
inline PriorTable compute_cooccurrence(const Corpus& corpus) {
  const std::size_t C = corpus.classes.size();
  std::vector<std::uint64_t> present(C, 0), joint(C * C, 0);
  std::vector<std::uint64_t> counts(C);
  for (const auto& img : corpus.images) {
    std::fill(counts.begin(), counts.end(), 0);
    for (const auto& obj : img.objects) ++counts[static_cast<std::size_t>(obj.class_index)];
    for (std::size_t a = 0; a < C; ++a) {
      if (counts[a] == 0) continue;
      ++present[a];
      for (std::size_t b = 0; b < C; ++b) {
        const bool together = a == b ? counts[a] >= 2 : counts[b] >= 1;
        if (together) ++joint[a * C + b];
      }
    }
  }
  PriorTable out{Relation::cooccurrence, corpus.classes, NDArray(Shape{C, C, 1})};
  for (std::size_t a = 0; a < C; ++a) {
    if (present[a] == 0) continue;
    for (std::size_t b = 0; b < C; ++b) {
      out.values.data[a * C + b] =
          static_cast<double>(joint[a * C + b]) / static_cast<double>(present[a]);
    }
  }
  return out;
}

/// Orientation indicators of instance a relative to instance b:
/// center-of, left, right, above, below. Equal coordinates count as neither
/// side; y grows downward, so "above" means a smaller center y.
inline std::array<int, 5> orientation_indicators(const BBox& a, const BBox& b) {
  return {b.contains_strictly(a.cx(), a.cy()) ? 1 : 0, a.cx() < b.cx() ? 1 : 0,
          a.cx() > b.cx() ? 1 : 0, a.cy() < b.cy() ? 1 : 0, a.cy() > b.cy() ? 1 : 0};
}

/// Mean indicator vector over every ordered pair of distinct co-occurring
/// instances.
inline PriorTable compute_orientation(const Corpus& corpus) {
  const std::size_t C = corpus.classes.size();
  std::vector<std::uint64_t> hits(C * C * 5, 0), pairs(C * C, 0);
  for (const auto& img : corpus.images) {
    const auto& objs = img.objects;
    for (std::size_t i = 0; i < objs.size(); ++i) {
      for (std::size_t j = 0; j < objs.size(); ++j) {
        if (i == j) continue;
        const auto cell = static_cast<std::size_t>(objs[i].class_index) * C +
                          static_cast<std::size_t>(objs[j].class_index);
        ++pairs[cell];
        const auto ind = orientation_indicators(objs[i].bbox, objs[j].bbox);
        for (std::size_t c = 0; c < 5; ++c) hits[cell * 5 + c] += static_cast<std::uint64_t>(ind[c]);
      }
    }
  }
  PriorTable out{Relation::orientation, corpus.classes, NDArray(Shape{C, C, 5})};
  for (std::size_t cell = 0; cell < C * C; ++cell) {
    if (pairs[cell] == 0) continue;
    for (std::size_t c = 0; c < 5; ++c) {
      out.values.data[cell * 5 + c] =
          static_cast<double>(hits[cell * 5 + c]) / static_cast<double>(pairs[cell]);
    }
  }
  return out;
}

/// Center distance of two boxes over the image diagonal.
inline double normalized_center_distance(const BBox& a, const BBox& b, double width,
                                         double height) {
  return std::hypot(a.cx() - b.cx(), a.cy() - b.cy()) / std::hypot(width, height);
}

/// Mean and population standard deviation of the normalized center distance
/// over unordered co-occurring instance pairs. Samples are sorted before
/// summation, so the result does not depend on corpus order.
inline PriorTable compute_distance(const Corpus& corpus) {
  const std::size_t C = corpus.classes.size();
  std::vector<std::vector<double>> samples(C * C);
  for (const auto& img : corpus.images) {
    const auto& objs = img.objects;
    for (std::size_t i = 0; i < objs.size(); ++i) {
      for (std::size_t j = i + 1; j < objs.size(); ++j) {
        const auto a = static_cast<std::size_t>(objs[i].class_index);
        const auto b = static_cast<std::size_t>(objs[j].class_index);
        samples[std::min(a, b) * C + std::max(a, b)].push_back(
            normalized_center_distance(objs[i].bbox, objs[j].bbox, img.width, img.height));
      }
    }
  }
  PriorTable out{Relation::distance, corpus.classes, NDArray(Shape{C, C, 2})};
  for (std::size_t a = 0; a < C; ++a) {
    for (std::size_t b = a; b < C; ++b) {
      auto& d = samples[a * C + b];
      if (d.empty()) continue;
      std::sort(d.begin(), d.end());
      const double n = static_cast<double>(d.size());
      double total = 0.0;
      for (double v : d) total += v;
      const double mean = total / n;
      double sq = 0.0;
      for (double v : d) sq += (v - mean) * (v - mean);
      const double stddev = std::sqrt(sq / n);
      for (const auto cell : {a * C + b, b * C + a}) {
        out.values.data[cell * 2] = mean;
        out.values.data[cell * 2 + 1] = stddev;
      }
    }
  }
  return out;
}

inline PriorTable compute_prior(Relation r, const Corpus& corpus) {
  switch (r) {
    case Relation::cooccurrence: return compute_cooccurrence(corpus);
    case Relation::orientation: return compute_orientation(corpus);
    case Relation::distance: return compute_distance(corpus);
  }
  throw ContractError("unknown relation");
}

// ---------------------------------------------------------------------------
// Class embeddings

/// Reads {"classes", "F", "vectors"} and returns rows in `classes` order.
inline NDArray load_class_embeddings(const nlohmann::json& j,
                                     const std::vector<std::string>& classes) {
  std::vector<std::string> names;
  std::vector<std::vector<double>> vectors;
  std::size_t width = 0;
  try {
    names = j.at("classes").get<std::vector<std::string>>();
    vectors = j.at("vectors").get<std::vector<std::vector<double>>>();
    width = j.at("F").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("embeddings: ") + e.what());
  }
  if (names.size() != vectors.size()) {
    throw FormatError("embeddings: " + std::to_string(names.size()) + " classes but " +
                      std::to_string(vectors.size()) + " vectors");
  }
  for (std::size_t k = 0; k < vectors.size(); ++k) {
    if (vectors[k].size() != width) {
      throw FormatError("embeddings: vector for " + names[k] + " has width " +
                        std::to_string(vectors[k].size()) + ", expected F = " +
                        std::to_string(width));
    }
  }
  NDArray out(Shape{classes.size(), width});
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto it = std::find(names.begin(), names.end(), classes[c]);
    if (it == names.end()) throw ConfigError("no embedding for class " + classes[c]);
    const auto& v = vectors[static_cast<std::size_t>(it - names.begin())];
    std::copy(v.begin(), v.end(), out.data.begin() + static_cast<std::ptrdiff_t>(c * width));
  }
  return out;
}

inline NDArray load_class_embeddings(const std::filesystem::path& path,
                                     const std::vector<std::string>& classes) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return load_class_embeddings(j, classes);
}

/// Seeded stand-in for detector-derived class embeddings.
inline NDArray synthetic_class_embeddings(std::size_t classes, std::size_t width,
                                          std::uint64_t seed) {
  Rng rng = Rng(seed).split("class-embeddings");
  return random_normal(Shape{classes, width}, rng);
}

inline nlohmann::json embeddings_to_json(const std::vector<std::string>& classes,
                                         const NDArray& D) {
  nlohmann::json vectors = nlohmann::json::array();
  const std::size_t width = D.shape.at(1);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    vectors.push_back(std::vector<double>(D.data.begin() + static_cast<std::ptrdiff_t>(c * width),
                                          D.data.begin() + static_cast<std::ptrdiff_t>((c + 1) * width)));
  }
  return {{"classes", classes}, {"F", width}, {"vectors", std::move(vectors)}};
}

// ---------------------------------------------------------------------------
// The graph

/// Class embeddings D [C x F_r] plus prior edges K [C x C x R].
struct RelationalPriorKnowledgeGraph {
  std::vector<std::string> classes;
  NDArray D;
  std::vector<Relation> relations;
  NDArray K;

  std::size_t num_classes() const { return classes.size(); }
  std::size_t embedding_dim() const { return D.shape.size() == 2 ? D.shape[1] : 0; }
  std::size_t channels() const { return relation_channels(relations); }

  int index_of(std::string_view name) const {
    auto it = std::find(classes.begin(), classes.end(), name);
    return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
  }

  std::vector<std::string> channel_names() const {
    std::vector<std::string> out;
    for (Relation r : relations) {
      for (auto& n : relation_channel_names(r)) out.push_back(std::move(n));
    }
    return out;
  }

  /// K[a, b, :]
  std::vector<double> prior(std::size_t a, std::size_t b) const {
    const std::size_t R = channels(), C = num_classes();
    auto first = K.data.begin() + static_cast<std::ptrdiff_t>((a * C + b) * R);
    return {first, first + static_cast<std::ptrdiff_t>(R)};
  }

  void validate() const {
    const std::size_t C = classes.size();
    if (D.shape.size() != 2 || D.shape[0] != C) {
      throw FormatError("RPKG: D has shape " + shape_str(D.shape) + " for " +
                        std::to_string(C) + " classes");
    }
    if (K.shape != Shape{C, C, channels()}) {
      throw FormatError("RPKG: K has shape " + shape_str(K.shape) + ", expected " +
                        shape_str(Shape{C, C, channels()}));
    }
  }

  /// Keeps only the channels of `subset`, which must be selected here.
  RelationalPriorKnowledgeGraph select(const std::vector<Relation>& subset) const {
    const std::size_t C = num_classes(), R = channels();
    std::vector<std::size_t> keep;
    std::vector<Relation> kept_relations;
    for (Relation want : kAllRelations) {
      if (std::find(subset.begin(), subset.end(), want) == subset.end()) continue;
      std::size_t offset = 0;
      bool found = false;
      for (Relation have : relations) {
        if (have == want) {
          for (std::size_t c = 0; c < relation_width(have); ++c) keep.push_back(offset + c);
          found = true;
        }
        offset += relation_width(have);
      }
      if (!found) {
        throw ConfigError("RPKG does not contain relation " + std::string(relation_name(want)));
      }
      kept_relations.push_back(want);
    }
    RelationalPriorKnowledgeGraph out{classes, D, kept_relations, NDArray(Shape{C, C, keep.size()})};
    for (std::size_t cell = 0; cell < C * C; ++cell) {
      for (std::size_t k = 0; k < keep.size(); ++k) {
        out.K.data[cell * keep.size() + k] = K.data[cell * R + keep[k]];
      }
    }
    return out;
  }
};

using Rpkg = RelationalPriorKnowledgeGraph;

/// Stacks the selected priors in canonical order
/// cooccurrence -> orientation -> distance.
inline Rpkg assemble_rpkg(const std::vector<std::string>& classes, NDArray D,
                          const std::vector<Relation>& selection,
                          const std::vector<PriorTable>& priors) {
  if (selection.empty()) throw ConfigError("assemble_rpkg: no relations selected");
  if (D.shape.size() != 2 || D.shape[0] != classes.size()) {
    throw DimensionError("assemble_rpkg: embeddings " + shape_str(D.shape) + " for " +
                         std::to_string(classes.size()) + " classes");
  }
  Rpkg out;
  out.classes = classes;
  out.D = std::move(D);
  std::vector<const PriorTable*> tables;
  for (Relation r : kAllRelations) {
    if (std::find(selection.begin(), selection.end(), r) == selection.end()) continue;
    auto it = std::find_if(priors.begin(), priors.end(),
                           [r](const PriorTable& p) { return p.relation == r; });
    if (it == priors.end()) {
      throw ConfigError("assemble_rpkg: relation " + std::string(relation_name(r)) +
                        " selected but not computed");
    }
    if (it->classes != classes) {
      throw ConfigError("assemble_rpkg: " + std::string(relation_name(r)) +
                        " prior was computed over a different class set");
    }
    out.relations.push_back(r);
    tables.push_back(&*it);
  }
  const std::size_t C = classes.size(), R = out.channels();
  out.K = NDArray(Shape{C, C, R});
  std::size_t offset = 0;
  for (const PriorTable* t : tables) {
    const std::size_t w = relation_width(t->relation);
    for (std::size_t cell = 0; cell < C * C; ++cell) {
      for (std::size_t c = 0; c < w; ++c) {
        out.K.data[cell * R + offset + c] = t->values.data[cell * w + c];
      }
    }
    offset += w;
  }
  return out;
}

/// Computes the selected priors over `corpus` and assembles the graph.
inline Rpkg build_rpkg(const Corpus& corpus, NDArray D, const std::vector<Relation>& selection) {
  std::vector<PriorTable> priors;
  for (Relation r : selection) priors.push_back(compute_prior(r, corpus));
  return assemble_rpkg(corpus.classes, std::move(D), selection, priors);
}

}  // namespace rpfem

#endif  // RPFEM_RPKG_HPP_
