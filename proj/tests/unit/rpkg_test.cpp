#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "rpfem/rpkg.hpp"
#include "rpfem/rpkg_io.hpp"

namespace rpfem {
namespace {

const std::filesystem::path kMicro = std::filesystem::path(RPFEM_TEST_DATA_DIR) / "micro";

constexpr std::size_t kPerson = 0, kDog = 1, kDryer = 2;

Corpus micro_corpus() {
  return ingest_corpus(kMicro / "annotations.jsonl", LabelMap::load(kMicro / "labelmap.json"));
}

Rpkg micro_rpkg() {
  const Corpus corpus = micro_corpus();
  return build_rpkg(corpus, load_class_embeddings(kMicro / "embeddings.json", corpus.classes),
                    {kAllRelations.begin(), kAllRelations.end()});
}

double at(const PriorTable& t, std::size_t a, std::size_t b, std::size_t c) {
  const std::size_t C = t.classes.size(), w = t.values.shape[2];
  return t.values.data[(a * C + b) * w + c];
}

LabelMap abc_map() {
  return {{"A", "B", "C"}, {{"A", "A"}, {"B", "B"}, {"C", "C"}}};
}

Corpus parse(const std::string& jsonl, const LabelMap& map) {
  std::istringstream in(jsonl);
  return ingest_corpus(in, map);
}

std::string record(const std::string& id, const std::vector<std::pair<std::string, BBox>>& objs,
                   int w = 640, int h = 480) {
  nlohmann::json j = {{"image_id", id}, {"width", w}, {"height", h}, {"objects", nlohmann::json::array()}};
  for (const auto& [label, b] : objs) {
    j["objects"].push_back({{"label", label}, {"bbox", {b.x, b.y, b.w, b.h}}});
  }
  return j.dump() + "\n";
}

// A random corpus over classes A..C with occasional unmapped labels.
std::string random_corpus_jsonl(std::uint64_t seed, std::size_t images) {
  Rng rng(seed);
  const char* labels[] = {"A", "B", "C", "unmapped"};
  std::string out;
  for (std::size_t i = 0; i < images; ++i) {
    std::vector<std::pair<std::string, BBox>> objs;
    const std::size_t n = rng.index(6);
    for (std::size_t k = 0; k < n; ++k) {
      // Coarse grid positions so that coordinate ties actually happen.
      const double x = 20.0 * static_cast<double>(rng.index(30));
      const double y = 20.0 * static_cast<double>(rng.index(22));
      objs.push_back({labels[rng.index(4)], {x, y, 10.0 + 10.0 * rng.index(8), 10.0 + 10.0 * rng.index(8)}});
    }
    out += record("r" + std::to_string(i), objs);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ingest

TEST(Ingest, MapsSourceLabelsToTargetClasses) {
  const LabelMap map{{"hair dryer"}, {{"hair blower", "hair dryer"}}};
  const Corpus c = parse(record("x", {{"hair blower", {1, 1, 5, 5}}}), map);
  ASSERT_EQ(c.images.size(), 1u);
  ASSERT_EQ(c.images[0].objects.size(), 1u);
  EXPECT_EQ(c.images[0].objects[0].label, "hair dryer");
  EXPECT_EQ(c.images[0].objects[0].class_index, 0);
}

TEST(Ingest, KeepsImagesWhoseObjectsAreAllUnmapped) {
  const Corpus c = parse(record("x", {{"tree", {1, 1, 5, 5}}, {"sky", {0, 0, 9, 9}}}), abc_map());
  ASSERT_EQ(c.images.size(), 1u);
  EXPECT_TRUE(c.images[0].objects.empty());
}

TEST(Ingest, MalformedLineIsNamed) {
  const std::string text = record("a", {}) + "{\"image_id\": \"b\", \"width\": 10}\n" + record("c", {});
  try {
    parse(text, abc_map());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(Ingest, UnknownTargetClassInMapIsConfigError) {
  const LabelMap bad{{"A"}, {{"x", "Z"}}};
  EXPECT_THROW(parse(record("a", {}), bad), ConfigError);
}

TEST(Ingest, DuplicateTargetClassIsConfigError) {
  const LabelMap bad{{"A", "A"}, {}};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Ingest, ClampsBoxesToTheImage) {
  const Corpus c = parse(record("x", {{"A", {-10, 470, 30, 30}}}, 640, 480), abc_map());
  const BBox& b = c.images[0].objects[0].bbox;
  EXPECT_EQ(b.x, 0.0);
  EXPECT_EQ(b.y, 470.0);
  EXPECT_EQ(b.w, 20.0);
  EXPECT_EQ(b.h, 10.0);
}

TEST(Ingest, NonPositiveBoxSizeIsMalformed) {
  EXPECT_THROW(parse(record("x", {{"A", {0, 0, 0, 5}}}), abc_map()), FormatError);
}

// ---------------------------------------------------------------------------
// Co-occurrence

TEST(Cooccurrence, ThreeImageHandCount) {
  const Corpus c = parse(record("1", {{"A", {0, 0, 5, 5}}, {"B", {9, 9, 5, 5}}}) +
                             record("2", {{"A", {0, 0, 5, 5}}}) +
                             record("3", {{"A", {0, 0, 5, 5}}, {"B", {9, 9, 5, 5}}}),
                         abc_map());
  const PriorTable t = compute_cooccurrence(c);
  EXPECT_EQ(at(t, 0, 1, 0), 2.0 / 3.0);
  EXPECT_EQ(at(t, 1, 0, 0), 1.0);
  EXPECT_EQ(at(t, 0, 2, 0), 0.0);
  // C never appears: all-zero row.
  for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(at(t, 2, b, 0), 0.0);
}

TEST(Cooccurrence, NeverTogetherIsZero) {
  const Corpus c = parse(record("1", {{"A", {0, 0, 5, 5}}}) + record("2", {{"B", {0, 0, 5, 5}}}), abc_map());
  EXPECT_EQ(at(compute_cooccurrence(c), 0, 1, 0), 0.0);
}

TEST(Cooccurrence, DiagonalCountsRepeatedInstances) {
  const Corpus c = parse(record("1", {{"A", {0, 0, 5, 5}}, {"A", {20, 0, 5, 5}}}), abc_map());
  EXPECT_EQ(at(compute_cooccurrence(c), 0, 0, 0), 1.0);
}

TEST(Cooccurrence, EmptyCorpusIsAllZero) {
  const Corpus c = parse("", abc_map());
  for (double v : compute_cooccurrence(c).values.data) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------------------
// Orientation

TEST(Orientation, LeftOfOnSameRow) {
  // a centered at (10,10), b at (20,10); b's box spans [15,25] x [5,15].
  const BBox a{5, 5, 10, 10}, b{15, 5, 10, 10};
  const auto ind = orientation_indicators(a, b);
  EXPECT_EQ(ind, (std::array<int, 5>{0, 1, 0, 0, 0}));
}

TEST(Orientation, IdenticalCentersCountOnlyCenterOf) {
  const BBox a{8, 8, 4, 4}, b{0, 0, 20, 20};
  EXPECT_EQ(orientation_indicators(a, b), (std::array<int, 5>{1, 0, 0, 0, 0}));
}

TEST(Orientation, LeftOfMirrorsRightOf) {
  const Corpus c = parse(random_corpus_jsonl(3, 40), abc_map());
  const PriorTable t = compute_orientation(c);
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) {
      EXPECT_EQ(at(t, a, b, 1), at(t, b, a, 2));
      EXPECT_EQ(at(t, a, b, 3), at(t, b, a, 4));
    }
  }
}

// ---------------------------------------------------------------------------
// Distance

TEST(Distance, ThreeFourFiveTriangle) {
  // Centers (10,10) and (40,50): 50 px apart in a 300 x 400 image (diagonal 500).
  EXPECT_EQ(normalized_center_distance({0, 0, 20, 20}, {30, 40, 20, 20}, 300, 400), 0.1);
}

TEST(Distance, SingleObservationHasZeroStd) {
  const Corpus c = parse(record("1", {{"A", {0, 0, 20, 20}}, {"B", {30, 40, 20, 20}}}, 300, 400), abc_map());
  const PriorTable t = compute_distance(c);
  EXPECT_EQ(at(t, 0, 1, 0), 0.1);
  EXPECT_EQ(at(t, 0, 1, 1), 0.0);
}

TEST(Distance, TwoObservationsPopulationStd) {
  // d = 0.1 and d = 0.3 in a 300 x 400 image: centers 50 px and 150 px apart.
  const Corpus c = parse(record("1", {{"A", {0, 0, 20, 20}}, {"B", {30, 40, 20, 20}}}, 300, 400) +
                             record("2", {{"A", {0, 0, 20, 20}}, {"B", {90, 120, 20, 20}}}, 300, 400),
                         abc_map());
  const PriorTable t = compute_distance(c);
  EXPECT_NEAR(at(t, 0, 1, 0), 0.2, 1e-15);
  EXPECT_NEAR(at(t, 0, 1, 1), 0.1, 1e-15);
  EXPECT_EQ(at(t, 1, 0, 0), at(t, 0, 1, 0));
  EXPECT_EQ(at(t, 1, 0, 1), at(t, 0, 1, 1));
}

// ---------------------------------------------------------------------------
// Micro-corpus hand counts (see tests/data/micro)

TEST(MicroCorpus, IngestDropsUnmappedAndKeepsAllImages) {
  const Corpus c = micro_corpus();
  EXPECT_EQ(c.images.size(), 10u);
  EXPECT_TRUE(c.images[4].objects.empty());     // img05: only a tree
  EXPECT_EQ(c.images[9].objects.size(), 2u);    // img10: tree dropped
  EXPECT_EQ(c.images[2].objects[0].label, "person");  // "man"
}

TEST(MicroCorpus, CooccurrenceHandCounts) {
  // person in 7 images, dog in 6, hair dryer in 2; person & dog share 4.
  const PriorTable t = compute_cooccurrence(micro_corpus());
  EXPECT_EQ(at(t, kPerson, kDog, 0), 4.0 / 7.0);
  EXPECT_EQ(at(t, kDog, kPerson, 0), 4.0 / 6.0);
  EXPECT_EQ(at(t, kPerson, kPerson, 0), 1.0 / 7.0);
  EXPECT_EQ(at(t, kDog, kDog, 0), 1.0 / 6.0);
  EXPECT_EQ(at(t, kPerson, kDryer, 0), 1.0 / 7.0);
  EXPECT_EQ(at(t, kDryer, kPerson, 0), 0.5);
  EXPECT_EQ(at(t, kDryer, kDog, 0), 0.5);
  EXPECT_EQ(at(t, kDryer, kDryer, 0), 0.0);
}

TEST(MicroCorpus, OrientationHandCounts) {
  // person->dog pairs: img01 (left, above), img03 (left, y tie), img04 (left,
  // above), img08 (x tie, below).
  const PriorTable t = compute_orientation(micro_corpus());
  const double person_dog[5] = {0.0, 0.75, 0.0, 0.5, 0.25};
  const double dog_person[5] = {0.0, 0.0, 0.75, 0.25, 0.5};
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_EQ(at(t, kPerson, kDog, c), person_dog[c]) << c;
    EXPECT_EQ(at(t, kDog, kPerson, c), dog_person[c]) << c;
  }
  // img07: identical centers, each inside the other's box.
  EXPECT_EQ(at(t, kPerson, kDryer, 0), 1.0);
  EXPECT_EQ(at(t, kDryer, kPerson, 0), 1.0);
  for (std::size_t c = 1; c < 5; ++c) EXPECT_EQ(at(t, kPerson, kDryer, c), 0.0);
  // img09: two persons side by side.
  EXPECT_EQ(at(t, kPerson, kPerson, 1), 0.5);
  EXPECT_EQ(at(t, kPerson, kPerson, 2), 0.5);
  EXPECT_EQ(at(t, kPerson, kPerson, 3), 0.0);
}

TEST(MicroCorpus, DistanceHandCounts) {
  const PriorTable t = compute_distance(micro_corpus());
  // person/dog: 0.1 (img04), 190/800 (img03), 200/800 (img08), |(210,80)|/800 (img01).
  const double d[4] = {0.1, 0.2375, 0.25, std::sqrt(210.0 * 210.0 + 80.0 * 80.0) / 800.0};
  const double mean = (d[0] + d[1] + d[2] + d[3]) / 4.0;
  double var = 0;
  for (double v : d) var += (v - mean) * (v - mean) / 4.0;
  EXPECT_NEAR(at(t, kPerson, kDog, 0), mean, 1e-15);
  EXPECT_NEAR(at(t, kPerson, kDog, 1), std::sqrt(var), 1e-15);
  EXPECT_EQ(at(t, kPerson, kDryer, 0), 0.0);  // identical centers
  EXPECT_EQ(at(t, kPerson, kPerson, 0), 300.0 / 800.0);
  EXPECT_EQ(at(t, kDog, kDog, 0), 200.0 / 800.0);
  EXPECT_EQ(at(t, kDog, kDog, 1), 0.0);
}

TEST(MicroCorpus, MatchesCheckedInGoldenFile) {
  const std::string golden = bytes::read_file(kMicro / "golden.rpkg");
  EXPECT_EQ(serialize_rpkg(micro_rpkg()), golden);
}

// ---------------------------------------------------------------------------
// Properties over random corpora

TEST(PriorProperty, SymmetryBoundsAndOrderIndependence) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::string text = random_corpus_jsonl(100 + seed, 30);
    const Corpus c = parse(text, abc_map());
    const PriorTable cooc = compute_cooccurrence(c), orient = compute_orientation(c),
                     dist = compute_distance(c);

    std::vector<std::size_t> present(3, 0);
    for (const auto& img : c.images) {
      std::set<int> seen;
      for (const auto& o : img.objects) seen.insert(o.class_index);
      for (int k : seen) ++present[static_cast<std::size_t>(k)];
    }
    for (std::size_t a = 0; a < 3; ++a) {
      for (std::size_t b = 0; b < 3; ++b) {
        const double v = at(cooc, a, b, 0);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        const double images = v * static_cast<double>(present[a]);
        EXPECT_NEAR(images, std::round(images), 1e-9);
        for (std::size_t k = 0; k < 5; ++k) {
          EXPECT_GE(at(orient, a, b, k), 0.0);
          EXPECT_LE(at(orient, a, b, k), 1.0);
        }
        EXPECT_EQ(at(orient, a, b, 1), at(orient, b, a, 2));
        EXPECT_EQ(at(orient, a, b, 3), at(orient, b, a, 4));
        EXPECT_EQ(at(dist, a, b, 0), at(dist, b, a, 0));
        EXPECT_EQ(at(dist, a, b, 1), at(dist, b, a, 1));
        EXPECT_GE(at(dist, a, b, 0), 0.0);
        EXPECT_GE(at(dist, a, b, 1), 0.0);
      }
    }

    // Reversed record order gives bit-identical priors.
    std::vector<std::string> lines;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) lines.push_back(line + "\n");
    std::reverse(lines.begin(), lines.end());
    std::string reversed;
    for (const auto& l : lines) reversed += l;
    const Corpus r = parse(reversed, abc_map());
    EXPECT_EQ(compute_cooccurrence(r).values, cooc.values);
    EXPECT_EQ(compute_orientation(r).values, orient.values);
    EXPECT_EQ(compute_distance(r).values, dist.values);
  }
}

TEST(PriorProperty, NeverCooccurringPairsAreAllZero) {
  // A only with C, B only alone.
  const Corpus c = parse(record("1", {{"A", {0, 0, 5, 5}}, {"C", {50, 50, 5, 5}}}) +
                             record("2", {{"B", {0, 0, 5, 5}}}),
                         abc_map());
  const Rpkg g = build_rpkg(c, synthetic_class_embeddings(3, 2, 0), {kAllRelations.begin(), kAllRelations.end()});
  for (double v : g.prior(0, 1)) EXPECT_EQ(v, 0.0);
  for (double v : g.prior(1, 0)) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------------------
// Embeddings

TEST(Embeddings, RowsFollowClassOrder) {
  const NDArray D = load_class_embeddings(kMicro / "embeddings.json", {"person", "dog", "hair dryer"});
  EXPECT_EQ(D.shape, (Shape{3, 4}));
  EXPECT_EQ(D.at(0, 0), 1.0);    // person
  EXPECT_EQ(D.at(1, 3), 2.0);    // dog
  EXPECT_EQ(D.at(2, 2), 1.5);    // hair dryer
}

TEST(Embeddings, MissingClassIsNamed) {
  const nlohmann::json j = {{"classes", {"cat"}}, {"F", 2}, {"vectors", {{1.0, 2.0}}}};
  try {
    load_class_embeddings(j, {"cat", "dog"});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "no embedding for class dog");
  }
}

TEST(Embeddings, InconsistentWidthIsFormatError) {
  const nlohmann::json j = {{"classes", {"a", "b"}}, {"F", 2}, {"vectors", {{1.0, 2.0}, {1.0}}}};
  EXPECT_THROW(load_class_embeddings(j, {"a", "b"}), FormatError);
}

TEST(Embeddings, SyntheticModeIsBitwiseReproducible) {
  EXPECT_EQ(synthetic_class_embeddings(5, 7, 42), synthetic_class_embeddings(5, 7, 42));
  EXPECT_NE(synthetic_class_embeddings(5, 7, 42), synthetic_class_embeddings(5, 7, 43));
}

// ---------------------------------------------------------------------------
// Assembly

TEST(Assemble, ChannelCountPerSelection) {
  const Corpus c = micro_corpus();
  const NDArray D = load_class_embeddings(kMicro / "embeddings.json", c.classes);
  const std::vector<std::pair<std::vector<Relation>, std::size_t>> cases = {
      {{Relation::cooccurrence}, 1},
      {{Relation::orientation}, 5},
      {{Relation::distance}, 2},
      {{Relation::cooccurrence, Relation::orientation}, 6},
      {{Relation::cooccurrence, Relation::distance}, 3},
      {{Relation::orientation, Relation::distance}, 7},
      {{Relation::cooccurrence, Relation::orientation, Relation::distance}, 8},
  };
  for (const auto& [sel, R] : cases) {
    const Rpkg g = build_rpkg(c, D, sel);
    EXPECT_EQ(g.channels(), R);
    EXPECT_EQ(g.K.shape, (Shape{3, 3, R}));
  }
}

TEST(Assemble, CanonicalChannelOrder) {
  const Corpus c = micro_corpus();
  const NDArray D = load_class_embeddings(kMicro / "embeddings.json", c.classes);
  // Selection order does not matter; stacking is cooc -> orient -> dist.
  const Rpkg g = build_rpkg(c, D, {Relation::distance, Relation::cooccurrence});
  ASSERT_EQ(g.relations, (std::vector<Relation>{Relation::cooccurrence, Relation::distance}));
  EXPECT_EQ(g.prior(kPerson, kDog)[0], 4.0 / 7.0);
  EXPECT_EQ(g.prior(kPerson, kDog)[1], compute_distance(c).values.data[(kPerson * 3 + kDog) * 2]);
  const Rpkg full = micro_rpkg();
  EXPECT_EQ(full.select({Relation::cooccurrence, Relation::distance}).K, g.K);
}

TEST(Assemble, ClassSetMismatchIsRejected) {
  const Corpus c = micro_corpus();
  PriorTable cooc = compute_cooccurrence(c);
  cooc.classes = {"person", "dog", "cat"};
  EXPECT_THROW(assemble_rpkg(c.classes, NDArray({3, 2}), {Relation::cooccurrence}, {cooc}), ConfigError);
}

// ---------------------------------------------------------------------------
// Serialization

TEST(RpkgFile, RoundTripIsBitwise) {
  const Rpkg g = micro_rpkg();
  const Rpkg back = deserialize_rpkg(serialize_rpkg(g));
  EXPECT_EQ(back.classes, g.classes);
  EXPECT_EQ(back.relations, g.relations);
  EXPECT_EQ(back.D, g.D);
  EXPECT_EQ(back.K, g.K);
  EXPECT_EQ(serialize_rpkg(back), serialize_rpkg(g));
}

TEST(RpkgFile, TruncatedFileFailsChecksum) {
  const std::string data = serialize_rpkg(micro_rpkg());
  EXPECT_THROW(deserialize_rpkg(std::string_view(data).substr(0, data.size() - 9)), ChecksumError);
  EXPECT_THROW(deserialize_rpkg(std::string_view(data).substr(0, 5)), ChecksumError);
}

TEST(RpkgFile, VersionMismatch) {
  std::string data = serialize_rpkg(micro_rpkg());
  data[4] = 2;
  data.resize(data.size() - 4);
  bytes::put_u32(data, crc32_of(data));
  EXPECT_THROW(deserialize_rpkg(data), VersionError);
}

TEST(RpkgFile, DeclaredShapeMismatchIsFormatError) {
  Rpkg g = micro_rpkg();
  // Forge a header that declares two classes while K stays 3 x 3 x 8.
  std::string out(kRpkgMagic);
  bytes::put_u16(out, kRpkgVersion);
  nlohmann::json header = {{"classes", {"person", "dog"}},
                           {"relations", {"cooccurrence", "orientation", "distance"}},
                           {"D_shape", {2, 4}},
                           {"K_shape", g.K.shape}};
  const std::string text = header.dump();
  bytes::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  bytes::put_f64s(out, std::span<const double>(g.D.data).subspan(0, 8));
  bytes::put_f64s(out, g.K.data);
  bytes::put_u32(out, crc32_of(out));
  EXPECT_THROW(deserialize_rpkg(out), FormatError);
}

}  // namespace
}  // namespace rpfem
