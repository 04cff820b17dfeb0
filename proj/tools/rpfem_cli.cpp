// rpfem: build and inspect relational prior graphs, check gradients, and run
// the toy feature-enhancement experiments.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rpfem/rpfem.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rpfem;

namespace {

struct Dims {
  std::size_t F_p = 16, F_r = 16, F_e = 16, F_z = 16;
};

Dims parse_dims(const std::string& text) {
  std::vector<std::size_t> v;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const long n = std::stol(tok, &used);
      if (used != tok.size() || n <= 0) throw std::invalid_argument(tok);
      v.push_back(static_cast<std::size_t>(n));
    } catch (const std::exception&) {
      throw ConfigError("--dims: '" + tok + "' is not a positive integer");
    }
  }
  if (v.size() != 4) throw ConfigError("--dims expects F_p,F_r,F_e,F_z");
  return {v[0], v[1], v[2], v[3]};
}

void require_file(const std::string& path, const char* flag) {
  if (!fs::is_regular_file(path)) throw ConfigError(std::string(flag) + ": cannot open " + path);
}

std::string pretty(const json& j) { return j.dump(2) + "\n"; }

json read_json(const fs::path& path) {
  try {
    return json::parse(bytes::read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Shared toy-run settings

struct ToyOptions {
  std::string spec = "default";
  std::uint64_t spec_seed = 0;
  std::uint64_t seed = 0;
  std::string rpkg;
  std::string relations = "all";
  std::size_t heads = 2, layers = 1;
  std::string dims = "16,16,16,16";
  std::size_t steps = 1000;
  double lr = 3e-3;
  std::size_t batch = 8;
  std::size_t corpus_images = 500;
  std::size_t eval_proposals = 2000;
  bool baseline = false;
};

void add_toy_options(CLI::App* cmd, ToyOptions& o, bool with_model) {
  cmd->add_option("--spec", o.spec, "Toy task: default or independent")
      ->check(CLI::IsMember({"default", "independent"}));
  cmd->add_option("--spec-seed", o.spec_seed, "Seed of the class prototypes");
  cmd->add_option("--seed", o.seed, "Root seed for corpus, weights and scenes");
  cmd->add_option("--rpkg", o.rpkg, "Prior graph file (default: built from a generated toy corpus)");
  cmd->add_option("--relations", o.relations, "Relations to use, e.g. cooccurrence,distance or all");
  cmd->add_option("--dims", o.dims, "F_p,F_r,F_e,F_z");
  cmd->add_option("--steps", o.steps, "Training steps");
  cmd->add_option("--lr", o.lr, "Adam learning rate");
  cmd->add_option("--batch", o.batch, "Scenes per step");
  cmd->add_option("--corpus-images", o.corpus_images, "Images in the generated toy corpus");
  cmd->add_option("--eval-proposals", o.eval_proposals, "Proposals in the evaluation set");
  if (with_model) {
    cmd->add_option("--heads", o.heads, "Relation attention heads");
    cmd->add_option("--layers", o.layers, "Context updates");
    cmd->add_flag("--baseline", o.baseline, "Context-free classifier on P alone");
  }
}

toy::ToyTaskSpec make_spec(const std::string& kind, std::uint64_t spec_seed, std::size_t F_p) {
  toy::ToyTaskSpec s = kind == "independent" ? toy::independent_toy_spec(spec_seed) : toy::default_toy_spec(spec_seed);
  if (F_p != s.F_p) {
    s.F_p = F_p;
    s.prototypes = toy::toy_prototypes(s.C, F_p, spec_seed);
  }
  return s;
}

struct ToySetup {
  toy::ToyTaskSpec spec;
  std::vector<Relation> relations;
  std::optional<Rpkg> rpkg;  // all requested relations
  toy::ModelConfig model;
  toy::TrainConfig train;
  Dims dims;
};

ToySetup resolve(const ToyOptions& o) {
  ToySetup s;
  s.dims = parse_dims(o.dims);
  if (o.heads == 0) throw ConfigError("--heads must be at least 1");
  if (o.layers == 0) throw ConfigError("--layers must be at least 1");
  if (o.steps == 0) throw ConfigError("--steps must be at least 1");
  if (o.batch == 0) throw ConfigError("--batch must be at least 1");
  if (!(o.lr >= 0.0)) throw ConfigError("--lr must be non-negative");
  if (o.eval_proposals == 0) throw ConfigError("--eval-proposals must be positive");
  if (s.dims.F_z != s.dims.F_p) {
    throw ConfigError("--dims: F_z must equal F_p (context updates add messages to the proposals)");
  }
  if (o.baseline && !o.rpkg.empty()) throw ConfigError("--baseline does not use a prior graph; drop --rpkg");
  s.relations = parse_relation_list(o.relations);
  s.spec = make_spec(o.spec, o.spec_seed, s.dims.F_p);
  s.spec.validate();

  s.model.baseline = o.baseline;
  s.model.heads = o.heads;
  s.model.layers = o.layers;
  s.model.prior_dim = s.dims.F_r;
  s.model.channels = relation_channels(s.relations);
  s.model.attn_dim = s.dims.F_e;
  s.model.value_dim = s.dims.F_e;
  s.model.edge_dim = s.dims.F_e;
  s.model.node_dim = s.dims.F_z;
  s.model.adjacency_dim = s.dims.F_e + s.dims.F_e % 2;
  s.model.validate(s.dims.F_p);

  s.train.steps = o.steps;
  s.train.lr = o.lr;
  s.train.batch = o.batch;
  s.train.seed = o.seed;

  if (!o.baseline) {
    if (!o.rpkg.empty()) {
      require_file(o.rpkg, "--rpkg");
      s.rpkg = load_rpkg(o.rpkg).select(s.relations);
    } else {
      if (s.dims.F_r != s.dims.F_p) {
        throw ConfigError("--dims: the generated toy graph embeds classes by their prototypes, so F_r must equal F_p");
      }
      if (o.corpus_images == 0) throw ConfigError("--corpus-images must be positive");
      s.rpkg = toy::toy_rpkg(s.spec, o.corpus_images, o.seed, s.relations);
    }
    if (s.rpkg->num_classes() != s.spec.C) {
      throw ConfigError("prior graph has " + std::to_string(s.rpkg->num_classes()) + " classes, toy task has " +
                        std::to_string(s.spec.C));
    }
    if (s.rpkg->embedding_dim() != s.dims.F_r) {
      throw ConfigError("prior graph embeddings have width " + std::to_string(s.rpkg->embedding_dim()) +
                        ", --dims says F_r = " + std::to_string(s.dims.F_r));
    }
  }
  return s;
}

json run_config(const ToyOptions& o, const ToySetup& s) {
  json j = {{"spec_kind", o.spec},
            {"spec_seed", o.spec_seed},
            {"spec", s.spec.to_json()},
            {"model", s.model.to_json()},
            {"train", s.train.to_json()},
            {"relations", s.model.baseline ? "" : relation_list_str(s.relations)},
            {"eval_proposals", o.eval_proposals},
            {"seed", o.seed}};
  j["rpkg_crc32"] = s.rpkg ? toy::hex64(crc32_of(serialize_rpkg(*s.rpkg))) : "";
  return j;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_build_rpkg(const std::string& annotations, const std::string& labelmap, const std::string& embeddings,
                   const std::string& relations, const std::string& dims, std::uint64_t seed,
                   const std::string& out) {
  require_file(annotations, "--annotations");
  require_file(labelmap, "--labelmap");
  if (!embeddings.empty()) require_file(embeddings, "--embeddings");
  const auto selection = parse_relation_list(relations);
  const Dims d = parse_dims(dims);

  const Corpus corpus = ingest_corpus(annotations, LabelMap::load(labelmap));
  const NDArray D = embeddings.empty() ? synthetic_class_embeddings(corpus.classes.size(), d.F_r, seed)
                                       : load_class_embeddings(fs::path(embeddings), corpus.classes);
  const Rpkg g = build_rpkg(corpus, D, selection);
  save_rpkg(out, g);
  std::size_t objects = 0;
  for (const auto& img : corpus.images) objects += img.objects.size();
  std::printf("wrote %s: C=%zu R=%zu F_r=%zu images=%zu objects=%zu relations=%s\n", out.c_str(),
              g.num_classes(), g.channels(), g.embedding_dim(), corpus.images.size(), objects,
              relation_list_str(g.relations).c_str());
  return 0;
}

int cmd_inspect_rpkg(const std::string& path, const std::string& a, const std::string& b, bool as_json) {
  require_file(path, "rpkg");
  const Rpkg g = load_rpkg(path);
  const int ia = g.index_of(a), ib = g.index_of(b);
  if (ia < 0) throw ConfigError("unknown class '" + a + "'");
  if (ib < 0) throw ConfigError("unknown class '" + b + "'");
  const auto values = g.prior(static_cast<std::size_t>(ia), static_cast<std::size_t>(ib));
  const auto names = g.channel_names();
  if (as_json) {
    std::printf("%s", pretty({{"a", a}, {"b", b}, {"channels", names}, {"values", values}}).c_str());
    return 0;
  }
  std::printf("K[%s, %s]\n", a.c_str(), b.c_str());
  for (std::size_t k = 0; k < values.size(); ++k) {
    std::printf("  %-14s %s\n", names[k].c_str(), toy::fmt_double(values[k]).c_str());
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t seeds, bool as_json) {
  if (seeds == 0) throw ConfigError("--seeds must be positive");
  SuiteOptions opt;
  opt.seed = seed;
  opt.seeds = seeds;
  const auto results = run_grad_suite(opt);
  bool ok = true;
  json report = json::array();
  for (const auto& r : results) {
    ok = ok && r.passed;
    if (as_json) {
      report.push_back({{"name", r.name}, {"runs", r.runs}, {"max_rel_error", r.max_rel_error}, {"passed", r.passed}});
    } else {
      std::printf("%-20s runs=%-3zu max_rel_error=%.3e %s\n", r.name.c_str(), r.runs, r.max_rel_error,
                  r.passed ? "ok" : "FAIL");
    }
  }
  if (as_json) {
    std::printf("%s", pretty({{"tolerance", opt.tolerance}, {"step", opt.step}, {"passed", ok}, {"checks", report}}).c_str());
  } else {
    std::printf("gradcheck: %s (%zu checks x %zu seeds, tolerance %.0e)\n", ok ? "PASS" : "FAIL", results.size(),
                seeds, opt.tolerance);
  }
  return ok ? 0 : 1;
}

int cmd_gen_corpus(const std::string& kind, std::uint64_t spec_seed, std::uint64_t seed, std::size_t images,
                   const std::string& out) {
  const toy::ToyTaskSpec spec = make_spec(kind, spec_seed, 16);
  const auto files = toy::generate_corpus(spec, images, seed);
  const fs::path dir(out);
  bytes::write_file(dir / "annotations.jsonl", files.annotations);
  bytes::write_file(dir / "labelmap.json", pretty(files.labelmap));
  bytes::write_file(dir / "embeddings.json", pretty(files.embeddings));
  std::printf("wrote %zu images to %s\n", images, out.c_str());
  return 0;
}

fs::path checkpoint_base(const fs::path& run) { return run / "model"; }

int cmd_train_toy(const ToyOptions& o, const std::string& out) {
  const ToySetup s = resolve(o);
  const json config = run_config(o, s);
  const std::string hash = toy::config_hash(config);
  const fs::path run = fs::path(out) / hash;
  if (fs::is_regular_file(run / "eval.json")) {
    std::printf("cached: %s\n", run.string().c_str());
    std::printf("%s", bytes::read_file(run / "eval.json").c_str());
    return 0;
  }
  const Rpkg* g = s.rpkg ? &*s.rpkg : nullptr;
  std::fprintf(stderr, "training %s model, %zu steps -> %s\n", o.baseline ? "baseline" : "enhanced", o.steps,
               run.string().c_str());
  const auto result = toy::train(s.spec, g, s.model, s.train, [&](const toy::LogRow& row) {
    if (row.eval) {
      std::fprintf(stderr, "step %zu loss %.4f val_acc %.4f\n", row.step, row.loss, row.eval->overall_acc);
    }
  });
  const auto eval_scenes = toy::generate_scenes(s.spec, toy::scenes_for(s.spec, o.eval_proposals), o.seed, "eval");
  const toy::Metrics m = toy::evaluate(result.model, g, eval_scenes);

  bytes::write_file(run / "config.json", pretty(config));
  bytes::write_file(run / "metrics.csv", toy::metrics_csv(result.log));
  save_checkpoint(checkpoint_base(run), result.model.named_parameters());
  if (g) save_rpkg(run / "prior.rpkg", *g);
  const std::string eval = pretty(m.to_json());
  bytes::write_file(run / "eval.json", eval);  // written last: marks the run complete
  std::printf("run: %s\n%s", run.string().c_str(), eval.c_str());
  return 0;
}

struct LoadedRun {
  json config;
  toy::ToyTaskSpec spec;
  std::optional<Rpkg> rpkg;
  toy::EnhancedHead model;
};

LoadedRun load_run(const fs::path& run) {
  require_file((run / "config.json").string(), "--run");
  LoadedRun r;
  r.config = read_json(run / "config.json");
  try {
    const json& sj = r.config.at("spec");
    r.spec = make_spec(r.config.at("spec_kind").get<std::string>(), r.config.at("spec_seed").get<std::uint64_t>(),
                       sj.at("F_p").get<std::size_t>());
    const json& mj = r.config.at("model");
    toy::ModelConfig mc;
    mc.baseline = mj.at("baseline").get<bool>();
    if (!mc.baseline) {
      mc.heads = mj.at("heads");
      mc.layers = mj.at("layers");
      mc.prior_dim = mj.at("prior_dim");
      mc.channels = mj.at("channels");
      mc.attn_dim = mj.at("attn_dim");
      mc.value_dim = mj.at("value_dim");
      mc.edge_dim = mj.at("edge_dim");
      mc.node_dim = mj.at("node_dim");
      mc.adjacency_dim = mj.at("adjacency_dim");
      r.rpkg = load_rpkg(run / "prior.rpkg");
    }
    Rng unused(0);
    r.model = toy::EnhancedHead::init(mc, r.spec.F_p, r.spec.C, unused);
  } catch (const json::exception& e) {
    throw FormatError((run / "config.json").string() + ": " + e.what());
  }
  auto params = r.model.named_parameters();
  restore_parameters(load_checkpoint(checkpoint_base(run)), params);
  return r;
}

int cmd_eval_toy(const std::string& run_dir, const std::string& compare_dir, const std::string& out) {
  const LoadedRun run = load_run(run_dir);
  const auto seed = run.config.at("seed").get<std::uint64_t>();
  const auto proposals = run.config.at("eval_proposals").get<std::size_t>();
  const auto scenes = toy::generate_scenes(run.spec, toy::scenes_for(run.spec, proposals), seed, "eval");
  const toy::Metrics m = toy::evaluate(run.model, run.rpkg ? &*run.rpkg : nullptr, scenes);
  if (compare_dir.empty()) {
    const std::string text = pretty(m.to_json());
    if (out.empty()) {
      std::printf("%s", text.c_str());
    } else {
      bytes::write_file(out, text);
    }
    return 0;
  }
  const LoadedRun base = load_run(compare_dir);
  if (base.config.at("spec") != run.config.at("spec")) {
    throw ConfigError("--compare: the two runs use different toy tasks");
  }
  const toy::Metrics b = toy::evaluate(base.model, base.rpkg ? &*base.rpkg : nullptr, scenes);
  using toy::fmt_double, toy::fmt_optional;
  const auto margin = [](const std::optional<double>& x, const std::optional<double>& y) {
    return x && y ? std::optional<double>(*x - *y) : std::nullopt;
  };
  std::string csv =
      "run,baseline_run,overall_acc,baseline_overall_acc,overall_acc_margin,ambiguous_acc,baseline_ambiguous_acc,"
      "ambiguous_acc_margin,duplicate_detection_rate,baseline_duplicate_detection_rate\n";
  csv += fs::path(run_dir).filename().string() + "," + fs::path(compare_dir).filename().string() + "," +
         fmt_double(m.overall_acc) + "," + fmt_double(b.overall_acc) + "," + fmt_double(m.overall_acc - b.overall_acc) +
         "," + fmt_optional(m.ambiguous_acc) + "," + fmt_optional(b.ambiguous_acc) + "," +
         fmt_optional(margin(m.ambiguous_acc, b.ambiguous_acc)) + "," + fmt_optional(m.duplicate_detection_rate) +
         "," + fmt_optional(b.duplicate_detection_rate) + "\n";
  if (out.empty()) {
    std::printf("%s", csv.c_str());
  } else {
    bytes::write_file(out, csv);
  }
  return 0;
}

int cmd_ablate(const ToyOptions& o, const std::string& out, const std::string& grid_kind) {
  const ToySetup s = resolve(o);
  toy::AblationSetup setup;
  setup.spec = s.spec;
  // The grid needs every relation available, whatever --relations says.
  ToyOptions all = o;
  all.relations = "all";
  setup.rpkg = *resolve(all).rpkg;
  setup.base = s.model;
  setup.train = s.train;
  setup.eval_proposals = o.eval_proposals;
  setup.eval_seed = o.seed;

  std::vector<toy::AblationConfig> grid;
  if (grid_kind == "single") {
    grid.push_back({"single", o.heads, o.layers, s.relations});
  } else {
    grid = toy::default_ablation_grid();
  }

  const fs::path dir(out);
  std::map<std::string, json> cache;
  if (fs::is_regular_file(dir / "ablation_cache.json")) {
    const json stored = read_json(dir / "ablation_cache.json");
    for (const auto& [k, v] : stored.items()) cache.emplace(k, v);
  }
  const auto rows = toy::run_ablation(grid, setup, cache);
  json stored = json::object();
  for (const auto& [k, v] : cache) stored[k] = v;
  for (const auto& r : rows) stored[r.hash] = toy::ablation_row_json(r);
  bytes::write_file(dir / "ablation.csv", toy::ablation_csv(rows));
  bytes::write_file(dir / "ablation_cache.json", pretty(stored));
  // Wall times vary between runs, so they go to stderr rather than into an artifact.
  std::fprintf(stderr, "%s", toy::ablation_timing_csv(rows).c_str());
  std::printf("%s", toy::ablation_csv(rows).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relational prior knowledge graphs and context-based feature enhancement"};
  app.require_subcommand(1);

  std::string annotations, labelmap, embeddings, relations = "all", dims = "16,16,16,16", out;
  std::uint64_t seed = 0;
  auto* build = app.add_subcommand("build-rpkg", "Build a prior graph from an annotation corpus");
  build->add_option("--annotations", annotations, "Annotation records, one JSON object per line")->required();
  build->add_option("--labelmap", labelmap, "Label map JSON")->required();
  build->add_option("--embeddings", embeddings, "Class embeddings JSON (default: seeded synthetic)");
  build->add_option("--relations", relations, "cooccurrence,orientation,distance or all");
  build->add_option("--dims", dims, "F_p,F_r,F_e,F_z; F_r sizes synthetic embeddings");
  build->add_option("--seed", seed, "Seed for synthetic embeddings");
  build->add_option("--out", out, "Output .rpkg file")->required();

  std::string rpkg_path, class_a, class_b;
  bool as_json = false;
  auto* inspect = app.add_subcommand("inspect-rpkg", "Print the prior edge between two classes");
  inspect->add_option("rpkg", rpkg_path, "Prior graph file")->required();
  inspect->add_option("class_a", class_a, "Source class")->required();
  inspect->add_option("class_b", class_b, "Target class")->required();
  inspect->add_flag("--json", as_json, "Machine-readable output");

  std::size_t seeds = 20;
  std::uint64_t gc_seed = 0;
  bool gc_json = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare every backward rule with finite differences");
  gradcheck->add_option("--seed", gc_seed, "First seed");
  gradcheck->add_option("--seeds", seeds, "Number of seeds per check");
  gradcheck->add_flag("--json", gc_json, "Machine-readable output");

  std::string corpus_kind = "default";
  std::uint64_t corpus_spec_seed = 0, corpus_seed = 0;
  std::size_t images = 500;
  std::string corpus_out;
  auto* gen = app.add_subcommand("gen-corpus", "Write a synthetic annotation corpus for the toy task");
  gen->add_option("--spec", corpus_kind, "default or independent")->check(CLI::IsMember({"default", "independent"}));
  gen->add_option("--spec-seed", corpus_spec_seed, "Seed of the class prototypes");
  gen->add_option("--seed", corpus_seed, "Corpus seed");
  gen->add_option("--images", images, "Number of images");
  gen->add_option("--out", corpus_out, "Output directory")->required();

  ToyOptions train_opts;
  std::string train_out;
  auto* train = app.add_subcommand("train-toy", "Train the toy classifier (enhanced, or --baseline)");
  add_toy_options(train, train_opts, true);
  train->add_option("--out", train_out, "Runs directory; the run goes to <out>/<config hash>")->required();

  std::string run_dir, compare_dir, eval_out;
  auto* eval = app.add_subcommand("eval-toy", "Evaluate a trained run, optionally against a baseline run");
  eval->add_option("--run", run_dir, "Run directory")->required();
  eval->add_option("--compare", compare_dir, "Baseline run directory for a comparison row");
  eval->add_option("--out", eval_out, "Write the result here instead of stdout");

  ToyOptions ablate_opts;
  ablate_opts.steps = 400;
  std::string ablate_out, grid_kind = "default";
  auto* ablate = app.add_subcommand("ablate", "Heads / layers / relation-subset studies on the toy task");
  add_toy_options(ablate, ablate_opts, true);
  ablate->add_option("--grid", grid_kind, "default (10 rows) or single (--heads/--layers/--relations)")
      ->check(CLI::IsMember({"default", "single"}));
  ablate->add_option("--out", ablate_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*build) return cmd_build_rpkg(annotations, labelmap, embeddings, relations, dims, seed, out);
    if (*inspect) return cmd_inspect_rpkg(rpkg_path, class_a, class_b, as_json);
    if (*gradcheck) return cmd_gradcheck(gc_seed, seeds, gc_json);
    if (*gen) return cmd_gen_corpus(corpus_kind, corpus_spec_seed, corpus_seed, images, corpus_out);
    if (*train) return cmd_train_toy(train_opts, train_out);
    if (*eval) return cmd_eval_toy(run_dir, compare_dir, eval_out);
    if (*ablate) {
      if (ablate_opts.baseline) throw ConfigError("ablate: --baseline has no relation axes to ablate");
      return cmd_ablate(ablate_opts, ablate_out, grid_kind);
    }
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: diverged: %s\n", e.what());
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
  return 1;
}
