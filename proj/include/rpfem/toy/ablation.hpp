#ifndef RPFEM_TOY_ABLATION_HPP_
#define RPFEM_TOY_ABLATION_HPP_

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rpfem/bytes.hpp"
#include "rpfem/toy/model.hpp"

namespace rpfem::toy {

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Stable short name for a configuration: FNV-1a over its canonical JSON.
inline std::string config_hash(const nlohmann::json& config) { return hex64(fnv1a64(config.dump())); }

struct AblationConfig {
  std::string study;  // "heads", "layers" or "relations"
  std::size_t heads = 2;
  std::size_t layers = 1;
  std::vector<Relation> relations{kAllRelations.begin(), kAllRelations.end()};
};

/// The three one-factor studies around the (H = 2, L = 1, all relations)
/// centre: heads {1,2,4}, layers {1,2,3}, relation subsets {cooc}, {orient},
/// {dist}, {all}.
inline std::vector<AblationConfig> default_ablation_grid() {
  std::vector<AblationConfig> grid;
  for (std::size_t h : {1, 2, 4}) grid.push_back({"heads", h, 1, {kAllRelations.begin(), kAllRelations.end()}});
  for (std::size_t l : {1, 2, 3}) grid.push_back({"layers", 2, l, {kAllRelations.begin(), kAllRelations.end()}});
  for (Relation r : kAllRelations) grid.push_back({"relations", 2, 1, {r}});
  grid.push_back({"relations", 2, 1, {kAllRelations.begin(), kAllRelations.end()}});
  return grid;
}

struct AblationRow {
  AblationConfig config;
  std::string hash;
  double final_loss = 0.0;
  Metrics metrics;
  double seconds = 0.0;  // wall time; not part of the deterministic table
};

struct AblationSetup {
  ToyTaskSpec spec;
  Rpkg rpkg;  // carries every relation; each row selects its subset
  ModelConfig base;
  TrainConfig train;
  std::size_t eval_proposals = 2000;
  std::uint64_t eval_seed = 0;
};

inline nlohmann::json ablation_run_json(const AblationSetup& setup, const AblationConfig& c) {
  ModelConfig mc = setup.base;
  mc.heads = c.heads;
  mc.layers = c.layers;
  mc.channels = relation_channels(c.relations);
  return {{"spec", setup.spec.to_json()},
          {"rpkg", hex64(fnv1a64(std::string_view(reinterpret_cast<const char*>(setup.rpkg.K.data.data()),
                                                  setup.rpkg.K.data.size() * sizeof(double))))},
          {"relations", relation_list_str(c.relations)},
          {"model", mc.to_json()},
          {"train", setup.train.to_json()},
          {"eval_proposals", setup.eval_proposals},
          {"eval_seed", setup.eval_seed}};
}

/// Trains and evaluates every grid entry. Entries with the same
/// configuration hash are trained once. `cache` maps a hash to a previously
/// stored result (see ablation_row_json) and skips training entirely.
inline std::vector<AblationRow> run_ablation(const std::vector<AblationConfig>& grid, const AblationSetup& setup,
                                             const std::map<std::string, nlohmann::json>& cache = {},
                                             std::size_t max_workers = 0) {
  if (grid.empty()) throw ConfigError("ablation: empty grid");
  const auto eval = generate_scenes(setup.spec, scenes_for(setup.spec, setup.eval_proposals), setup.eval_seed, "eval");

  std::vector<AblationRow> rows(grid.size());
  std::map<std::string, std::size_t> first_of;
  std::vector<std::size_t> unique;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    rows[k].config = grid[k];
    rows[k].hash = config_hash(ablation_run_json(setup, grid[k]));
    if (first_of.emplace(rows[k].hash, k).second) unique.push_back(k);
  }

  parallel_for(unique.size(), [&](std::size_t u) {
    AblationRow& row = rows[unique[u]];
    if (auto it = cache.find(row.hash); it != cache.end()) {
      row.final_loss = it->second.at("final_loss").get<double>();
      const auto& m = it->second.at("metrics");
      row.metrics.overall_acc = m.at("overall_acc").get<double>();
      if (!m.at("ambiguous_acc").is_null()) row.metrics.ambiguous_acc = m.at("ambiguous_acc").get<double>();
      if (!m.at("duplicate_detection_rate").is_null()) {
        row.metrics.duplicate_detection_rate = m.at("duplicate_detection_rate").get<double>();
      }
      return;
    }
    const auto start = std::chrono::steady_clock::now();
    const Rpkg g = setup.rpkg.select(row.config.relations);
    ModelConfig mc = setup.base;
    mc.heads = row.config.heads;
    mc.layers = row.config.layers;
    mc.channels = g.channels();
    const TrainResult trained = train(setup.spec, &g, mc, setup.train);
    row.final_loss = trained.log.back().loss;
    row.metrics = evaluate(trained.model, &g, eval);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }, max_workers);

  for (std::size_t k = 0; k < rows.size(); ++k) {
    const AblationRow& src = rows[first_of.at(rows[k].hash)];
    if (&src == &rows[k]) continue;
    rows[k].final_loss = src.final_loss;
    rows[k].metrics = src.metrics;
    rows[k].seconds = 0.0;
  }
  return rows;
}

inline nlohmann::json ablation_row_json(const AblationRow& r) {
  return {{"final_loss", r.final_loss}, {"metrics", r.metrics.to_json()}};
}

// "cooccurrence+distance": commas would split the CSV cell.
inline std::string relation_cell(const std::vector<Relation>& relations) {
  std::string out = relation_list_str(relations);
  std::replace(out.begin(), out.end(), ',', '+');
  return out;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "study,config_hash,heads,layers,relations,final_loss,overall_acc,ambiguous_acc,"
                    "duplicate_detection_rate\n";
  for (const auto& r : rows) {
    out += r.config.study + "," + r.hash + "," + std::to_string(r.config.heads) + "," +
           std::to_string(r.config.layers) + "," + relation_cell(r.config.relations) + "," +
           fmt_double(r.final_loss) + "," + fmt_double(r.metrics.overall_acc) + "," +
           fmt_optional(r.metrics.ambiguous_acc) + "," + fmt_optional(r.metrics.duplicate_detection_rate) + "\n";
  }
  return out;
}

inline std::string ablation_timing_csv(const std::vector<AblationRow>& rows) {
  std::string out = "study,config_hash,seconds\n";
  for (const auto& r : rows) out += r.config.study + "," + r.hash + "," + fmt_double(r.seconds) + "\n";
  return out;
}

}  // namespace rpfem::toy

#endif  // RPFEM_TOY_ABLATION_HPP_
