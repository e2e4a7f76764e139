#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "f2p/datagen.hpp"
#include "f2p/domain_adapt.hpp"
#include "f2p/ensemble.hpp"
#include "f2p/nets.hpp"
#include "f2p/parallel.hpp"
#include "f2p/train.hpp"

#ifndef F2P_BUILD_ID
#define F2P_BUILD_ID "unknown"
#endif

namespace f2p {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct HarnessConfig {
  DatasetConfig dataset;
  TrainConfig train;
  LossSpec loss;
  std::map<std::string, StyleParams> styles = style_presets();
  std::string style = "photo-like"; // preset used by fit-adapter and domain-gap
  std::uint64_t style_seed = 99;
  int adapter_corpus = 200; // images per (unpaired) corpus
  int workers = 1;

  void validate() const {
    dataset.validate();
    train.validate();
    loss.validate();
    if (!styles.contains(style)) throw ValidationError("unknown style preset '" + style + "'");
    for (const auto& [name, s] : styles) s.validate();
    if (adapter_corpus < 20) throw ValidationError("adapter_corpus must be >= 20");
  }

  const StyleParams& active_style() const { return styles.at(style); }
};

inline json to_json(const HarnessConfig& c) {
  json styles = json::object();
  for (const auto& [name, s] : c.styles) styles[name] = to_json(s);
  return {{"dataset", to_json(c.dataset)}, {"train", to_json(c.train)}, {"loss", to_json(c.loss)},
          {"styles", styles},              {"style", c.style},          {"style_seed", c.style_seed},
          {"adapter_corpus", c.adapter_corpus}, {"workers", c.workers}};
}

inline HarnessConfig harness_config_from_json(const json& j) {
  HarnessConfig c;
  try {
    if (j.contains("dataset")) c.dataset = dataset_config_from_json(j.at("dataset"), c.dataset);
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
    if (j.contains("loss")) c.loss = loss_spec_from_json(j.at("loss"));
    if (j.contains("styles"))
      for (const auto& [name, s] : j.at("styles").items()) c.styles[name] = style_from_json(s);
    c.style = j.value("style", c.style);
    c.style_seed = j.value("style_seed", c.style_seed);
    c.adapter_corpus = j.value("adapter_corpus", c.adapter_corpus);
    c.workers = j.value("workers", c.workers);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

inline HarnessConfig load_harness_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  try {
    return harness_config_from_json(json::parse(f));
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

// Directory layout under --out.
struct RunPaths {
  fs::path out;
  fs::path dataset() const { return out / "data"; }
  fs::path models() const { return out / "models"; }
  fs::path weights() const { return out / "weights.json"; }
  fs::path adapter() const { return out / "adapter.json"; }
  fs::path ablation() const { return out / "ablation.json"; }
  fs::path weights_comparison() const { return out / "weights_comparison.json"; }
  fs::path domain_gap() const { return out / "domain_gap.json"; }
  fs::path report_json() const { return out / "report.json"; }
  fs::path report_md() const { return out / "report.md"; }
  static std::string model_name(const ModelScope& scope, TrainingMode mode) {
    return scope.label() + (mode == TrainingMode::FrozenTrunk ? "-frozen" : "-full");
  }
  fs::path checkpoint(const ModelScope& scope, TrainingMode mode) const {
    return models() / (model_name(scope, mode) + ".ckpt");
  }
  fs::path history(const ModelScope& scope, TrainingMode mode) const {
    return models() / (model_name(scope, mode) + ".csv");
  }
};

// Ensemble members: the complete-target frame model and the per-region crop
// models, both after full training.
inline EnsembleModels load_ensemble(const RunPaths& paths, const FaceSchema& schema) {
  EnsembleModels m;
  m.aggregate = load_checkpoint(paths.checkpoint(ModelScope::aggregate(), TrainingMode::FullTraining), schema);
  for (auto id : kRegions)
    m.local[index_of(id)] = load_checkpoint(paths.checkpoint(ModelScope::local(id), TrainingMode::FullTraining), schema);
  m.validate(schema);
  return m;
}

// ---------------------------------------------------------------------------
// Baseline and metrics

struct BaselinePredictor {
  std::vector<double> mean;
};

inline BaselinePredictor baseline(const std::vector<std::vector<double>>& targets) {
  if (targets.empty()) throw ValidationError("baseline needs a non-empty split");
  BaselinePredictor b{std::vector<double>(targets.front().size(), 0.0)};
  for (const auto& t : targets) {
    if (t.size() != b.mean.size()) throw ValidationError("target widths differ");
    for (std::size_t d = 0; d < t.size(); ++d) b.mean[d] += t[d];
  }
  for (auto& v : b.mean) v /= static_cast<double>(targets.size());
  return b;
}

inline BaselinePredictor baseline(const DatasetManifest& manifest, Split split) {
  std::vector<std::vector<double>> t;
  for (const auto* r : manifest.split(split)) t.push_back(r->target.values);
  if (t.empty()) throw ValidationError(std::string(split_name(split)) + " split is empty");
  return baseline(t);
}

inline double inaccuracy_vs_baseline(double model_loss, double baseline_loss) { return model_loss - baseline_loss; }

// Mean |pred - target| over the given dims and all samples.
inline double mean_l1(const std::vector<std::vector<double>>& pred, const std::vector<std::vector<double>>& target,
                      const std::vector<int>& dims) {
  if (pred.size() != target.size() || pred.empty() || dims.empty()) throw ValidationError("mean_l1: empty or mismatched");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (int d : dims) s += std::abs(pred[i][static_cast<std::size_t>(d)] - target[i][static_cast<std::size_t>(d)]);
  return s / static_cast<double>(pred.size() * dims.size());
}

inline double one_hot_accuracy(const std::vector<std::vector<double>>& pred,
                               const std::vector<std::vector<double>>& target, IndexRange r) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    hit += argmax(pred[i].data() + r.begin, r.size()) == argmax(target[i].data() + r.begin, r.size());
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline std::vector<int> range_dims(IndexRange r) {
  std::vector<int> d;
  for (int i = r.begin; i < r.end; ++i) d.push_back(i);
  return d;
}

// Region dims in the ensemble metrics: continuous and one-hot probabilities.
// "Face" covers the whole-face globals.
inline std::vector<std::pair<std::string, std::vector<int>>> metric_groups(const FaceSchema& schema) {
  const TargetLayout t(schema);
  std::vector<std::pair<std::string, std::vector<int>>> g;
  for (auto id : kRegions) {
    auto d = range_dims(t.continuous[index_of(id)]);
    for (int i : range_dims(t.one_hot[index_of(id)])) d.push_back(i);
    g.emplace_back(std::string(region_name(id)), d);
  }
  g.emplace_back("Face", range_dims(t.globals));
  std::vector<int> all;
  for (int i = 0; i < t.width; ++i) all.push_back(i);
  g.emplace_back("Overall", all);
  return g;
}

// Model predictions (full-width, blend space; dims outside the model's slice
// are left at 0) for every sample in a set.
inline std::vector<std::vector<double>> predict_set(const PredictorModel& model, const SampleSet& set, int width,
                                                    int workers = 1) {
  std::vector<std::vector<double>> out(set.size());
  parallel_for(set.size(), resolve_workers(workers), [&](std::size_t i) {
    const auto slice = model.predict(set.image(i));
    out[i].assign(static_cast<std::size_t>(width), 0.0);
    for (std::size_t k = 0; k < slice.size(); ++k) out[i][static_cast<std::size_t>(model.target_index[k])] = slice[k];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Report sections

struct AblationRow {
  RegionId region = RegionId::Eyes;
  std::string loss; // "Complete" or "Local"
  InputKind input = InputKind::FullFrame;
  TrainingMode mode = TrainingMode::FrozenTrunk;
  bool failed = false;
  std::string error;
  double mean_l1 = 0.0;
  double baseline_l1 = 0.0;
  double accuracy = 0.0;
  double inaccuracy = 0.0;
  std::string run_id; // checkpoint path relative to --out

  bool operator==(const AblationRow&) const = default;
};

struct WeightsRow {
  std::string name; // "w=0.0", "w=0.5", "w=1.0", "fitted"
  double train_sse = 0.0;
  double eval_l1 = 0.0;
  std::vector<double> delta; // eval_l1 minus each constant row's eval_l1
  bool operator==(const WeightsRow&) const = default;
};

struct GapRow {
  std::string group;
  double original = 0.0;
  double styled = 0.0;
  double adapted = 0.0;
  double delta() const { return styled - adapted; }
  bool operator==(const GapRow&) const = default;
};

struct Report {
  json config;
  std::string build_id = F2P_BUILD_ID;
  std::string dataset; // relative to --out
  std::vector<AblationRow> ablation;
  std::vector<WeightsRow> weights;
  std::string style;
  std::vector<GapRow> domain_gap;

  bool operator==(const Report&) const = default;
};

inline json to_json(const AblationRow& r) {
  json j = {{"region", region_name(r.region)}, {"loss", r.loss},       {"input", input_name(r.input)},
            {"mode", mode_name(r.mode)},       {"failed", r.failed},   {"run_id", r.run_id},
            {"baseline_l1", r.baseline_l1}};
  if (r.failed) {
    j["error"] = r.error;
  } else {
    j["mean_l1"] = r.mean_l1;
    j["accuracy"] = r.accuracy;
    j["inaccuracy"] = r.inaccuracy;
  }
  return j;
}

inline AblationRow ablation_row_from_json(const json& j) {
  AblationRow r;
  r.region = region_from_name(j.at("region").get<std::string>());
  r.loss = j.at("loss").get<std::string>();
  r.input = input_from_name(j.at("input").get<std::string>());
  r.mode = mode_from_name(j.at("mode").get<std::string>());
  r.failed = j.at("failed").get<bool>();
  r.run_id = j.at("run_id").get<std::string>();
  r.baseline_l1 = j.at("baseline_l1").get<double>();
  if (r.failed) {
    r.error = j.value("error", std::string());
  } else {
    r.mean_l1 = j.at("mean_l1").get<double>();
    r.accuracy = j.at("accuracy").get<double>();
    r.inaccuracy = j.at("inaccuracy").get<double>();
  }
  return r;
}

inline json to_json(const WeightsRow& r) {
  return {{"name", r.name}, {"train_sse", r.train_sse}, {"eval_l1", r.eval_l1}, {"delta", r.delta}};
}
inline WeightsRow weights_row_from_json(const json& j) {
  return {j.at("name").get<std::string>(), j.at("train_sse").get<double>(), j.at("eval_l1").get<double>(),
          j.at("delta").get<std::vector<double>>()};
}

inline json to_json(const GapRow& r) {
  return {{"group", r.group}, {"original", r.original}, {"styled", r.styled}, {"adapted", r.adapted}, {"delta", r.delta()}};
}
inline GapRow gap_row_from_json(const json& j) {
  return {j.at("group").get<std::string>(), j.at("original").get<double>(), j.at("styled").get<double>(),
          j.at("adapted").get<double>()};
}

template <class Row>
json rows_json(const std::vector<Row>& rows) {
  json a = json::array();
  for (const auto& r : rows) a.push_back(to_json(r));
  return a;
}

inline json to_json(const Report& r) {
  return {{"build_id", r.build_id}, {"config", r.config},     {"dataset", r.dataset},
          {"ablation", rows_json(r.ablation)}, {"weights", rows_json(r.weights)},
          {"style", r.style},       {"domain_gap", rows_json(r.domain_gap)}};
}

inline Report report_from_json(const json& j) {
  Report r;
  try {
    r.build_id = j.at("build_id").get<std::string>();
    r.config = j.at("config");
    r.dataset = j.at("dataset").get<std::string>();
    for (const auto& x : j.at("ablation")) r.ablation.push_back(ablation_row_from_json(x));
    for (const auto& x : j.at("weights")) r.weights.push_back(weights_row_from_json(x));
    r.style = j.at("style").get<std::string>();
    for (const auto& x : j.at("domain_gap")) r.domain_gap.push_back(gap_row_from_json(x));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  }
  return r;
}

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.4f", v);
  return buf;
}

inline std::string to_markdown(const Report& r) {
  std::ostringstream os;
  os << "# F2P report\n\nbuild `" << r.build_id << "`, dataset `" << r.dataset << "`\n";
  if (!r.ablation.empty()) {
    os << "\n## Ablation (eval split, inaccuracy relative to the mean predictor)\n\n"
       << "| region | loss | input | mode | mean L1 | accuracy | inaccuracy |\n"
       << "|---|---|---|---|---|---|---|\n";
    for (const auto& a : r.ablation) {
      os << "| " << region_name(a.region) << " | " << a.loss << " | " << input_name(a.input) << " | "
         << mode_name(a.mode) << " | ";
      if (a.failed)
        os << "FAILED | FAILED | FAILED |\n";
      else
        os << fixed4(a.mean_l1) << " | " << fixed4(a.accuracy) << " | " << fixed4(a.inaccuracy) << " |\n";
    }
  }
  if (!r.weights.empty()) {
    os << "\n## Ensemble weights (eval L1; deltas against w=0.0 / w=0.5 / w=1.0)\n\n"
       << "| weights | train SSE | eval L1 | vs w=0.0 | vs w=0.5 | vs w=1.0 |\n|---|---|---|---|---|---|\n";
    for (const auto& w : r.weights) {
      os << "| " << w.name << " | " << fixed4(w.train_sse) << " | " << fixed4(w.eval_l1);
      for (double d : w.delta) os << " | " << fixed4(d);
      os << " |\n";
    }
  }
  if (!r.domain_gap.empty()) {
    os << "\n## Domain gap (style `" << r.style << "`, ensemble eval L1)\n\n"
       << "| group | original | styled | adapted | styled - adapted |\n|---|---|---|---|---|\n";
    for (const auto& g : r.domain_gap)
      os << "| " << g.group << " | " << fixed4(g.original) << " | " << fixed4(g.styled) << " | " << fixed4(g.adapted)
         << " | " << fixed4(g.delta()) << " |\n";
  }
  return os.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

inline json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + " is not valid JSON: " + e.what());
  }
}

inline void emit_report(const Report& r, const fs::path& json_path, const fs::path& md_path) {
  write_text(json_path, to_json(r).dump(2) + "\n");
  write_text(md_path, to_markdown(r));
}

// Section files present under --out are merged into report.json / report.md.
inline Report assemble_report(const HarnessConfig& config, const RunPaths& paths) {
  Report r;
  r.config = to_json(config);
  r.dataset = fs::relative(paths.dataset(), paths.out).generic_string();
  r.style = config.style;
  if (fs::exists(paths.ablation()))
    for (const auto& x : read_json(paths.ablation())) r.ablation.push_back(ablation_row_from_json(x));
  if (fs::exists(paths.weights_comparison()))
    for (const auto& x : read_json(paths.weights_comparison())) r.weights.push_back(weights_row_from_json(x));
  if (fs::exists(paths.domain_gap())) {
    const auto j = read_json(paths.domain_gap());
    r.style = j.at("style").get<std::string>();
    for (const auto& x : j.at("rows")) r.domain_gap.push_back(gap_row_from_json(x));
  }
  for (const auto& a : r.ablation)
    if (!fs::exists(paths.out / a.run_id)) throw ValidationError("report references missing checkpoint " + a.run_id);
  return r;
}

// ---------------------------------------------------------------------------
// Ablation

namespace detail {

struct Chain {
  ModelScope scope;
  std::string loss;
};

inline std::vector<Chain> ablation_chains() {
  std::vector<Chain> c{{ModelScope::aggregate(), "Complete"}};
  for (auto id : kRegions) c.push_back({ModelScope::local(id, InputKind::FullFrame), "Local"});
  for (auto id : kRegions) c.push_back({ModelScope::local(id, InputKind::Crop), "Local"});
  return c;
}

} // namespace detail

// Trains the frozen/full pair for every chain (complete-frame, local-frame,
// local-crop) with one shared TrainConfig, saves checkpoints and histories
// under paths.models(), and scores each cell per region on the eval split.
inline std::vector<AblationRow> run_ablation(const DatasetManifest& manifest, const HarnessConfig& config,
                                             const RunPaths& paths, const FaceSchema& schema) {
  if (manifest.schema_fingerprint != schema_fingerprint(schema)) throw ValidationError("manifest schema mismatch");
  fs::create_directories(paths.models());
  const int workers = resolve_workers(config.workers);
  const TargetLayout layout(schema);

  // Inputs are decoded once and shared between chains.
  std::map<std::string, std::array<SampleSet, 3>> sets;
  auto load_all = [&](InputKind in, std::optional<RegionId> r) {
    const std::string key = std::string(input_name(in)) + (r ? region_file_tag(*r) : "");
    if (!sets.contains(key))
      sets[key] = {load_samples(manifest, Split::Train, in, r, workers), load_samples(manifest, Split::Val, in, r, workers),
                   load_samples(manifest, Split::Eval, in, r, workers)};
    return key;
  };
  const auto chains = detail::ablation_chains();
  std::vector<std::string> keys;
  for (const auto& c : chains)
    keys.push_back(load_all(c.scope.input, c.scope.input == InputKind::Crop ? c.scope.region : std::nullopt));

  const auto& eval_targets = sets.at(keys.front())[2].targets;
  const BaselinePredictor base = baseline(eval_targets);
  std::vector<std::vector<double>> base_pred(eval_targets.size(), base.mean);

  struct ChainResult {
    std::array<std::optional<std::vector<std::vector<double>>>, 2> pred;
    std::array<std::string, 2> error;
  };
  std::vector<ChainResult> results(chains.size());

  parallel_for(chains.size(), workers, [&](std::size_t ci) {
    const auto& c = chains[ci];
    const auto& s = sets.at(keys[ci]);
    auto& res = results[ci];
    PredictorModel model = init_model(c.scope, schema, mix_seed(config.train.seed, ci));
    for (int m = 0; m < 2; ++m) {
      const auto mode = m == 0 ? TrainingMode::FrozenTrunk : TrainingMode::FullTraining;
      if (m == 1 && !res.pred[0]) {
        res.error[1] = "frozen stage failed";
        break;
      }
      try {
        TrainConfig tc = config.train;
        tc.mode = mode;
        auto r = train(model, s[0], s[1], config.loss, tc);
        model = std::move(r.model);
        save_checkpoint(paths.checkpoint(c.scope, mode), model);
        r.history.write_csv(paths.history(c.scope, mode));
        res.pred[static_cast<std::size_t>(m)] = predict_set(model, s[2], layout.width);
      } catch (const std::exception& e) {
        res.error[static_cast<std::size_t>(m)] = e.what();
        std::clog << "cell " << c.scope.label() << " " << mode_name(mode) << " FAILED: " << e.what() << "\n";
      }
    }
  });

  std::vector<AblationRow> rows;
  for (auto id : kRegions) {
    const auto dims = range_dims(layout.continuous[index_of(id)]);
    const double base_l1 = mean_l1(base_pred, eval_targets, dims);
    // Cell order per region: (Complete, FullFrame), (Local, FullFrame), (Local, Crop); frozen before full.
    for (std::size_t ci = 0; ci < chains.size(); ++ci) {
      const auto& c = chains[ci];
      if (c.scope.region && *c.scope.region != id) continue;
      for (int m = 0; m < 2; ++m) {
        AblationRow row;
        row.region = id;
        row.loss = c.loss;
        row.input = c.scope.input;
        row.mode = m == 0 ? TrainingMode::FrozenTrunk : TrainingMode::FullTraining;
        row.run_id = fs::relative(paths.checkpoint(c.scope, row.mode), paths.out).generic_string();
        row.baseline_l1 = base_l1;
        const auto& pred = results[ci].pred[static_cast<std::size_t>(m)];
        if (!pred) {
          row.failed = true;
          row.error = results[ci].error[static_cast<std::size_t>(m)];
        } else {
          row.mean_l1 = mean_l1(*pred, eval_targets, dims);
          row.accuracy = one_hot_accuracy(*pred, eval_targets, layout.one_hot[index_of(id)]);
          row.inaccuracy = inaccuracy_vs_baseline(row.mean_l1, base_l1);
        }
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Ensemble evaluation

inline std::vector<std::vector<double>> combine_table(const PredictionTable& table, const EnsembleWeights& w) {
  std::vector<std::vector<double>> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) out.push_back(combine(table.layout, row, w).values);
  return out;
}

inline std::vector<std::vector<double>> table_targets(const PredictionTable& table) {
  std::vector<std::vector<double>> t;
  for (const auto& row : table.rows) t.push_back(row.target);
  return t;
}

// Squared blend error summed over samples and shared dims (the fitted
// objective; other dims do not depend on w).
inline double shared_sse(const PredictionTable& table, const EnsembleWeights& w) {
  double s = 0.0;
  for (int d = 0; d < table.layout.width(); ++d) {
    if (w.mode[static_cast<std::size_t>(d)] != BlendMode::SharedFit) continue;
    const auto c = table.column(d);
    s += blend_error(c.l, c.g, c.t, w.w[static_cast<std::size_t>(d)]);
  }
  return s;
}

inline double ensemble_l1(const PredictionTable& table, const EnsembleWeights& w, const std::vector<int>& dims) {
  return mean_l1(combine_table(table, w), table_targets(table), dims);
}

inline std::vector<int> all_dims(const BlendLayout& layout) {
  std::vector<int> d(static_cast<std::size_t>(layout.width()));
  std::iota(d.begin(), d.end(), 0);
  return d;
}

inline constexpr std::array<double, 3> kConstantWeights = {0.0, 0.5, 1.0};

inline std::string weight_row_name(double w) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "w=%.1f", w);
  return buf;
}

// Constant-weight rows and the fitted row, from tables collected on the
// fitting (train) and eval splits.
inline std::vector<WeightsRow> compare_weights(const PredictionTable& train_table, const PredictionTable& eval_table,
                                               const EnsembleWeights& fitted) {
  std::vector<WeightsRow> rows;
  const auto dims = all_dims(eval_table.layout);
  for (double c : kConstantWeights) {
    const auto w = constant_weights(train_table.layout, c);
    rows.push_back({weight_row_name(c), shared_sse(train_table, w), ensemble_l1(eval_table, w, dims), {}});
  }
  rows.push_back({"fitted", shared_sse(train_table, fitted), ensemble_l1(eval_table, fitted, dims), {}});
  for (auto& r : rows)
    for (std::size_t k = 0; k < kConstantWeights.size(); ++k) r.delta.push_back(r.eval_l1 - rows[k].eval_l1);
  return rows;
}

// Style noise is seeded per recipe so every condition sees the same field.
inline Image styled_frame(const Image& frame, const SampleRecord& r, const StyleParams& style, std::uint64_t seed) {
  return apply_style(frame, style, mix_seed(seed, static_cast<std::uint64_t>(r.recipe_index)));
}

// Ensemble L1 on original, styled and adapted-styled eval frames. Crops are
// cut from each (transformed) frame at the recorded crop boxes.
inline std::vector<GapRow> domain_gap_eval(const EnsembleModels& models, const EnsembleWeights& weights,
                                           const AdapterParams& adapter, const StyleParams& style,
                                           std::uint64_t style_seed, const DatasetManifest& manifest,
                                           const FaceSchema& schema, int workers = 1) {
  const ImageTransform original = [](const Image& f, const SampleRecord&) { return f; };
  const ImageTransform styled = [&](const Image& f, const SampleRecord& r) { return styled_frame(f, r, style, style_seed); };
  const ImageTransform adapted = [&](const Image& f, const SampleRecord& r) {
    return adapt(styled_frame(f, r, style, style_seed), adapter);
  };
  const auto t_orig = collect_predictions(models, manifest, Split::Eval, schema, workers, original);
  const auto t_styled = collect_predictions(models, manifest, Split::Eval, schema, workers, styled);
  const auto t_adapted = collect_predictions(models, manifest, Split::Eval, schema, workers, adapted);
  std::vector<GapRow> rows;
  for (const auto& [name, dims] : metric_groups(schema))
    rows.push_back({name, ensemble_l1(t_orig, weights, dims), ensemble_l1(t_styled, weights, dims),
                    ensemble_l1(t_adapted, weights, dims)});
  return rows;
}

// Unpaired corpora from the train split: styled frames from even positions,
// plain synthetic frames from odd positions.
inline AdapterParams fit_adapter_on(const DatasetManifest& manifest, const StyleParams& style, std::uint64_t style_seed,
                                    int per_corpus, int workers = 1) {
  const auto recs = manifest.split(Split::Train);
  if (recs.size() < static_cast<std::size_t>(2 * per_corpus))
    throw ValidationError("train split too small for two adapter corpora of " + std::to_string(per_corpus));
  std::vector<Image> styled(static_cast<std::size_t>(per_corpus)), synthetic(static_cast<std::size_t>(per_corpus));
  parallel_for(static_cast<std::size_t>(per_corpus), resolve_workers(workers), [&](std::size_t i) {
    const auto& a = *recs[2 * i];
    const auto& b = *recs[2 * i + 1];
    styled[i] = styled_frame(manifest.load_frame(a), a, style, style_seed);
    synthetic[i] = manifest.load_frame(b);
  });
  return fit_adapter(styled, synthetic);
}

} // namespace f2p
