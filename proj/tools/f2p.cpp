// f2p: command-line driver for every pipeline stage.
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "f2p/harness.hpp"

namespace fs = std::filesystem;
using namespace f2p;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
};

HarnessConfig load_config(const Globals& g) {
  HarnessConfig c = g.config_path.empty() ? HarnessConfig{} : load_harness_config(g.config_path);
  if (g.seed) {
    c.dataset.seed = *g.seed;
    c.train.seed = *g.seed;
  }
  c.dataset.output_dir = RunPaths{g.out}.dataset().string();
  c.dataset.workers = c.workers;
  c.validate();
  return c;
}

ModelScope parse_scope(const std::string& s) {
  if (s == "complete-frame") return ModelScope::aggregate();
  for (auto id : kRegions)
    for (auto in : {InputKind::FullFrame, InputKind::Crop}) {
      const ModelScope sc = ModelScope::local(id, in);
      if (sc.label() == s) return sc;
    }
  throw ValidationError("unknown scope '" + s + "' (complete-frame, local-<region>-frame, local-<region>-crop)");
}

void write_report(const HarnessConfig& config, const RunPaths& paths) {
  emit_report(assemble_report(config, paths), paths.report_json(), paths.report_md());
  std::cout << "report: " << paths.report_json().string() << ", " << paths.report_md().string() << "\n";
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"F2P: face-to-parameters pipeline"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config (dataset, train, loss, styles, workers)");
  app.add_option("--seed", g.seed, "override dataset and training seeds");
  app.add_option("--out", g.out, "run directory")->capture_default_str();

  auto* generate = app.add_subcommand("generate", "render the synthetic dataset");

  auto* train_cmd = app.add_subcommand("train", "train one model scope");
  std::string scope_arg = "complete-frame", mode_arg = "full";
  train_cmd->add_option("--scope", scope_arg, "complete-frame | local-<eyes|nose|mouth>-<frame|crop>")->capture_default_str();
  train_cmd->add_option("--mode", mode_arg, "frozen | full (full warm-starts from the frozen checkpoint)")
      ->check(CLI::IsMember({"frozen", "full"}))
      ->capture_default_str();

  auto* fit_weights_cmd = app.add_subcommand("fit-weights", "fit ensemble weights on the train split");
  auto* fit_adapter_cmd = app.add_subcommand("fit-adapter", "fit the inverse style adapter");
  auto* ablate = app.add_subcommand("ablate", "train and score every ablation cell");
  auto* compare = app.add_subcommand("compare-weights", "constant vs fitted ensemble weights");
  auto* gap = app.add_subcommand("domain-gap", "ensemble error on original, styled and adapted frames");

  auto* infer_cmd = app.add_subcommand("infer", "predict a recipe for one 128x128 grayscale PNG");
  std::string image_path;
  bool use_adapter = false;
  infer_cmd->add_option("image", image_path, "input image")->required();
  infer_cmd->add_flag("--adapt", use_adapter, "run the fitted adapter first");

  auto* report = app.add_subcommand("report", "assemble report.json and report.md");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const HarnessConfig config = load_config(g);
    const RunPaths paths{g.out};
    const FaceSchema schema = default_schema();
    const int workers = resolve_workers(config.workers);
    fs::create_directories(paths.out);

    if (generate->parsed()) {
      const auto m = generate_dataset(config.dataset, schema);
      std::cout << "generated " << m.records.size() << " samples in " << m.root.string() << "\n";
    } else if (train_cmd->parsed()) {
      const auto scope = parse_scope(scope_arg);
      const auto manifest = load_dataset(paths.dataset(), schema);
      fs::create_directories(paths.models());
      const auto frozen_path = paths.checkpoint(scope, TrainingMode::FrozenTrunk);
      PredictorModel model;
      if (mode_arg == "full" && fs::exists(frozen_path)) {
        model = load_checkpoint(frozen_path, schema);
        if (model.scope != scope) throw ValidationError(frozen_path.string() + " holds another scope");
      } else {
        model = init_model(scope, schema, config.train.seed);
        TrainConfig tc = config.train;
        tc.mode = TrainingMode::FrozenTrunk;
        auto r = train(model, manifest, config.loss, tc);
        model = std::move(r.model);
        save_checkpoint(frozen_path, model);
        r.history.write_csv(paths.history(scope, TrainingMode::FrozenTrunk));
        std::cout << "saved " << frozen_path.string() << "\n";
      }
      if (mode_arg == "full") {
        TrainConfig tc = config.train;
        tc.mode = TrainingMode::FullTraining;
        auto r = train(model, manifest, config.loss, tc);
        save_checkpoint(paths.checkpoint(scope, TrainingMode::FullTraining), r.model);
        r.history.write_csv(paths.history(scope, TrainingMode::FullTraining));
        std::cout << "saved " << paths.checkpoint(scope, TrainingMode::FullTraining).string() << "\n";
      }
    } else if (fit_weights_cmd->parsed()) {
      const auto manifest = load_dataset(paths.dataset(), schema);
      const auto models = load_ensemble(paths, schema);
      const auto w = fit_weights(collect_predictions(models, manifest, Split::Train, schema, workers));
      save_weights(paths.weights(), w);
      std::cout << "weights: " << paths.weights().string() << " (" << w.clamped.size() << " clamped)\n";
    } else if (fit_adapter_cmd->parsed()) {
      const auto manifest = load_dataset(paths.dataset(), schema);
      const auto a = fit_adapter_on(manifest, config.active_style(), config.style_seed, config.adapter_corpus, workers);
      save_adapter(paths.adapter(), a);
      std::cout << "adapter (" << config.style << "): gain " << a.gain << " bias " << a.bias << " gamma " << a.gamma
                << " sharpen " << a.sharpen << "\n";
    } else if (ablate->parsed()) {
      const auto manifest = load_dataset(paths.dataset(), schema);
      const auto rows = run_ablation(manifest, config, paths, schema);
      write_text(paths.ablation(), rows_json(rows).dump(2) + "\n");
      write_report(config, paths);
    } else if (compare->parsed()) {
      const auto manifest = load_dataset(paths.dataset(), schema);
      const auto models = load_ensemble(paths, schema);
      const auto train_table = collect_predictions(models, manifest, Split::Train, schema, workers);
      const auto eval_table = collect_predictions(models, manifest, Split::Eval, schema, workers);
      const auto w = fs::exists(paths.weights()) ? load_weights(paths.weights(), train_table.layout) : fit_weights(train_table);
      write_text(paths.weights_comparison(), rows_json(compare_weights(train_table, eval_table, w)).dump(2) + "\n");
      write_report(config, paths);
    } else if (gap->parsed()) {
      const auto manifest = load_dataset(paths.dataset(), schema);
      const auto models = load_ensemble(paths, schema);
      const auto w = load_weights(paths.weights(), blend_layout(schema));
      const auto a = load_adapter(paths.adapter());
      const auto rows =
          domain_gap_eval(models, w, a, config.active_style(), config.style_seed, manifest, schema, workers);
      write_text(paths.domain_gap(), json{{"style", config.style}, {"rows", rows_json(rows)}}.dump(2) + "\n");
      write_report(config, paths);
    } else if (infer_cmd->parsed()) {
      const auto models = load_ensemble(paths, schema);
      const auto w = load_weights(paths.weights(), blend_layout(schema));
      std::function<Image(const Image&)> adapter;
      if (use_adapter) {
        const auto a = load_adapter(paths.adapter());
        adapter = [a](const Image& img) { return adapt(img, a); };
      }
      const auto result = infer(read_png(image_path), models, w, schema, adapter);
      std::cout << to_json(result.recipe).dump(2) << "\n";
    } else if (report->parsed()) {
      write_report(config, paths);
    }
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
