// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "f2p/harness.hpp"

namespace fs = std::filesystem;
using namespace f2p;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

// Uniform integer in [lo, hi].
long pick(Rng& rng, long lo, long hi) { return lo + static_cast<long>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1: closed-form weight vs dense grid ---------------------------------

Outcome solver_oracle() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst_w = 0.0, worst_e = -1e300, worst_raw_e = 0.0;
  int columns = 0;
  for (int table = 0; table < 200; ++table) {
    const int n = static_cast<int>(pick(rng, 2, 20));
    const int dims = static_cast<int>(pick(rng, 1, 24));
    for (int d = 0; d < dims; ++d) {
      std::vector<double> l(n), g(n), t(n);
      double w = 0.0;
      // Draw until the least-squares optimum lies inside the searched range.
      do {
        const double w_true = rng.uniform(-1.8, 1.8);
        for (int i = 0; i < n; ++i) {
          l[i] = rng.uniform(-1, 1);
          g[i] = rng.uniform(-1, 1);
          t[i] = w_true * l[i] + (1 - w_true) * g[i] + rng.uniform(-0.05, 0.05);
        }
        w = fit_weight(l, g, t);
      } while (std::abs(w) > 1.99);
      double best_w = -2.0, best_e = INFINITY;
      for (int k = 0; k <= 40000; ++k) {
        const double wg = -2.0 + 1e-4 * k;
        const double e = blend_error(l, g, t, wg);
        if (e < best_e) best_e = e, best_w = wg;
      }
      const double e_star = blend_error(l, g, t, w);
      worst_w = std::max(worst_w, std::abs(w - best_w));
      worst_e = std::max(worst_e, e_star - best_e);
      worst_raw_e = std::max(worst_raw_e, std::abs(e_star - best_e));
      ++columns;
    }
  }
  // fit_weights on a PredictionTable must agree with the column solver.
  PredictionTable tab;
  tab.layout = blend_layout(default_schema());
  for (int i = 0; i < 12; ++i) {
    PredictionRow row;
    for (int d = 0; d < 24; ++d) row.target.push_back(rng.uniform(-1, 1)), row.aggregate.push_back(rng.uniform(-1, 1));
    for (auto id : kRegions)
      for (std::size_t k = 0; k < tab.layout.local_index[index_of(id)].size(); ++k) row.local[index_of(id)].push_back(rng.uniform(-1, 1));
    tab.rows.push_back(row);
  }
  const auto fw = fit_weights(tab);
  bool table_ok = true;
  for (int d = 0; d < 24; ++d) {
    if (fw.mode[static_cast<std::size_t>(d)] != BlendMode::SharedFit) continue;
    const auto c = tab.column(d);
    table_ok &= fw.w[static_cast<std::size_t>(d)] == std::clamp(fit_weight(c.l, c.g, c.t), -kWeightCap, kWeightCap);
  }
  const double secs = seconds_since(t0);
  const bool pass = worst_w <= 1e-4 && worst_e <= 1e-9 && table_ok && secs < 10.0;
  return {pass, fmt("%d columns; max |w*-w_grid| %.2e; max E(w*)-E_grid %.2e (|E gap| %.2e); table solver %s; %.1fs",
                    columns, worst_w, worst_e, worst_raw_e, table_ok ? "agrees" : "DISAGREES", secs)};
}

// ---- 2: gradient check on random tiny nets -------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  Rng rng(77);
  double worst = 0.0, weakest_detect = INFINITY;
  for (int k = 0; k < 20; ++k) {
    NetSpec s;
    s.input_size = static_cast<int>(pick(rng, 6, 10));
    s.trunk.push_back(LayerSpec::conv(static_cast<int>(pick(rng, 1, 4))));
    if (rng.uniform() < 0.5) s.trunk.push_back(LayerSpec::conv(static_cast<int>(pick(rng, 1, 3))));
    if (rng.uniform() < 0.5) s.trunk.push_back(LayerSpec::pool(2));
    s.trunk.push_back(LayerSpec::dense(static_cast<int>(pick(rng, 2, 8))));
    const int classes = static_cast<int>(pick(rng, 0, 2));
    s.heads.push_back({"A", static_cast<int>(pick(rng, 1, 3)), classes ? classes + 1 : 0});
    if (rng.uniform() < 0.5) s.heads.push_back({"B", 0, static_cast<int>(pick(rng, 2, 4))});
    Network<double> net(s);
    const auto params = net.init_params(100 + k);
    Image img(s.input_size, s.input_size);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
    std::vector<double> target;
    for (const auto& h : s.heads) {
      for (int i = 0; i < h.continuous; ++i) target.push_back(rng.uniform(-0.9, 0.9));
      const int hot = h.one_hot ? static_cast<int>(pick(rng, 0, h.one_hot - 1)) : 0;
      for (int i = 0; i < h.one_hot; ++i) target.push_back(i == hot ? 1.0 : 0.0);
    }
    LossSpec ls;
    ls.norm = k % 2 ? RegressionNorm::L2 : RegressionNorm::L1;
    const int all = static_cast<int>(params.size());
    worst = std::max(worst, backward_check(s, params, img, target, ls, 1e-4, {all, static_cast<std::uint64_t>(k), {}}));
    GradientCheckOptions bad{all, static_cast<std::uint64_t>(k), [](std::vector<double>& grad) {
                               for (auto& v : grad) v = 1.05 * v + 1e-3;
                             }};
    weakest_detect = std::min(weakest_detect, backward_check(s, params, img, target, ls, 1e-4, bad));
  }
  const double secs = seconds_since(t0);
  const bool pass = worst < 1e-4 && weakest_detect > 1e-2 && secs < 30.0;
  return {pass, fmt("20 nets; max rel err %.2e; corrupted gradient min rel err %.2e (detected: %s); %.1fs", worst,
                    weakest_detect, weakest_detect > 1e-2 ? "yes" : "no", secs)};
}

// ---- 3: loss identities ---------------------------------------------------

Outcome loss_identities() {
  Rng rng(5);
  double worst_sum = 0.0, worst_ln = 0.0, worst_perfect = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TargetGroup> groups;
    int at = 0;
    const int ng = static_cast<int>(pick(rng, 1, 4));
    for (int gi = 0; gi < ng; ++gi) {
      TargetGroup g{"G" + std::to_string(gi), {}, {}};
      const int nr = static_cast<int>(pick(rng, 0, 4)), nc = static_cast<int>(pick(rng, nr ? 0 : 2, 5));
      for (int i = 0; i < nr; ++i) g.continuous.push_back(at++);
      for (int i = 0; i < (nc == 1 ? 2 : nc); ++i) g.one_hot.push_back(at++);
      groups.push_back(g);
    }
    std::vector<double> pred(static_cast<std::size_t>(at)), target(static_cast<std::size_t>(at), 0.0);
    LossSpec spec;
    spec.norm = trial % 2 ? RegressionNorm::L2 : RegressionNorm::L1;
    for (const auto& g : groups) {
      spec.regression_weights[g.name] = rng.uniform(0.1, 3);
      spec.classification_weights[g.name] = rng.uniform(0.1, 3);
      for (int i : g.continuous) target[static_cast<std::size_t>(i)] = rng.uniform(-1, 1);
      if (!g.one_hot.empty())
        target[static_cast<std::size_t>(g.one_hot[static_cast<std::size_t>(pick(rng, 0, static_cast<long>(g.one_hot.size()) - 1))])] = 1.0;
    }
    for (auto& p : pred) p = rng.uniform(-2, 2);
    const auto r = multipart_loss<double>(pred, target, groups, spec);
    double sum = 0.0;
    for (const auto& p : r.parts) sum += spec.v(p.group) * p.regression + spec.w(p.group) * p.classification;
    worst_sum = std::max(worst_sum, std::abs(r.total - sum));

    auto perfect = pred;
    for (const auto& g : groups)
      for (int i : g.continuous) perfect[static_cast<std::size_t>(i)] = target[static_cast<std::size_t>(i)];
    for (const auto& p : multipart_loss<double>(perfect, target, groups, spec).parts)
      worst_perfect = std::max(worst_perfect, std::abs(p.regression));

    for (const auto& g : groups) {
      if (g.one_hot.empty()) continue;
      auto uni = pred;
      const double c = rng.uniform(-3, 3);
      for (int i : g.one_hot) uni[static_cast<std::size_t>(i)] = c;
      const TargetGroup only{g.name, {}, g.one_hot};
      const double ce = multipart_loss<double>(uni, target, {only}, {}).total;
      worst_ln = std::max(worst_ln, std::abs(ce - std::log(static_cast<double>(g.one_hot.size()))));
    }
  }
  const bool pass = worst_perfect == 0.0 && worst_sum <= 1e-12 && worst_ln <= 1e-9;
  return {pass, fmt("200 random layouts; perfect-prediction regression max %.1e; |total - weighted parts| max %.1e; "
                    "|CE_uniform - ln K| max %.1e",
                    worst_perfect, worst_sum, worst_ln)};
}

// ---- 4: encode/decode ------------------------------------------------------

Outcome round_trip() {
  const auto s = default_schema();
  Rng rng(4);
  int bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto r = sample_recipe(rng, s);
    if (!(decode_target(encode_recipe(r, s), s) == r)) ++bad;
  }
  const double tied[4] = {0.3, 0.7, 0.7, 0.7};
  bool ties = true;
  for (int k = 0; k < 100; ++k) ties &= argmax(tied, 4) == 1;
  TargetVector flat{std::vector<double>(TargetLayout(s).width, 0.0)};
  const auto d1 = decode_target(flat, s), d2 = decode_target(flat, s);
  for (auto id : kRegions) ties &= d1.discrete[index_of(id)] == 0;
  ties &= d1 == d2;
  return {bad == 0 && ties, fmt("1000 recipes, %d mismatches; ties resolve to the lowest index: %s", bad, ties ? "yes" : "no")};
}

// ---- 5-7: ablation, ensemble weights, domain gap on the full corpus -------

struct MainRun {
  HarnessConfig config;
  RunPaths paths;
  std::vector<AblationRow> ablation;
  std::vector<WeightsRow> weights;
  std::vector<GapRow> gap;
  double ablation_secs = 0.0;
  std::string error;
};

MainRun main_run(const fs::path& work, int samples) {
  MainRun m{HarnessConfig{}, RunPaths{work / "main"}, {}, {}, {}, 0.0, {}};
  m.config.dataset.sample_count = samples;
  m.config.dataset.seed = 11;
  m.config.dataset.output_dir = m.paths.dataset().string();
  m.config.train.seed = 11;
  m.config.validate();
  try {
    const auto schema = default_schema();
    fs::remove_all(m.paths.out);
    fs::create_directories(m.paths.out);
    const auto manifest = generate_dataset(m.config.dataset, schema);
    std::clog << "generated " << manifest.records.size() << " samples\n";
    const auto t0 = Clock::now();
    m.ablation = run_ablation(manifest, m.config, m.paths, schema);
    m.ablation_secs = seconds_since(t0);
    write_text(m.paths.ablation(), rows_json(m.ablation).dump(2) + "\n");
    std::clog << "ablation done in " << m.ablation_secs << " s\n";

    const auto models = load_ensemble(m.paths, schema);
    const auto train_table = collect_predictions(models, manifest, Split::Train, schema);
    const auto eval_table = collect_predictions(models, manifest, Split::Eval, schema);
    const auto w = fit_weights(train_table);
    save_weights(m.paths.weights(), w);
    m.weights = compare_weights(train_table, eval_table, w);
    write_text(m.paths.weights_comparison(), rows_json(m.weights).dump(2) + "\n");

    const auto adapter = fit_adapter_on(manifest, m.config.active_style(), m.config.style_seed, m.config.adapter_corpus);
    save_adapter(m.paths.adapter(), adapter);
    m.gap = domain_gap_eval(models, w, adapter, m.config.active_style(), m.config.style_seed, manifest, schema);
    write_text(m.paths.domain_gap(), json{{"style", m.config.style}, {"rows", rows_json(m.gap)}}.dump(2) + "\n");
    emit_report(assemble_report(m.config, m.paths), m.paths.report_json(), m.paths.report_md());
  } catch (const std::exception& e) {
    m.error = e.what();
  }
  return m;
}

Outcome ablation_direction(const MainRun& m) {
  if (m.ablation.size() != 18) return {false, "ablation incomplete: " + m.error};
  bool pass = true;
  std::ostringstream os;
  for (auto id : kRegions) {
    const AblationRow* target = nullptr;
    double best_other = INFINITY;
    for (const auto& r : m.ablation) {
      if (r.region != id) continue;
      const bool is_target = r.loss == "Local" && r.input == InputKind::Crop && r.mode == TrainingMode::FullTraining;
      if (is_target) target = &r;
      else best_other = std::min(best_other, r.failed ? INFINITY : r.inaccuracy);
    }
    const bool ok = target && !target->failed && target->inaccuracy < 0.0 && target->inaccuracy < best_other;
    pass &= ok;
    os << region_name(id) << " " << (target && !target->failed ? fixed4(target->inaccuracy) : "FAILED") << " (next best "
       << fixed4(best_other) << ")" << (ok ? "" : " <-- violates") << "; ";
  }
  os << fmt("ablation %.0fs", m.ablation_secs);
  return {pass, os.str()};
}

Outcome weights_optimality(const MainRun& m) {
  if (m.weights.size() != 4) return {false, "weights comparison missing: " + m.error};
  const auto& f = m.weights[3];
  bool sse_ok = true;
  double best_const = INFINITY;
  for (int k = 0; k < 3; ++k) {
    sse_ok &= f.train_sse <= m.weights[static_cast<std::size_t>(k)].train_sse;
    best_const = std::min(best_const, m.weights[static_cast<std::size_t>(k)].eval_l1);
  }
  const bool l1_ok = f.eval_l1 <= best_const + 0.005;
  return {sse_ok && l1_ok, fmt("train SSE fitted %.4f vs const %.4f/%.4f/%.4f; eval L1 fitted %.4f vs best const %.4f",
                               f.train_sse, m.weights[0].train_sse, m.weights[1].train_sse, m.weights[2].train_sse,
                               f.eval_l1, best_const)};
}

Outcome domain_gap(const MainRun& m) {
  const GapRow* overall = nullptr;
  for (const auto& g : m.gap)
    if (g.group == "Overall") overall = &g;
  if (!overall) return {false, "domain gap missing: " + m.error};
  const auto& style = m.config.active_style();
  const bool pass = !style.identity() && style.noise <= 0.05 && overall->original <= overall->adapted &&
                    overall->adapted < overall->styled && overall->delta() > 0.0;
  return {pass, fmt("style %s; Overall eval L1 original %.4f, adapted %.4f, styled %.4f; improvement %+.4f",
                    m.config.style.c_str(), overall->original, overall->adapted, overall->styled, overall->delta())};
}

// ---- 8: CLI re-run determinism --------------------------------------------

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " >>" + "\"" + (fs::temp_directory_path() / "f2p_acceptance_cli.log").string() + "\" 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream f(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).generic_string()] = {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  }
  return out;
}

Outcome determinism(const fs::path& work) {
  const fs::path dir = work / "det";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg = dir / "config.json";
  write_text(cfg, R"({"dataset": {"sample_count": 200}, "train": {"max_epochs": 3, "batch_size": 16}})");
  const fs::path out = dir / "run";
  const std::string base = std::string("\"") + F2P_CLI_PATH + "\" --config \"" + cfg.string() + "\" --seed 5 --out \"" + out.string() + "\" ";
  std::array<std::map<std::string, std::string>, 2> trees;
  for (int k = 0; k < 2; ++k) {
    fs::remove_all(out);
    for (const char* step : {"generate", "train --scope local-nose-crop --mode full", "ablate"})
      if (const int rc = run(base + step); rc != 0) return {false, fmt("'%s' exited %d on run %d", step, rc, k + 1)};
    trees[static_cast<std::size_t>(k)] = tree_bytes(out);
  }
  int ckpts = 0;
  std::vector<std::string> differ;
  for (const auto& [name, bytes] : trees[0]) {
    ckpts += name.ends_with(".ckpt");
    const auto it = trees[1].find(name);
    if (it == trees[1].end() || it->second != bytes) differ.push_back(name);
  }
  if (trees[0].size() != trees[1].size()) differ.push_back("(file sets differ)");
  const bool have = trees[0].contains("data/manifest.jsonl") && trees[0].contains("report.json") && ckpts == 14;
  return {have && differ.empty(),
          fmt("%zu files compared (manifest, %d checkpoints, histories, report.json, images); %zu differ%s", trees[0].size(),
              ckpts, differ.size(), differ.empty() ? "" : (": " + differ.front()).c_str())};
}

// ---- 9: renderer properties -------------------------------------------------

Outcome renderer_properties() {
  const auto s = default_schema();
  Rng rng(9);
  DatasetConfig view_cfg;
  int overlap = 0, outside = 0, non_monotone = 0;
  const Rect frame{0, 0, kFrameSize, kFrameSize};
  struct Sweep {
    RegionId region;
    int param;
    bool global, width;
  };
  const Sweep sweeps[] = {{RegionId::Eyes, 1, false, true},  // eye size
                          {RegionId::Nose, 0, false, false}, // nose length
                          {RegionId::Nose, 1, false, true},  // nose width
                          {RegionId::Mouth, 0, false, true}, // mouth width
                          {RegionId::Eyes, 0, true, true}};  // face width
  for (int i = 0; i < 1000; ++i) {
    const auto r = sample_recipe(rng, s);
    const auto out = render(r, sample_view(rng, view_cfg), s);
    for (std::size_t p = 0; p < out.masks[0].bits.size(); ++p)
      if (out.masks[0].bits[p] + out.masks[1].bits[p] + out.masks[2].bits[p] > 1) {
        ++overlap;
        break;
      }
    for (auto id : kRegions) {
      const Rect box = out.crop_boxes[index_of(id)], bb = bounding_box(out.masks[index_of(id)]);
      const auto in = [](const Rect& a, const Rect& b) {
        return a.x >= b.x && a.y >= b.y && a.right() <= b.right() && a.bottom() <= b.bottom();
      };
      if (!in(box, frame) || !in(bb, box)) ++outside;
    }
    for (const auto& sw : sweeps) {
      std::vector<int> ext;
      for (double v : {-1.0, 0.0, 1.0}) {
        Recipe x = r;
        (sw.global ? x.globals[static_cast<std::size_t>(sw.param)] : x.continuous[index_of(sw.region)][static_cast<std::size_t>(sw.param)]) = v;
        const auto o = render(x, ViewParams{}, s);
        const Rect bb = bounding_box(sw.global ? o.face_mask : o.masks[index_of(sw.region)]);
        ext.push_back(sw.width ? bb.width : bb.height);
      }
      if (!(ext[0] <= ext[1] && ext[1] <= ext[2] && ext[0] < ext[2])) ++non_monotone;
    }
  }
  return {overlap == 0 && outside == 0 && non_monotone == 0,
          fmt("1000 recipes; overlapping masks %d; crop containment failures %d; non-monotone sweeps %d of 5000", overlap,
              outside, non_monotone)};
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"f2p acceptance criteria"};
  std::string work = "acceptance_work";
  int samples = 5000;
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory")->capture_default_str();
  app.add_option("--samples", samples, "corpus size for criteria 5-7")->capture_default_str();
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  const std::set<int> pick(only.begin(), only.end());
  auto want = [&](int c) { return pick.empty() || pick.contains(c); };

  bool all = true;
  auto report = [&](int c, const std::string& name, const Outcome& o) {
    all &= o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << c << " (" << name << "): " << o.detail << std::endl;
  };
  if (want(1)) report(1, "weight solver vs grid search", solver_oracle());
  if (want(2)) report(2, "gradient fidelity", gradient_fidelity());
  if (want(3)) report(3, "loss identities", loss_identities());
  if (want(4)) report(4, "encode/decode round trip", round_trip());
  if (want(5) || want(6) || want(7)) {
    const auto m = main_run(work, samples);
    if (want(5)) report(5, "ablation: local crop fine-tuned is best", ablation_direction(m));
    if (want(6)) report(6, "fitted ensemble weights", weights_optimality(m));
    if (want(7)) report(7, "domain gap and adapter", domain_gap(m));
  }
  if (want(8)) report(8, "CLI re-run determinism", determinism(work));
  if (want(9)) report(9, "renderer properties", renderer_properties());
  return all ? 0 : 1;
}
