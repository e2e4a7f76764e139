#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "f2p/datagen.hpp"
#include "f2p/ensemble.hpp"
#include "helpers.hpp"

using namespace f2p;

namespace {

// Brute-force minimizer over a fine grid; used as the oracle for the closed form.
double grid_argmin(const std::vector<double>& l, const std::vector<double>& g, const std::vector<double>& t, double lo,
                   double hi, double step) {
  double best = lo, best_e = std::numeric_limits<double>::infinity();
  for (double w = lo; w <= hi + 1e-12; w += step) {
    const double e = blend_error(l, g, t, w);
    if (e < best_e) best_e = e, best = w;
  }
  return best;
}

// Answers every query with the recipe's own target, like a perfect model.
struct OracleModels {
  std::vector<double> truth;
  BlendLayout layout;
  std::vector<double> predict_aggregate(const Image&) const { return truth; }
  std::vector<double> predict_local(RegionId r, const Image&) const {
    std::vector<double> v;
    for (int d : layout.local_index[index_of(r)]) v.push_back(truth[static_cast<std::size_t>(d)]);
    return v;
  }
  InputKind local_input(RegionId) const { return InputKind::Crop; }
};

EnsembleModels untrained(const FaceSchema& s) {
  EnsembleModels m;
  m.aggregate = init_model(ModelScope::aggregate(), s, 1);
  for (auto id : kRegions) m.local[index_of(id)] = init_model(ModelScope::local(id), s, 2 + index_of(id));
  return m;
}

} // namespace

TEST(FitWeight, HandComputedExample) {
  // sum (t-g)(l-g) / sum (l-g)^2 = 6 / 14
  const std::vector<double> l{1, 2, 3}, g{0, 0, 0}, t{1, 1, 1};
  EXPECT_NEAR(fit_weight(l, g, t), 3.0 / 7.0, 1e-15);
  EXPECT_NEAR(grid_argmin(l, g, t, -2, 2, 1e-4), 3.0 / 7.0, 1e-4);
}

TEST(FitWeight, MatchesGridOracleOnRandomColumns) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> l(50), g(50), t(50);
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = rng.uniform(-1, 1);
      l[i] = t[i] + rng.uniform(-0.3, 0.3);
      g[i] = t[i] + rng.uniform(-0.5, 0.5);
    }
    const double w = fit_weight(l, g, t);
    const double grid = grid_argmin(l, g, t, -5, 5, 1e-3);
    EXPECT_NEAR(w, grid, 1e-3);
    EXPECT_LE(blend_error(l, g, t, w), blend_error(l, g, t, grid) + 1e-12);
  }
}

TEST(FitWeight, PerfectLocalGivesOne) {
  const std::vector<double> t{0.1, -0.4, 0.9}, g{0.5, 0.5, 0.5};
  EXPECT_NEAR(fit_weight(t, g, t), 1.0, 1e-12);
  EXPECT_NEAR(fit_weight(g, t, t), 0.0, 1e-12);
}

TEST(FitWeight, DegenerateColumnGivesHalf) {
  const std::vector<double> same{0.2, 0.3, 0.4}, t{0.0, 1.0, 0.5};
  EXPECT_EQ(fit_weight(same, same, t), 0.5);
}

TEST(BlendLayout, ModesFollowCoverage) {
  const auto s = default_schema();
  const auto b = blend_layout(s);
  ASSERT_EQ(b.width(), 24);
  const auto modes = b.modes();
  for (int d = 0; d < 24; ++d) {
    const bool global = b.names[static_cast<std::size_t>(d)].rfind("Face.", 0) == 0;
    EXPECT_EQ(modes[static_cast<std::size_t>(d)], global ? BlendMode::AggregateOnly : BlendMode::SharedFit)
        << b.names[static_cast<std::size_t>(d)];
  }
}

TEST(Combine, Arithmetic) {
  const auto s = default_schema();
  const auto b = blend_layout(s);
  std::vector<double> agg(24, 0.2);
  PerRegion<std::vector<double>> loc;
  for (auto id : kRegions) loc[index_of(id)].assign(b.local_index[index_of(id)].size(), 0.6);
  auto w = constant_weights(b, 0.25);
  const auto out = combine(b, agg, loc, w);
  EXPECT_NEAR(out.values[0], 0.25 * 0.6 + 0.75 * 0.2, 1e-15); // Eyes.spacing
  EXPECT_EQ(out.values[12], 0.2);                              // face width: aggregate only
  for (const auto& r : b.one_hot) {
    double sum = 0.0;
    for (int i = r.begin; i < r.end; ++i) sum += out.values[static_cast<std::size_t>(i)];
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Combine, EndpointWeightsPassThrough) {
  const auto s = default_schema();
  const auto b = blend_layout(s);
  Rng rng(4);
  std::vector<double> agg(24);
  for (auto& v : agg) v = rng.uniform(-1, 1);
  PerRegion<std::vector<double>> loc;
  for (auto id : kRegions)
    for (std::size_t k = 0; k < b.local_index[index_of(id)].size(); ++k) loc[index_of(id)].push_back(rng.uniform(-1, 1));
  const auto own = b.local_owner();
  const auto local_only = combine(b, agg, loc, constant_weights(b, 1.0));
  const auto agg_only = combine(b, agg, loc, constant_weights(b, 0.0));
  for (int d = 0; d < 24; ++d) {
    const auto du = static_cast<std::size_t>(d);
    bool one_hot = false;
    for (const auto& r : b.one_hot) one_hot |= r.contains(d);
    if (one_hot) continue;
    EXPECT_EQ(agg_only.values[du], agg[du]);
    if (own[du].first >= 0)
      EXPECT_EQ(local_only.values[du], loc[static_cast<std::size_t>(own[du].first)][static_cast<std::size_t>(own[du].second)]);
  }
}

TEST(Combine, OneHotClippedAndRenormalized) {
  const auto s = default_schema();
  const auto b = blend_layout(s);
  std::vector<double> agg(24, 0.0);
  PerRegion<std::vector<double>> loc;
  for (auto id : kRegions) loc[index_of(id)].assign(b.local_index[index_of(id)].size(), 0.0);
  const auto& nose = b.one_hot[index_of(RegionId::Nose)];
  agg[static_cast<std::size_t>(nose.begin)] = 1.0;
  agg[static_cast<std::size_t>(nose.begin + 1)] = std::numeric_limits<double>::quiet_NaN();
  // w = 3 extrapolates: 3*0 - 2*1 = -2 on the first option.
  const auto out = combine(b, agg, loc, constant_weights(b, 3.0));
  for (const auto& r : b.one_hot) {
    double sum = 0.0;
    for (int i = r.begin; i < r.end; ++i) {
      EXPECT_GE(out.values[static_cast<std::size_t>(i)], 0.0);
      sum += out.values[static_cast<std::size_t>(i)];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Combine, EqualInputsReturnedExactly) {
  const auto s = default_schema();
  const auto b = blend_layout(s);
  const std::vector<double> v{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.15, 0.25, 0.35, 0.1, 0.2, 0.3,
                              0.2, 0.3, 0.5, 0.1, 0.6, 0.3, 0.25, 0.25, 0.5};
  PerRegion<std::vector<double>> loc;
  for (auto id : kRegions)
    for (int d : b.local_index[index_of(id)]) loc[index_of(id)].push_back(v[static_cast<std::size_t>(d)]);
  EXPECT_EQ(combine(b, v, loc, constant_weights(b, 0.37)).values, v);
}

TEST(Combine, WidthMismatchThrows) {
  const auto b = blend_layout(default_schema());
  PerRegion<std::vector<double>> loc;
  EXPECT_THROW(combine(b, std::vector<double>(24), loc, constant_weights(b, 0.5)), ValidationError);
}

TEST(FitWeights, ClampsAndRecords) {
  const auto s = default_schema();
  PredictionTable table;
  table.layout = blend_layout(s);
  Rng rng(2);
  for (int i = 0; i < 30; ++i) {
    PredictionRow row;
    row.target.assign(24, 0.0);
    row.aggregate.assign(24, 0.0);
    for (auto& v : row.target) v = rng.uniform(-1, 1);
    row.aggregate = row.target;
    for (auto id : kRegions)
      for (int d : table.layout.local_index[index_of(id)]) row.local[index_of(id)].push_back(row.target[static_cast<std::size_t>(d)]);
    // Eyes.spacing: local differs from the aggregate by a tiny offset that
    // correlates strongly with the residual, pushing w* far above the cap.
    const double r = rng.uniform(-1, 1);
    row.aggregate[0] = row.target[0] - r;
    row.local[0][0] = row.aggregate[0] + 0.01 * r;
    table.rows.push_back(row);
    table.ids.push_back(std::to_string(i));
  }
  const auto w = fit_weights(table);
  EXPECT_EQ(w.w[0], kWeightCap);
  EXPECT_EQ(w.clamped, std::vector<std::string>{"Eyes.spacing"});
  EXPECT_EQ(w.w[12], 0.0);
  EXPECT_EQ(w.w[1], 0.5); // l == g on every row
}

TEST(FitWeights, EmptyTableThrows) {
  PredictionTable table;
  table.layout = blend_layout(default_schema());
  EXPECT_THROW(fit_weights(table), ValidationError);
}

TEST(WeightsJson, RoundTrip) {
  f2p::test::TempDir dir("weights");
  const auto b = blend_layout(default_schema());
  auto w = constant_weights(b, 0.3);
  w.w[5] = -1.25;
  save_weights(dir.path / "w.json", w);
  EXPECT_EQ(load_weights(dir.path / "w.json", b), w);
  std::ofstream(dir.path / "bad.json") << "{\"Eyes.spacing\": \"x\"}";
  EXPECT_THROW(load_weights(dir.path / "bad.json", b), ValidationError);
}

TEST(Infer, OracleModelsRecoverRecipe) {
  const auto s = default_schema();
  const auto b = blend_layout(s);
  Rng rng(21);
  for (int i = 0; i < 50; ++i) {
    const auto recipe = sample_recipe(rng, s);
    OracleModels m{encode_recipe(recipe, s).values, b};
    const Image frame(kFrameSize, kFrameSize);
    const auto a = infer(frame, m, constant_weights(b, 0.7), s);
    EXPECT_EQ(a.recipe, decode_target(encode_recipe(recipe, s), s));
    const auto identity = [](const Image& img) { return img; };
    EXPECT_EQ(infer(frame, m, constant_weights(b, 0.7), s, identity).target, a.target);
  }
  OracleModels m{std::vector<double>(24, 0.0), b};
  EXPECT_THROW(infer(Image(64, 64), m, constant_weights(b, 0.5), s), ValidationError);
}

TEST(CollectPredictions, ShapeAndDeterminism) {
  f2p::test::TempDir dir("collect");
  const auto s = default_schema();
  const auto manifest = generate_dataset(f2p::test::small_config(dir.path / "data", 30), s);
  const auto models = untrained(s);
  const auto a = collect_predictions(models, manifest, Split::Train, s);
  const auto b = collect_predictions(models, manifest, Split::Train, s, 2);
  ASSERT_EQ(a.rows.size(), manifest.split(Split::Train).size());
  EXPECT_NO_THROW(a.validate());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].aggregate, b.rows[i].aggregate);
    EXPECT_EQ(a.rows[i].local, b.rows[i].local);
    EXPECT_EQ(a.rows[i].target, manifest.split(Split::Train)[i]->target.values);
  }
  // Identity transform: crops re-cut from the 8-bit frame at the stored boxes.
  // Stored crops come from the unquantized render, so only near-equal.
  const auto c = collect_predictions(models, manifest, Split::Train, s, 1,
                                     [](const Image& img, const SampleRecord&) { return img; });
  for (std::size_t i = 0; i < a.rows.size(); ++i)
    for (std::size_t k = 0; k < kRegionCount; ++k)
      for (std::size_t j = 0; j < a.rows[i].local[k].size(); ++j)
        EXPECT_NEAR(a.rows[i].local[k][j], c.rows[i].local[k][j], 0.02);

  auto other = s;
  other.global_params.push_back("forehead");
  EXPECT_THROW(collect_predictions(untrained(other), manifest, Split::Train, other), ValidationError);
}
