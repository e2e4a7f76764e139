#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "f2p/datagen.hpp"
#include "f2p/nets.hpp"
#include "f2p/parallel.hpp"
#include "f2p/render.hpp"
#include "f2p/schema.hpp"

namespace f2p {

enum class BlendMode { SharedFit, LocalOnly, AggregateOnly };

inline std::string_view blend_mode_name(BlendMode m) {
  switch (m) {
  case BlendMode::SharedFit: return "SharedFit";
  case BlendMode::LocalOnly: return "LocalOnly";
  case BlendMode::AggregateOnly: return "AggregateOnly";
  }
  return "?";
}

inline BlendMode blend_mode_from_name(std::string_view s) {
  if (s == "SharedFit") return BlendMode::SharedFit;
  if (s == "LocalOnly") return BlendMode::LocalOnly;
  if (s == "AggregateOnly") return BlendMode::AggregateOnly;
  throw ValidationError("unknown blend mode '" + std::string(s) + "'");
}

// Which model covers which dimension of the full vector. Local slices are
// listed in slice order; one-hot groups are renormalized after blending.
struct BlendLayout {
  std::vector<std::string> names;
  std::vector<bool> aggregate_covers;
  PerRegion<std::vector<int>> local_index;
  std::vector<IndexRange> one_hot;

  int width() const { return static_cast<int>(names.size()); }

  // (region, slice position) per dimension, or region -1 when no local covers it.
  std::vector<std::pair<int, int>> local_owner() const {
    std::vector<std::pair<int, int>> own(names.size(), {-1, -1});
    for (std::size_t r = 0; r < kRegionCount; ++r)
      for (std::size_t k = 0; k < local_index[r].size(); ++k) {
        const int d = local_index[r][k];
        if (d < 0 || d >= width()) throw ValidationError("local slice index out of range");
        if (own[static_cast<std::size_t>(d)].first >= 0) throw ValidationError("dimension in two local slices");
        own[static_cast<std::size_t>(d)] = {static_cast<int>(r), static_cast<int>(k)};
      }
    return own;
  }

  std::vector<BlendMode> modes() const {
    const auto own = local_owner();
    if (aggregate_covers.size() != names.size()) throw ValidationError("aggregate coverage has the wrong width");
    std::vector<BlendMode> m(names.size());
    for (std::size_t d = 0; d < names.size(); ++d) {
      const bool loc = own[d].first >= 0, agg = aggregate_covers[d];
      if (!loc && !agg) throw ValidationError("dimension " + names[d] + " is covered by no model");
      m[d] = loc && agg ? BlendMode::SharedFit : loc ? BlendMode::LocalOnly : BlendMode::AggregateOnly;
    }
    return m;
  }
};

inline BlendLayout blend_layout(const FaceSchema& schema) {
  const TargetLayout t(schema);
  BlendLayout b;
  b.names = t.names;
  b.aggregate_covers.assign(static_cast<std::size_t>(t.width), true);
  for (auto id : kRegions) {
    b.local_index[index_of(id)] = scope_target_index(ModelScope::local(id), schema);
    b.one_hot.push_back(t.one_hot[index_of(id)]);
  }
  return b;
}

struct PredictionRow {
  std::vector<double> aggregate; // full width, blend space
  PerRegion<std::vector<double>> local;
  std::vector<double> target;
};

struct PredictionTable {
  BlendLayout layout;
  std::vector<PredictionRow> rows;
  std::vector<std::string> ids;

  void validate() const {
    if (rows.size() < 2) throw ValidationError("prediction table needs at least 2 samples");
    const auto w = static_cast<std::size_t>(layout.width());
    layout.modes();
    for (const auto& r : rows) {
      if (r.aggregate.size() != w || r.target.size() != w) throw ValidationError("prediction row has the wrong width");
      for (std::size_t k = 0; k < kRegionCount; ++k)
        if (r.local[k].size() != layout.local_index[k].size())
          throw ValidationError("local prediction has the wrong slice width");
    }
  }

  // Per-dimension columns (local, aggregate, target); local is empty for
  // dimensions no local model covers.
  struct Column {
    std::vector<double> l, g, t;
  };
  Column column(int d) const {
    const auto own = layout.local_owner()[static_cast<std::size_t>(d)];
    Column c;
    for (const auto& r : rows) {
      if (own.first >= 0) c.l.push_back(r.local[static_cast<std::size_t>(own.first)][static_cast<std::size_t>(own.second)]);
      c.g.push_back(r.aggregate[static_cast<std::size_t>(d)]);
      c.t.push_back(r.target[static_cast<std::size_t>(d)]);
    }
    return c;
  }
};

struct EnsembleWeights {
  std::vector<std::string> names;
  std::vector<double> w;
  std::vector<BlendMode> mode;
  std::vector<std::string> clamped; // dims whose fitted weight hit the cap

  bool operator==(const EnsembleWeights& o) const { return names == o.names && w == o.w && mode == o.mode; }
};

inline constexpr double kWeightCap = 5.0;
inline constexpr double kDegenerateDenominator = 1e-12;

inline json to_json(const EnsembleWeights& e) {
  json j = json::object();
  for (std::size_t d = 0; d < e.names.size(); ++d)
    j[e.names[d]] = {{"w", e.w[d]}, {"mode", blend_mode_name(e.mode[d])}};
  return j;
}

// Dimension order follows the layout, not the (sorted) JSON object.
inline EnsembleWeights weights_from_json(const json& j, const BlendLayout& layout) {
  EnsembleWeights e;
  const auto modes = layout.modes();
  for (std::size_t d = 0; d < layout.names.size(); ++d) {
    const auto& name = layout.names[d];
    if (!j.contains(name)) throw ValidationError("weights file lacks dimension " + name);
    const auto& entry = j.at(name);
    e.names.push_back(name);
    e.w.push_back(entry.at("w").get<double>());
    e.mode.push_back(blend_mode_from_name(entry.at("mode").get<std::string>()));
    if (e.mode.back() != modes[d]) throw ValidationError("weights file mode for " + name + " does not match the models");
    if (!std::isfinite(e.w.back())) throw ValidationError("non-finite weight for " + name);
  }
  if (j.size() != layout.names.size()) throw ValidationError("weights file has unknown dimensions");
  return e;
}

inline void save_weights(const std::filesystem::path& path, const EnsembleWeights& e) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write weights file " + path.string());
  f << to_json(e).dump(2) << "\n";
  if (!f) throw IoError("failed writing weights file " + path.string());
}

inline EnsembleWeights load_weights(const std::filesystem::path& path, const BlendLayout& layout) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read weights file " + path.string());
  try {
    return weights_from_json(json::parse(f), layout);
  } catch (const json::exception& e) {
    throw ValidationError("malformed weights file " + path.string() + ": " + e.what());
  }
}

// Minimizer of sum (w l + (1-w) g - t)^2 over w.
inline double fit_weight(const std::vector<double>& l, const std::vector<double>& g, const std::vector<double>& t) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double a = l[i] - g[i];
    num += (t[i] - g[i]) * a;
    den += a * a;
  }
  if (den < kDegenerateDenominator) return 0.5;
  return num / den;
}

inline double blend_error(const std::vector<double>& l, const std::vector<double>& g, const std::vector<double>& t,
                          double w) {
  double e = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = w * l[i] + (1.0 - w) * g[i] - t[i];
    e += r * r;
  }
  return e;
}

inline EnsembleWeights fit_weights(const PredictionTable& table) {
  if (table.rows.empty()) throw ValidationError("cannot fit weights on an empty table");
  table.validate();
  EnsembleWeights e;
  e.names = table.layout.names;
  e.mode = table.layout.modes();
  e.w.resize(e.names.size());
  for (int d = 0; d < table.layout.width(); ++d) {
    const auto m = e.mode[static_cast<std::size_t>(d)];
    if (m != BlendMode::SharedFit) {
      e.w[static_cast<std::size_t>(d)] = m == BlendMode::LocalOnly ? 1.0 : 0.0;
      continue;
    }
    const auto c = table.column(d);
    double w = fit_weight(c.l, c.g, c.t);
    if (std::abs(w) > kWeightCap) {
      std::clog << "weight for " << e.names[static_cast<std::size_t>(d)] << " clamped from " << w << "\n";
      e.clamped.push_back(e.names[static_cast<std::size_t>(d)]);
      w = std::clamp(w, -kWeightCap, kWeightCap);
    }
    e.w[static_cast<std::size_t>(d)] = w;
  }
  return e;
}

// The same weight on every shared dimension (the constant-weight rows).
inline EnsembleWeights constant_weights(const BlendLayout& layout, double w) {
  EnsembleWeights e;
  e.names = layout.names;
  e.mode = layout.modes();
  for (auto m : e.mode) e.w.push_back(m == BlendMode::SharedFit ? w : m == BlendMode::LocalOnly ? 1.0 : 0.0);
  return e;
}

inline TargetVector combine(const BlendLayout& layout, const std::vector<double>& aggregate,
                            const PerRegion<std::vector<double>>& local, const EnsembleWeights& weights) {
  const auto w = static_cast<std::size_t>(layout.width());
  if (aggregate.size() != w || weights.w.size() != w || weights.mode.size() != w)
    throw ValidationError("combine: layout width mismatch");
  for (std::size_t k = 0; k < kRegionCount; ++k)
    if (local[k].size() != layout.local_index[k].size()) throw ValidationError("combine: local slice width mismatch");
  const auto own = layout.local_owner();
  TargetVector out{std::vector<double>(w)};
  for (std::size_t d = 0; d < w; ++d) {
    const double g = aggregate[d];
    const double l = own[d].first >= 0 ? local[static_cast<std::size_t>(own[d].first)][static_cast<std::size_t>(own[d].second)] : g;
    switch (weights.mode[d]) {
    case BlendMode::SharedFit: out.values[d] = l == g ? l : weights.w[d] * l + (1.0 - weights.w[d]) * g; break;
    case BlendMode::LocalOnly: out.values[d] = l; break;
    case BlendMode::AggregateOnly: out.values[d] = g; break;
    }
  }
  for (const auto& r : layout.one_hot) {
    double sum = 0.0;
    for (int i = r.begin; i < r.end; ++i) {
      auto& v = out.values[static_cast<std::size_t>(i)];
      v = std::isfinite(v) ? std::max(0.0, v) : 0.0;
      sum += v;
    }
    for (int i = r.begin; i < r.end; ++i)
      out.values[static_cast<std::size_t>(i)] = sum > 0.0 ? out.values[static_cast<std::size_t>(i)] / sum : 1.0 / r.size();
  }
  return out;
}

inline TargetVector combine(const BlendLayout& layout, const PredictionRow& row, const EnsembleWeights& weights) {
  return combine(layout, row.aggregate, row.local, weights);
}

// ---------------------------------------------------------------------------
// Models

// Anything that can produce a full-width aggregate prediction from a frame and
// a region slice from that region's input (crop or frame).
template <class M>
concept EnsemblePredictors = requires(const M& m, const Image& img, RegionId r) {
  { m.predict_aggregate(img) } -> std::convertible_to<std::vector<double>>;
  { m.predict_local(r, img) } -> std::convertible_to<std::vector<double>>;
  { m.local_input(r) } -> std::convertible_to<InputKind>;
};

struct EnsembleModels {
  PredictorModel aggregate;
  PerRegion<PredictorModel> local;

  void validate(const FaceSchema& schema) const {
    const auto fp = schema_fingerprint(schema);
    if (!aggregate.scope.complete()) throw ValidationError("aggregate model must predict the complete target");
    if (aggregate.schema_fingerprint != fp) throw ValidationError("aggregate model was trained on another schema");
    for (auto id : kRegions) {
      const auto& m = local[index_of(id)];
      if (m.scope.region != id) throw ValidationError("local model slot " + region_file_tag(id) + " holds " + m.scope.label());
      if (m.schema_fingerprint != fp) throw ValidationError("local model " + m.scope.label() + " was trained on another schema");
    }
  }

  std::vector<double> predict_aggregate(const Image& frame) const {
    const auto slice = aggregate.predict(frame);
    std::vector<double> full(slice.size());
    for (std::size_t k = 0; k < slice.size(); ++k) full[static_cast<std::size_t>(aggregate.target_index[k])] = slice[k];
    return full;
  }
  std::vector<double> predict_local(RegionId r, const Image& img) const { return local[index_of(r)].predict(img); }
  InputKind local_input(RegionId r) const { return local[index_of(r)].scope.input; }
};

// Aggregate on the frame; each local model on its crop (cut from the frame
// with the given boxes) or on the frame itself.
template <EnsemblePredictors M>
PredictionRow predict_row(const M& models, const Image& frame, const PerRegion<Rect>& boxes) {
  PredictionRow row;
  row.aggregate = models.predict_aggregate(frame);
  for (auto id : kRegions) {
    const bool crop = models.local_input(id) == InputKind::Crop;
    row.local[index_of(id)] = models.predict_local(id, crop ? crop_region(frame, boxes[index_of(id)]) : frame);
  }
  return row;
}

// Frame transform applied before prediction (style, adapter, ...); empty = none.
using ImageTransform = std::function<Image(const Image&, const SampleRecord&)>;

// Runs every model on every record of the split. Without a transform the
// stored crops are used, matching what the models were trained on; with one,
// crops are cut from the transformed frame at the stored crop boxes.
inline PredictionTable collect_predictions(const EnsembleModels& models, const DatasetManifest& manifest, Split split,
                                           const FaceSchema& schema, int workers = 1,
                                           const ImageTransform& transform = {}) {
  models.validate(schema);
  if (manifest.schema_fingerprint != schema_fingerprint(schema))
    throw ValidationError("manifest schema does not match the models");
  const auto recs = manifest.split(split);
  PredictionTable table;
  table.layout = blend_layout(schema);
  table.rows.resize(recs.size());
  table.ids.resize(recs.size());
  parallel_for(recs.size(), resolve_workers(workers), [&](std::size_t i) {
    const auto& r = *recs[i];
    auto& row = table.rows[i];
    if (transform) {
      row = predict_row(models, transform(manifest.load_frame(r), r), r.crop_boxes);
    } else {
      const Image frame = manifest.load_frame(r);
      row.aggregate = models.predict_aggregate(frame);
      for (auto id : kRegions)
        row.local[index_of(id)] =
            models.predict_local(id, models.local_input(id) == InputKind::Crop ? manifest.load_crop(r, id) : frame);
    }
    row.target = r.target.values;
    table.ids[i] = r.id;
  });
  return table;
}

struct Inference {
  Recipe recipe;
  TargetVector target;
};

// Single-image inference: optional adapter, then aggregate on the frame and
// locals on crops at the nominal boxes, blend, decode.
template <EnsemblePredictors M>
Inference infer(const Image& image, const M& models, const EnsembleWeights& weights, const FaceSchema& schema,
                const std::function<Image(const Image&)>& adapter = {}) {
  if (image.width != kFrameSize || image.height != kFrameSize)
    throw ValidationError("inference needs a " + std::to_string(kFrameSize) + "x" + std::to_string(kFrameSize) +
                          " frame, got " + std::to_string(image.width) + "x" + std::to_string(image.height));
  const Image frame = adapter ? adapter(image) : image;
  const auto row = predict_row(models, frame, nominal_crop_boxes(schema));
  Inference out;
  out.target = combine(blend_layout(schema), row, weights);
  out.recipe = decode_target(out.target, schema);
  return out;
}

} // namespace f2p
