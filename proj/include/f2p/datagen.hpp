#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "f2p/parallel.hpp"
#include "f2p/render.hpp"
#include "f2p/rng.hpp"
#include "f2p/schema.hpp"

namespace f2p {

namespace fs = std::filesystem;

enum class Split { Train, Val, Eval };

inline std::string_view split_name(Split s) {
  switch (s) {
  case Split::Train: return "train";
  case Split::Val: return "val";
  case Split::Eval: return "eval";
  }
  return "?";
}

inline Split split_from_name(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "eval") return Split::Eval;
  throw ValidationError("unknown split '" + std::string(s) + "'");
}

struct DatasetConfig {
  int sample_count = 5000;
  std::uint64_t seed = 1;
  int views_per_recipe = 1;
  double max_jitter = 3.0;
  double max_brightness = 0.05;
  double max_contrast_delta = 0.1;
  double max_noise = 0.03;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double eval_fraction = 0.1;
  std::string output_dir = "data";
  int workers = 1;

  void validate() const {
    if (sample_count < 10) throw ValidationError("sample_count must be >= 10");
    if (views_per_recipe < 1) throw ValidationError("views_per_recipe must be >= 1");
    if (!(train_fraction > 0 && val_fraction > 0 && eval_fraction > 0) ||
        std::abs(train_fraction + val_fraction + eval_fraction - 1.0) > 1e-9)
      throw ValidationError("split fractions must be positive and sum to 1");
    if (max_jitter < 0 || max_jitter > kMaxJitter) throw ValidationError("max_jitter out of range");
  }
};

inline json to_json(const DatasetConfig& c) {
  return {{"sample_count", c.sample_count},       {"seed", c.seed},
          {"views_per_recipe", c.views_per_recipe}, {"max_jitter", c.max_jitter},
          {"max_brightness", c.max_brightness},   {"max_contrast_delta", c.max_contrast_delta},
          {"max_noise", c.max_noise},             {"train_fraction", c.train_fraction},
          {"val_fraction", c.val_fraction},       {"eval_fraction", c.eval_fraction}};
}

inline DatasetConfig dataset_config_from_json(const json& j, DatasetConfig c = {}) {
  c.sample_count = j.value("sample_count", c.sample_count);
  c.seed = j.value("seed", c.seed);
  c.views_per_recipe = j.value("views_per_recipe", c.views_per_recipe);
  c.max_jitter = j.value("max_jitter", c.max_jitter);
  c.max_brightness = j.value("max_brightness", c.max_brightness);
  c.max_contrast_delta = j.value("max_contrast_delta", c.max_contrast_delta);
  c.max_noise = j.value("max_noise", c.max_noise);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.eval_fraction = j.value("eval_fraction", c.eval_fraction);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.workers = j.value("workers", c.workers);
  return c;
}

struct SampleRecord {
  std::string id;
  int recipe_index = 0;
  Recipe recipe;
  TargetVector target;
  ViewParams view;
  Split split = Split::Train;
  std::string image_path; // relative to the dataset root
  PerRegion<std::string> crop_paths;
  PerRegion<std::string> mask_paths;
  PerRegion<Rect> crop_boxes;

  bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
  fs::path root;
  DatasetConfig config;
  std::string schema_fingerprint;
  std::vector<SampleRecord> records;

  std::vector<const SampleRecord*> split(Split s) const {
    std::vector<const SampleRecord*> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(&r);
    return out;
  }

  Image load_frame(const SampleRecord& r) const { return read_png(root / r.image_path); }
  Image load_crop(const SampleRecord& r, RegionId id) const { return read_png(root / r.crop_paths[index_of(id)]); }
};

inline constexpr std::string_view kManifestName = "manifest.jsonl";
inline constexpr std::string_view kIncompleteMarker = ".INCOMPLETE";
inline constexpr int kManifestVersion = 1;

inline Recipe sample_recipe(Rng& rng, const FaceSchema& schema) {
  Recipe r;
  for (auto id : kRegions) {
    const auto& rs = schema.region(id);
    auto& vals = r.continuous[index_of(id)];
    for (std::size_t i = 0; i < rs.continuous_params.size(); ++i) vals.push_back(rng.uniform(-1.0, 1.0));
    r.discrete[index_of(id)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(rs.discrete_option_count)));
  }
  for (std::size_t i = 0; i < schema.global_params.size(); ++i) r.globals.push_back(rng.uniform(-1.0, 1.0));
  r.scale = 0.0;
  return r;
}

inline ViewParams sample_view(Rng& rng, const DatasetConfig& c) {
  ViewParams v;
  v.jitter_x = rng.uniform(-c.max_jitter, c.max_jitter);
  v.jitter_y = rng.uniform(-c.max_jitter, c.max_jitter);
  v.brightness = rng.uniform(-c.max_brightness, c.max_brightness);
  v.contrast = 1.0 + rng.uniform(-c.max_contrast_delta, c.max_contrast_delta);
  v.noise_amplitude = rng.uniform(0.0, c.max_noise);
  v.noise_seed = rng.next_u64();
  return v;
}

// Exact split sizes; membership is a seeded permutation of recipe indices.
inline std::vector<Split> assign_splits(int recipe_count, const DatasetConfig& c) {
  const int n_train = static_cast<int>(std::lround(recipe_count * c.train_fraction));
  const int n_val = static_cast<int>(std::lround(recipe_count * c.val_fraction));
  std::vector<int> order(static_cast<std::size_t>(recipe_count));
  for (int i = 0; i < recipe_count; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(mix_seed(c.seed, 0x5117));
  rng.shuffle(order.begin(), order.end());
  std::vector<Split> splits(static_cast<std::size_t>(recipe_count));
  for (int k = 0; k < recipe_count; ++k) {
    const Split s = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Eval);
    splits[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = s;
  }
  return splits;
}

inline json to_json(const Rect& r) { return json::array({r.x, r.y, r.width, r.height}); }
inline Rect rect_from_json(const json& j) { return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()}; }

inline json to_json(const SampleRecord& r) {
  json crops = json::object(), masks = json::object(), boxes = json::object();
  for (auto id : kRegions) {
    const std::string n(region_name(id));
    crops[n] = r.crop_paths[index_of(id)];
    masks[n] = r.mask_paths[index_of(id)];
    boxes[n] = to_json(r.crop_boxes[index_of(id)]);
  }
  return {{"id", r.id},       {"recipe_index", r.recipe_index}, {"split", split_name(r.split)},
          {"recipe", to_json(r.recipe)}, {"target", r.target.values}, {"view", to_json(r.view)},
          {"image", r.image_path}, {"crops", crops}, {"masks", masks}, {"crop_boxes", boxes}};
}

inline SampleRecord record_from_json(const json& j) {
  SampleRecord r;
  r.id = j.at("id").get<std::string>();
  r.recipe_index = j.at("recipe_index").get<int>();
  r.split = split_from_name(j.at("split").get<std::string>());
  r.recipe = recipe_from_json(j.at("recipe"));
  r.target.values = j.at("target").get<std::vector<double>>();
  r.view = view_from_json(j.at("view"));
  r.image_path = j.at("image").get<std::string>();
  for (auto id : kRegions) {
    const std::string n(region_name(id));
    r.crop_paths[index_of(id)] = j.at("crops").at(n).get<std::string>();
    r.mask_paths[index_of(id)] = j.at("masks").at(n).get<std::string>();
    r.crop_boxes[index_of(id)] = rect_from_json(j.at("crop_boxes").at(n));
  }
  return r;
}

inline std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return buf;
}

inline DatasetManifest generate_dataset(const DatasetConfig& config, const FaceSchema& schema) {
  config.validate();
  schema.validate();
  const fs::path root = config.output_dir;
  const fs::path marker = root / kIncompleteMarker;
  try {
    for (const char* sub : {"img", "mask", "crop"}) fs::create_directories(root / sub);
    std::ofstream(marker) << "generation in progress\n";
    if (!fs::exists(marker)) throw IoError("cannot write to '" + root.string() + "'");
  } catch (const fs::filesystem_error& e) {
    throw IoError(std::string("cannot prepare output directory: ") + e.what());
  }

  const int recipes = (config.sample_count + config.views_per_recipe - 1) / config.views_per_recipe;
  const auto splits = assign_splits(recipes, config);

  DatasetManifest m;
  m.root = root;
  m.config = config;
  m.schema_fingerprint = schema_fingerprint(schema);
  m.records.resize(static_cast<std::size_t>(config.sample_count));

  parallel_for(m.records.size(), resolve_workers(config.workers), [&](std::size_t i) {
    const int idx = static_cast<int>(i);
    const int recipe_index = idx / config.views_per_recipe;
    Rng recipe_rng(mix_seed(config.seed, static_cast<std::uint64_t>(recipe_index)));
    Rng view_rng(mix_seed(config.seed ^ 0xF2F2F2F2ULL, static_cast<std::uint64_t>(idx)));

    SampleRecord& rec = m.records[i];
    rec.id = sample_id(idx);
    rec.recipe_index = recipe_index;
    rec.recipe = sample_recipe(recipe_rng, schema);
    rec.target = encode_recipe(rec.recipe, schema);
    rec.view = sample_view(view_rng, config);
    rec.split = splits[static_cast<std::size_t>(recipe_index)];

    const RenderOutput out = render(rec.recipe, rec.view, schema);
    rec.image_path = "img/" + rec.id + ".png";
    write_png(root / rec.image_path, out.image);
    for (auto id : kRegions) {
      const std::string tag = region_file_tag(id);
      rec.mask_paths[index_of(id)] = "mask/" + rec.id + "_" + tag + ".png";
      rec.crop_paths[index_of(id)] = "crop/" + rec.id + "_" + tag + ".png";
      rec.crop_boxes[index_of(id)] = out.crop_boxes[index_of(id)];
      write_png(root / rec.mask_paths[index_of(id)], out.masks[index_of(id)]);
      // Crops are taken from the 8-bit frame so they match what a reader of
      // the stored frame would compute.
      write_png(root / rec.crop_paths[index_of(id)],
                crop_region(quantize8(out.image), out.crop_boxes[index_of(id)]));
    }
  });

  std::ofstream os(root / kManifestName, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write manifest in '" + root.string() + "'");
  json header = {{"version", kManifestVersion},
                 {"config", to_json(config)},
                 {"schema_fingerprint", m.schema_fingerprint},
                 {"schema", to_json(schema)}};
  os << json{{"header", header}}.dump() << '\n';
  for (const auto& r : m.records) os << to_json(r).dump() << '\n';
  os.close();
  if (!os) throw IoError("failed writing manifest in '" + root.string() + "'");
  fs::remove(marker);
  return m;
}

inline DatasetManifest load_dataset(const fs::path& root, const FaceSchema& schema, bool check_files = true) {
  if (fs::exists(root / kIncompleteMarker))
    throw ValidationError("dataset at '" + root.string() + "' is incomplete (partial-output marker present)");
  std::ifstream is(root / kManifestName, std::ios::binary);
  if (!is) throw IoError("no manifest at '" + (root / kManifestName).string() + "'");

  DatasetManifest m;
  m.root = root;
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("empty manifest");
  try {
    const json header = json::parse(line).at("header");
    if (header.at("version").get<int>() != kManifestVersion) throw ValidationError("unsupported manifest version");
    m.config = dataset_config_from_json(header.at("config"));
    m.config.output_dir = root.string();
    m.schema_fingerprint = header.at("schema_fingerprint").get<std::string>();
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      m.records.push_back(record_from_json(json::parse(line)));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  if (m.schema_fingerprint != schema_fingerprint(schema))
    throw ValidationError("schema fingerprint mismatch: manifest " + m.schema_fingerprint + ", current " +
                          schema_fingerprint(schema));

  std::set<std::string> ids;
  for (const auto& r : m.records) {
    if (!ids.insert(r.id).second) throw ValidationError("duplicate sample id " + r.id);
    if (!check_files) continue;
    std::vector<std::string> paths{r.image_path};
    for (auto id : kRegions) {
      paths.push_back(r.crop_paths[index_of(id)]);
      paths.push_back(r.mask_paths[index_of(id)]);
    }
    for (const auto& p : paths)
      if (!fs::exists(root / p)) throw IoError("sample " + r.id + ": missing file '" + p + "'");
  }
  return m;
}

} // namespace f2p
