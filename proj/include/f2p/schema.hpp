#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "f2p/error.hpp"

namespace f2p {

using nlohmann::json;

enum class RegionId { Eyes = 0, Nose = 1, Mouth = 2 };
inline constexpr std::size_t kRegionCount = 3;
inline constexpr std::array<RegionId, kRegionCount> kRegions = {RegionId::Eyes, RegionId::Nose,
                                                                RegionId::Mouth};

constexpr std::size_t index_of(RegionId r) { return static_cast<std::size_t>(r); }

inline std::string_view region_name(RegionId r) {
  switch (r) {
  case RegionId::Eyes: return "Eyes";
  case RegionId::Nose: return "Nose";
  case RegionId::Mouth: return "Mouth";
  }
  return "?";
}

inline RegionId region_from_name(std::string_view s) {
  for (auto r : kRegions) {
    std::string lower(region_name(r));
    std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
    if (s == region_name(r) || s == lower) return r;
  }
  throw ValidationError("unknown region '" + std::string(s) + "'");
}

// Lower-case region name used in file names and CLI arguments.
inline std::string region_file_tag(RegionId id) {
  std::string s(region_name(id));
  std::transform(s.begin(), s.end(), s.begin(), ::tolower);
  return s;
}

template <class T>
using PerRegion = std::array<T, kRegionCount>;

enum class Locality { Local, Global };

struct ParamSpec {
  std::string name;
  Locality locality = Locality::Local;
};

struct RegionSchema {
  RegionId id = RegionId::Eyes;
  std::vector<ParamSpec> continuous_params;
  int discrete_option_count = 0;
};

struct FaceSchema {
  std::vector<RegionSchema> regions; // ordered as kRegions
  std::vector<std::string> global_params;
  std::string scale_param;

  const RegionSchema& region(RegionId r) const { return regions.at(index_of(r)); }

  int continuous_dims() const {
    int n = static_cast<int>(global_params.size());
    for (const auto& r : regions) n += static_cast<int>(r.continuous_params.size());
    return n;
  }
  int one_hot_dims() const {
    int n = 0;
    for (const auto& r : regions) n += r.discrete_option_count;
    return n;
  }
  int target_width() const { return continuous_dims() + one_hot_dims(); }

  void validate() const {
    if (regions.size() != kRegionCount) throw ValidationError("schema must define exactly 3 regions");
    std::set<std::string> names;
    auto add_name = [&](const std::string& n) {
      if (!names.insert(n).second) throw ValidationError("duplicate parameter name '" + n + "'");
    };
    for (std::size_t i = 0; i < regions.size(); ++i) {
      const auto& r = regions[i];
      if (index_of(r.id) != i) throw ValidationError("regions out of canonical order");
      if (r.continuous_params.size() < 3 || r.discrete_option_count < 2)
        throw ValidationError("region " + std::string(region_name(r.id)) + " too small");
      bool has_local = false, has_global = false;
      for (const auto& p : r.continuous_params) {
        add_name(std::string(region_name(r.id)) + "." + p.name);
        (p.locality == Locality::Local ? has_local : has_global) = true;
      }
      if (!has_local || !has_global)
        throw ValidationError("region " + std::string(region_name(r.id)) +
                              " needs both Local and Global parameters");
    }
    for (const auto& g : global_params) add_name("Face." + g);
    if (scale_param.empty() || names.count("Face." + scale_param))
      throw ValidationError("scale parameter must be named and outside every target slice");
  }
};

// The canonical schema: three regions of four continuous parameters and three
// discrete variants each, three whole-face globals and one pinned scale.
inline FaceSchema default_schema() {
  FaceSchema s;
  s.regions = {
      {RegionId::Eyes,
       {{"spacing", Locality::Global},
        {"size", Locality::Local},
        {"tilt", Locality::Local},
        {"vertical_position", Locality::Global}},
       3},
      {RegionId::Nose,
       {{"length", Locality::Local},
        {"width", Locality::Local},
        {"tip_curve", Locality::Local},
        {"vertical_position", Locality::Global}},
       3},
      {RegionId::Mouth,
       {{"width", Locality::Local},
        {"thickness", Locality::Local},
        {"curvature", Locality::Local},
        {"vertical_position", Locality::Global}},
       3},
  };
  s.global_params = {"face_width", "jaw_width", "chin_length"};
  s.scale_param = "scale";
  return s;
}

inline json to_json(const FaceSchema& s) {
  json regions = json::array();
  for (const auto& r : s.regions) {
    json params = json::array();
    for (const auto& p : r.continuous_params)
      params.push_back({{"name", p.name}, {"locality", p.locality == Locality::Local ? "Local" : "Global"}});
    regions.push_back({{"region", region_name(r.id)},
                       {"continuous", params},
                       {"discrete_option_count", r.discrete_option_count}});
  }
  return {{"regions", regions}, {"globals", s.global_params}, {"scale", s.scale_param}};
}

// FNV-1a over the canonical JSON serialization.
inline std::string schema_fingerprint(const FaceSchema& s) {
  const std::string text = to_json(s).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct Recipe {
  PerRegion<std::vector<double>> continuous;
  std::vector<double> globals;
  double scale = 0.0;
  PerRegion<int> discrete{};

  bool operator==(const Recipe&) const = default;
};

inline Recipe zero_recipe(const FaceSchema& s) {
  Recipe r;
  for (auto id : kRegions) r.continuous[index_of(id)].assign(s.region(id).continuous_params.size(), 0.0);
  r.globals.assign(s.global_params.size(), 0.0);
  return r;
}

inline void validate_recipe(const Recipe& r, const FaceSchema& s) {
  auto check_range = [](double v, const std::string& what) {
    if (!(v >= -1.0 && v <= 1.0)) throw EncodingError(what + " value " + std::to_string(v) + " outside [-1, 1]");
  };
  for (auto id : kRegions) {
    const auto& rs = s.region(id);
    const auto& vals = r.continuous[index_of(id)];
    const std::string rn(region_name(id));
    if (vals.size() != rs.continuous_params.size()) throw EncodingError(rn + ": wrong continuous count");
    for (double v : vals) check_range(v, rn);
    const int opt = r.discrete[index_of(id)];
    if (opt < 0 || opt >= rs.discrete_option_count)
      throw EncodingError("invalid option index " + std::to_string(opt) + " for region " + rn);
  }
  if (r.globals.size() != s.global_params.size()) throw EncodingError("wrong global parameter count");
  for (double v : r.globals) check_range(v, "global");
}

struct IndexRange {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool contains(int i) const { return i >= begin && i < end; }
};

// A loss/head group: indices (into whatever vector the group describes) of its
// continuous dims and of its one-hot slice.
struct TargetGroup {
  std::string name;
  std::vector<int> continuous;
  std::vector<int> one_hot;
};

// Placement of every schema quantity inside the flat target vector:
//   [region continuous...] [globals] [region one-hot...]
struct TargetLayout {
  PerRegion<IndexRange> continuous;
  IndexRange globals;
  PerRegion<IndexRange> one_hot;
  int width = 0;
  std::vector<std::string> names;

  explicit TargetLayout(const FaceSchema& s) {
    int at = 0;
    for (auto id : kRegions) {
      const auto& rs = s.region(id);
      continuous[index_of(id)] = {at, at + static_cast<int>(rs.continuous_params.size())};
      for (const auto& p : rs.continuous_params) names.push_back(std::string(region_name(id)) + "." + p.name);
      at = continuous[index_of(id)].end;
    }
    globals = {at, at + static_cast<int>(s.global_params.size())};
    for (const auto& g : s.global_params) names.push_back("Face." + g);
    at = globals.end;
    for (auto id : kRegions) {
      const int k = s.region(id).discrete_option_count;
      one_hot[index_of(id)] = {at, at + k};
      for (int i = 0; i < k; ++i) names.push_back(std::string(region_name(id)) + ".option_" + std::to_string(i));
      at += k;
    }
    width = at;
  }

  bool is_continuous(int i) const { return i < globals.end; }

  // Groups over the full vector: one per region plus "Face" for the globals.
  std::vector<TargetGroup> groups() const {
    std::vector<TargetGroup> gs;
    for (auto id : kRegions) {
      TargetGroup g{std::string(region_name(id)), {}, {}};
      for (int i = continuous[index_of(id)].begin; i < continuous[index_of(id)].end; ++i) g.continuous.push_back(i);
      for (int i = one_hot[index_of(id)].begin; i < one_hot[index_of(id)].end; ++i) g.one_hot.push_back(i);
      gs.push_back(std::move(g));
    }
    TargetGroup face{"Face", {}, {}};
    for (int i = globals.begin; i < globals.end; ++i) face.continuous.push_back(i);
    gs.push_back(std::move(face));
    return gs;
  }
};

struct TargetVector {
  std::vector<double> values;
  bool operator==(const TargetVector&) const = default;
};

inline TargetVector encode_recipe(const Recipe& r, const FaceSchema& s) {
  validate_recipe(r, s);
  const TargetLayout layout(s);
  TargetVector t{std::vector<double>(static_cast<std::size_t>(layout.width), 0.0)};
  for (auto id : kRegions) {
    const auto& vals = r.continuous[index_of(id)];
    std::copy(vals.begin(), vals.end(), t.values.begin() + layout.continuous[index_of(id)].begin);
    t.values[static_cast<std::size_t>(layout.one_hot[index_of(id)].begin + r.discrete[index_of(id)])] = 1.0;
  }
  std::copy(r.globals.begin(), r.globals.end(), t.values.begin() + layout.globals.begin);
  return t;
}

// Lowest index wins ties.
inline int argmax(const double* first, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (first[i] > first[best]) best = i;
  return best;
}

inline Recipe decode_target(const TargetVector& t, const FaceSchema& s) {
  const TargetLayout layout(s);
  if (static_cast<int>(t.values.size()) != layout.width)
    throw EncodingError("target vector length " + std::to_string(t.values.size()) + " does not match layout width " +
                        std::to_string(layout.width));
  auto clamp1 = [](double v) { return std::isnan(v) ? 0.0 : std::clamp(v, -1.0, 1.0); };
  Recipe r;
  for (auto id : kRegions) {
    const auto cr = layout.continuous[index_of(id)];
    for (int i = cr.begin; i < cr.end; ++i) r.continuous[index_of(id)].push_back(clamp1(t.values[i]));
    const auto oh = layout.one_hot[index_of(id)];
    r.discrete[index_of(id)] = argmax(t.values.data() + oh.begin, oh.size());
  }
  for (int i = layout.globals.begin; i < layout.globals.end; ++i) r.globals.push_back(clamp1(t.values[i]));
  r.scale = 0.0;
  return r;
}

inline json to_json(const Recipe& r) {
  json cont = json::object(), disc = json::object();
  for (auto id : kRegions) {
    cont[std::string(region_name(id))] = r.continuous[index_of(id)];
    disc[std::string(region_name(id))] = r.discrete[index_of(id)];
  }
  return {{"continuous", cont}, {"globals", r.globals}, {"discrete", disc}, {"scale", r.scale}};
}

inline Recipe recipe_from_json(const json& j) {
  Recipe r;
  try {
    for (auto id : kRegions) {
      const std::string n(region_name(id));
      r.continuous[index_of(id)] = j.at("continuous").at(n).get<std::vector<double>>();
      r.discrete[index_of(id)] = j.at("discrete").at(n).get<int>();
    }
    r.globals = j.at("globals").get<std::vector<double>>();
    r.scale = j.at("scale").get<double>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed recipe JSON: ") + e.what());
  }
  return r;
}

} // namespace f2p
