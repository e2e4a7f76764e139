#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "f2p/error.hpp"
#include "f2p/image.hpp"
#include "f2p/rng.hpp"

namespace f2p {

// Target-domain simulator: photometric curve, blur, vignette, noise.
struct StyleParams {
  double gain = 1.0;
  double bias = 0.0;
  double gamma = 1.0;
  double blur_radius = 0.0; // gaussian sigma in pixels
  double noise = 0.0;       // normal noise std-dev
  double vignette = 0.0;    // darkening at the corners

  void validate() const {
    if (!(gain > 0.0) || !(gamma > 0.0)) throw ValidationError("style gain and gamma must be positive");
    if (blur_radius < 0.0 || noise < 0.0 || vignette < 0.0 || vignette > 1.0)
      throw ValidationError("style blur, noise and vignette must be non-negative (vignette <= 1)");
  }
  bool identity() const {
    return gain == 1.0 && bias == 0.0 && gamma == 1.0 && blur_radius == 0.0 && noise == 0.0 && vignette == 0.0;
  }
  bool operator==(const StyleParams&) const = default;
};

inline json to_json(const StyleParams& s) {
  return {{"gain", s.gain},   {"bias", s.bias},   {"gamma", s.gamma}, {"blur_radius", s.blur_radius},
          {"noise", s.noise}, {"vignette", s.vignette}};
}

inline StyleParams style_from_json(const json& j, StyleParams s = {}) {
  s.gain = j.value("gain", s.gain);
  s.bias = j.value("bias", s.bias);
  s.gamma = j.value("gamma", s.gamma);
  s.blur_radius = j.value("blur_radius", s.blur_radius);
  s.noise = j.value("noise", s.noise);
  s.vignette = j.value("vignette", s.vignette);
  s.validate();
  return s;
}

inline std::map<std::string, StyleParams> style_presets() {
  return {
      {"identity", StyleParams{}},
      {"photo-like", StyleParams{0.8, 0.08, 1.4, 1.0, 0.02, 0.25}},
      // dark, contrasty and soft: the adapter must undo a strong gamma and sharpen
      {"sketch-like", StyleParams{1.1, -0.05, 2.2, 1.5, 0.01, 0.0}},
  };
}

namespace detail {

inline std::vector<float> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[static_cast<std::size_t>(i + r)] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v = static_cast<float>(v / sum);
  return k;
}

// Separable convolution with edge clamping.
inline Image convolve(const Image& src, const std::vector<float>& k) {
  const int r = static_cast<int>(k.size() / 2), w = src.width, h = src.height;
  Image tmp(w, h), out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * src.at(std::clamp(x + i, 0, w - 1), y);
      tmp.at(x, y) = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp.at(x, std::clamp(y + i, 0, h - 1));
      out.at(x, y) = acc;
    }
  return out;
}

inline float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

} // namespace detail

inline Image gaussian_blur(const Image& src, double sigma) {
  if (sigma <= 0.0) return src;
  return detail::convolve(src, detail::gaussian_kernel(sigma));
}

inline Image apply_style(const Image& image, const StyleParams& style, std::uint64_t seed) {
  style.validate();
  if (style.identity()) return image;
  Image out = image;
  for (auto& p : out.pixels) p = detail::clip01(style.gain * std::pow(static_cast<double>(p), style.gamma) + style.bias);
  out = gaussian_blur(out, style.blur_radius);
  if (style.vignette > 0.0 || style.noise > 0.0) {
    Rng rng(mix_seed(seed, 0x57E1E));
    const double cx = 0.5 * (out.width - 1), cy = 0.5 * (out.height - 1);
    const double r2max = cx * cx + cy * cy;
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) {
        const double d2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / r2max;
        double v = out.at(x, y) * (1.0 - style.vignette * d2);
        if (style.noise > 0.0) v += style.noise * rng.normal();
        out.at(x, y) = detail::clip01(v);
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inverse adapter

inline constexpr std::array<double, 3> kFitQuantiles = {0.05, 0.50, 0.95};

// Levels of the stored quantile tables (5%, 10%, ..., 95%).
inline std::vector<double> quantile_levels() {
  std::vector<double> q;
  for (int i = 1; i <= 19; ++i) q.push_back(0.05 * i);
  return q;
}

struct CorpusStats {
  double mean = 0.0;
  double variance = 0.0;
  double gradient = 0.0; // mean gradient magnitude
  std::vector<double> quantiles; // at quantile_levels()
  bool operator==(const CorpusStats&) const = default;
};

struct AdapterParams {
  double gain = 1.0;
  double bias = 0.0;
  double gamma = 1.0;
  double sharpen = 0.0; // unsharp-mask amount, applied before the curve
  CorpusStats styled;
  CorpusStats synthetic;

  bool identity() const { return gain == 1.0 && bias == 0.0 && gamma == 1.0 && sharpen == 0.0; }
  bool operator==(const AdapterParams&) const = default;
};

inline json to_json(const CorpusStats& s) {
  return {{"mean", s.mean}, {"variance", s.variance}, {"gradient", s.gradient}, {"quantiles", s.quantiles}};
}
inline CorpusStats corpus_stats_from_json(const json& j) {
  return {j.at("mean").get<double>(), j.at("variance").get<double>(), j.at("gradient").get<double>(),
          j.at("quantiles").get<std::vector<double>>()};
}

inline json to_json(const AdapterParams& a) {
  return {{"gain", a.gain},
          {"bias", a.bias},
          {"gamma", a.gamma},
          {"sharpen", a.sharpen},
          {"quantile_levels", quantile_levels()},
          {"styled", to_json(a.styled)},
          {"synthetic", to_json(a.synthetic)}};
}

inline AdapterParams adapter_from_json(const json& j) {
  AdapterParams a;
  try {
    a.gain = j.at("gain").get<double>();
    a.bias = j.at("bias").get<double>();
    a.gamma = j.at("gamma").get<double>();
    a.sharpen = j.at("sharpen").get<double>();
    a.styled = corpus_stats_from_json(j.at("styled"));
    a.synthetic = corpus_stats_from_json(j.at("synthetic"));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed adapter: ") + e.what());
  }
  if (!(a.gain > 0.0) || !(a.gamma > 0.0) || a.sharpen < 0.0) throw ValidationError("adapter gain/gamma must be positive");
  return a;
}

inline void save_adapter(const std::filesystem::path& path, const AdapterParams& a) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write adapter file " + path.string());
  f << to_json(a).dump(2) << "\n";
  if (!f) throw IoError("failed writing adapter file " + path.string());
}

inline AdapterParams load_adapter(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read adapter file " + path.string());
  try {
    return adapter_from_json(json::parse(f));
  } catch (const json::parse_error& e) {
    throw ValidationError("malformed adapter file " + path.string() + ": " + e.what());
  }
}

inline Image unsharp(const Image& img, double amount) {
  if (amount <= 0.0) return img;
  const Image soft = gaussian_blur(img, 1.0);
  Image out = img;
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = detail::clip01(img.pixels[i] + amount * (img.pixels[i] - soft.pixels[i]));
  return out;
}

inline Image apply_curve(const Image& img, double gain, double bias, double gamma) {
  if (gain == 1.0 && bias == 0.0 && gamma == 1.0) return img;
  Image out = img;
  for (auto& p : out.pixels) p = detail::clip01(gain * std::pow(static_cast<double>(p), gamma) + bias);
  return out;
}

inline Image adapt(const Image& image, const AdapterParams& a) {
  if (a.identity()) return image;
  return apply_curve(unsharp(image, a.sharpen), a.gain, a.bias, a.gamma);
}

namespace detail {

// Interpolated quantile of sorted values.
inline double quantile_sorted(const std::vector<float>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline std::vector<float> pooled_sorted(const std::vector<Image>& corpus) {
  std::vector<float> all;
  for (const auto& img : corpus) all.insert(all.end(), img.pixels.begin(), img.pixels.end());
  std::sort(all.begin(), all.end());
  return all;
}

// Mean gradient magnitude over the strongest 5% of pixel gradients, measured
// after a light smoothing so that pixel noise does not pass for edges.
inline double mean_gradient(const std::vector<Image>& corpus) {
  std::vector<float> g;
  for (const auto& raw : corpus) {
    const Image img = convolve(raw, gaussian_kernel(1.0));
    for (int y = 0; y + 1 < img.height; ++y)
      for (int x = 0; x + 1 < img.width; ++x) {
        const float dx = img.at(x + 1, y) - img.at(x, y), dy = img.at(x, y + 1) - img.at(x, y);
        g.push_back(std::sqrt(dx * dx + dy * dy));
      }
  }
  if (g.empty()) return 0.0;
  const auto top = g.size() - std::max<std::size_t>(1, g.size() / 20);
  std::nth_element(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(top), g.end());
  double sum = 0.0;
  for (auto it = g.begin() + static_cast<std::ptrdiff_t>(top); it != g.end(); ++it) sum += *it;
  return sum / static_cast<double>(g.end() - (g.begin() + static_cast<std::ptrdiff_t>(top)));
}

// Curve through the three (styled -> synthetic) quantile pairs. gamma is
// found by bisection on the spread ratio, then gain and bias follow.
struct Curve {
  double gain = 1.0, bias = 0.0, gamma = 1.0;
};

inline Curve fit_curve(const std::array<double, 3>& s, const std::array<double, 3>& t) {
  const double lo = std::max(s[0], 0.0), mid = std::max(s[1], 0.0), hi = std::max(s[2], 0.0);
  if (hi - lo < 1e-6 || t[2] - t[0] < 1e-6) throw ValidationError("corpus intensities are degenerate");
  Curve c;
  auto ratio = [&](double g) {
    const double a = std::pow(mid, g) - std::pow(lo, g), b = std::pow(hi, g) - std::pow(lo, g);
    return a / b;
  };
  const double want = (t[1] - t[0]) / (t[2] - t[0]);
  // ratio(g) falls as g grows on 0 <= lo < mid < hi.
  if (mid - lo > 1e-6 && hi - mid > 1e-6 && want > 0.0 && want < 1.0) {
    double g0 = 0.1, g1 = 10.0;
    if (ratio(g0) <= want) c.gamma = g0;
    else if (ratio(g1) >= want) c.gamma = g1;
    else {
      for (int it = 0; it < 200; ++it) {
        const double gm = 0.5 * (g0 + g1);
        (ratio(gm) > want ? g0 : g1) = gm;
      }
      c.gamma = 0.5 * (g0 + g1);
    }
  }
  const double plo = std::pow(lo, c.gamma), phi = std::pow(hi, c.gamma);
  c.gain = (t[2] - t[0]) / (phi - plo);
  c.bias = t[0] - c.gain * plo;
  return c;
}

} // namespace detail

inline CorpusStats corpus_stats(const std::vector<Image>& corpus) {
  const auto v = detail::pooled_sorted(corpus);
  CorpusStats s;
  if (v.empty()) return s;
  double sum = 0.0, sum2 = 0.0;
  for (float p : v) {
    sum += p;
    sum2 += static_cast<double>(p) * p;
  }
  s.mean = sum / static_cast<double>(v.size());
  s.variance = std::max(0.0, sum2 / static_cast<double>(v.size()) - s.mean * s.mean);
  s.gradient = detail::mean_gradient(corpus);
  for (double q : quantile_levels()) s.quantiles.push_back(detail::quantile_sorted(v, q));
  return s;
}

// Mean absolute difference of the stored quantile tables.
inline double quantile_distance(const CorpusStats& a, const CorpusStats& b) {
  if (a.quantiles.size() != b.quantiles.size() || a.quantiles.empty()) throw ValidationError("quantile tables differ in size");
  double d = 0.0;
  for (std::size_t i = 0; i < a.quantiles.size(); ++i) d += std::abs(a.quantiles[i] - b.quantiles[i]);
  return d / static_cast<double>(a.quantiles.size());
}

inline double quantile_distance(const std::vector<Image>& a, const std::vector<Image>& b) {
  return quantile_distance(corpus_stats(a), corpus_stats(b));
}

// Unpaired fit. A first curve maps styled onto synthetic quantiles; the
// sharpening amount is then chosen so the mapped corpus regains the synthetic
// mean gradient magnitude; the curve is refit on the sharpened corpus.
inline AdapterParams fit_adapter(const std::vector<Image>& styled, const std::vector<Image>& synthetic) {
  if (styled.size() < 20 || synthetic.size() < 20) throw ValidationError("adapter fitting needs >= 20 images per corpus");
  auto fit_quantiles = [](const std::vector<Image>& corpus) {
    const auto v = detail::pooled_sorted(corpus);
    std::array<double, 3> q{};
    for (std::size_t i = 0; i < 3; ++i) q[i] = detail::quantile_sorted(v, kFitQuantiles[i]);
    if (q[2] - q[0] < 1e-6) throw ValidationError("corpus is degenerate (near-constant intensities)");
    return q;
  };
  const auto qt = fit_quantiles(synthetic);
  const auto qs = fit_quantiles(styled);

  AdapterParams a;
  a.styled = corpus_stats(styled);
  a.synthetic = corpus_stats(synthetic);

  const auto c0 = detail::fit_curve(qs, qt);
  auto mapped_gradient = [&](double amount, const detail::Curve& c) {
    std::vector<Image> m;
    m.reserve(styled.size());
    for (const auto& img : styled) m.push_back(apply_curve(unsharp(img, amount), c.gain, c.bias, c.gamma));
    return detail::mean_gradient(m);
  };
  const double target = a.synthetic.gradient;
  if (mapped_gradient(0.0, c0) < target * (1.0 - 1e-6)) {
    double lo = 0.0, hi = 8.0;
    if (mapped_gradient(hi, c0) <= target) {
      lo = hi;
    } else {
      for (int it = 0; it < 30; ++it) {
        const double m = 0.5 * (lo + hi);
        (mapped_gradient(m, c0) < target ? lo : hi) = m;
      }
    }
    a.sharpen = 0.5 * (lo + hi);
  }

  detail::Curve c = c0;
  if (a.sharpen > 0.0) {
    std::vector<Image> sharpened;
    sharpened.reserve(styled.size());
    for (const auto& img : styled) sharpened.push_back(unsharp(img, a.sharpen));
    c = detail::fit_curve(fit_quantiles(sharpened), qt);
  }
  a.gain = c.gain;
  a.bias = c.bias;
  a.gamma = c.gamma;
  return a;
}

} // namespace f2p
