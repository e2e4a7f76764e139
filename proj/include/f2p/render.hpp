#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <string_view>

#include "f2p/image.hpp"
#include "f2p/rng.hpp"
#include "f2p/schema.hpp"

namespace f2p {

inline constexpr int kFrameSize = 128;
inline constexpr int kCropSize = 48;
inline constexpr int kCropMargin = 4;
inline constexpr double kMaxJitter = 4.0;

struct ViewParams {
  double jitter_x = 0.0;
  double jitter_y = 0.0;
  double brightness = 0.0;
  double contrast = 1.0;
  double noise_amplitude = 0.0;
  std::uint64_t noise_seed = 0;

  bool operator==(const ViewParams&) const = default;
};

inline void validate_view(const ViewParams& v) {
  if (std::abs(v.jitter_x) > kMaxJitter || std::abs(v.jitter_y) > kMaxJitter)
    throw ValidationError("view jitter exceeds +/-" + std::to_string(kMaxJitter) + " px");
  if (!(v.contrast > 0.0) || v.noise_amplitude < 0.0) throw ValidationError("invalid photometric view parameters");
}

inline json to_json(const ViewParams& v) {
  return {{"jitter_x", v.jitter_x},   {"jitter_y", v.jitter_y},
          {"brightness", v.brightness}, {"contrast", v.contrast},
          {"noise_amplitude", v.noise_amplitude}, {"noise_seed", v.noise_seed}};
}

inline ViewParams view_from_json(const json& j) {
  ViewParams v;
  v.jitter_x = j.at("jitter_x").get<double>();
  v.jitter_y = j.at("jitter_y").get<double>();
  v.brightness = j.at("brightness").get<double>();
  v.contrast = j.at("contrast").get<double>();
  v.noise_amplitude = j.at("noise_amplitude").get<double>();
  v.noise_seed = j.at("noise_seed").get<std::uint64_t>();
  return v;
}

struct RenderOutput {
  Image image;
  PerRegion<Mask> masks;
  PerRegion<Rect> crop_boxes;
  Mask face_mask;
  ViewParams view;
};

// Fixed crop window per region. The padded mask box is grown to this size so
// that resampling to kCropSize applies the same scale to every sample of a
// region and shape sizes survive the resize.
inline Rect crop_window_size(RegionId r) {
  switch (r) {
  case RegionId::Eyes: return {0, 0, 64, 24};
  case RegionId::Nose: return {0, 0, 28, 28};
  case RegionId::Mouth: return {0, 0, 48, 24};
  }
  return {};
}

namespace detail {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }

inline double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a, ap = p - a;
  const double len2 = ab.x * ab.x + ab.y * ab.y;
  const double t = len2 > 0.0 ? std::clamp((ap.x * ab.x + ap.y * ab.y) / len2, 0.0, 1.0) : 0.0;
  const Vec2 q = a + t * ab;
  return std::hypot(p.x - q.x, p.y - q.y);
}

struct Polyline {
  std::vector<Vec2> pts;

  double distance(Vec2 p) const {
    double d = std::numeric_limits<double>::max();
    for (std::size_t i = 1; i < pts.size(); ++i) d = std::min(d, segment_distance(p, pts[i - 1], pts[i]));
    return d;
  }
  Vec2 lo() const {
    Vec2 m{1e9, 1e9};
    for (auto q : pts) m = {std::min(m.x, q.x), std::min(m.y, q.y)};
    return m;
  }
  Vec2 hi() const {
    Vec2 m{-1e9, -1e9};
    for (auto q : pts) m = {std::max(m.x, q.x), std::max(m.y, q.y)};
    return m;
  }
};

inline Polyline quad_bezier(Vec2 p0, Vec2 c, Vec2 p1, int segments = 24) {
  Polyline pl;
  for (int i = 0; i <= segments; ++i) {
    const double t = static_cast<double>(i) / segments;
    const double u = 1.0 - t;
    pl.pts.push_back(u * u * p0 + (2.0 * u * t) * c + (t * t) * p1);
  }
  return pl;
}

inline Polyline segment(Vec2 a, Vec2 b) { return {{a, b}}; }

// Accumulates anti-aliased primitives into an image and records which
// pixels each primitive touched.
class Canvas {
public:
  Canvas(Image& img, Mask& touched) : img_(img), touched_(touched) {}

  // `signed_distance` < 0 inside. Coverage uses a one-pixel linear ramp.
  void fill(Vec2 lo, Vec2 hi, const std::function<double(Vec2)>& signed_distance,
            const std::function<double(Vec2)>& ink) {
    stamp(lo, hi, [&](Vec2 p) { return std::clamp(0.5 - signed_distance(p), 0.0, 1.0); }, ink);
  }

  void stroke(const Polyline& pl, double half_width, double ink) {
    const double pad = half_width + 1.0;
    const Vec2 lo = pl.lo() - Vec2{pad, pad}, hi = pl.hi() + Vec2{pad, pad};
    stamp(lo, hi, [&](Vec2 p) { return std::clamp(half_width + 0.5 - pl.distance(p), 0.0, 1.0); },
          [ink](Vec2) { return ink; });
  }

  void fill_ellipse(Vec2 c, double rx, double ry, double angle, double ink) {
    const double r = std::max(rx, ry) + 1.5;
    fill(c - Vec2{r, r}, c + Vec2{r, r}, [=](Vec2 p) { return ellipse_distance(p, c, rx, ry, angle); },
         [ink](Vec2) { return ink; });
  }

  void stroke_ellipse(Vec2 c, double rx, double ry, double angle, double half_width, double ink) {
    const double r = std::max(rx, ry) + half_width + 1.5;
    stamp(c - Vec2{r, r}, c + Vec2{r, r},
          [=](Vec2 p) {
            return std::clamp(half_width + 0.5 - std::abs(ellipse_distance(p, c, rx, ry, angle)), 0.0, 1.0);
          },
          [ink](Vec2) { return ink; });
  }

  // First-order distance estimate F / |grad F| for a rotated ellipse.
  static double ellipse_distance(Vec2 p, Vec2 c, double rx, double ry, double angle) {
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double dx = p.x - c.x, dy = p.y - c.y;
    const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
    const double f = (u * u) / (rx * rx) + (v * v) / (ry * ry) - 1.0;
    const double gu = 2.0 * u / (rx * rx), gv = 2.0 * v / (ry * ry);
    const double g = std::hypot(gu, gv);
    return g > 1e-9 ? f / g : -std::min(rx, ry);
  }

private:
  template <class Coverage, class Ink>
  void stamp(Vec2 lo, Vec2 hi, Coverage&& coverage, Ink&& ink) {
    const int x0 = std::max(0, static_cast<int>(std::floor(lo.x)) - 1);
    const int y0 = std::max(0, static_cast<int>(std::floor(lo.y)) - 1);
    const int x1 = std::min(img_.width - 1, static_cast<int>(std::ceil(hi.x)) + 1);
    const int y1 = std::min(img_.height - 1, static_cast<int>(std::ceil(hi.y)) + 1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const Vec2 p{x + 0.5, y + 0.5};
        const double c = coverage(p);
        if (c <= 0.0) continue;
        float& px = img_.at(x, y);
        px = static_cast<float>(px * (1.0 - c) + ink(p) * c);
        touched_.at(x, y) = 1;
      }
  }

  Image& img_;
  Mask& touched_;
};

inline double named(const std::vector<double>& values, const std::vector<ParamSpec>& specs, std::string_view name) {
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (specs[i].name == name) return values[i];
  throw ValidationError("renderer needs parameter '" + std::string(name) + "'");
}

inline double named_global(const Recipe& r, const FaceSchema& s, std::string_view name) {
  for (std::size_t i = 0; i < s.global_params.size(); ++i)
    if (s.global_params[i] == name) return r.globals[i];
  throw ValidationError("renderer needs global parameter '" + std::string(name) + "'");
}

// Deterministic per-pixel noise in [-1, 1].
inline double hash_noise(std::uint64_t seed, int x, int y) {
  const std::uint64_t h = mix_seed(seed, (static_cast<std::uint64_t>(y) << 32) | static_cast<std::uint32_t>(x));
  return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
}

inline void draw_face(Canvas& cv, Vec2 o, const Recipe& r, const FaceSchema& s) {
  const double face_w = named_global(r, s, "face_width");
  const double jaw_w = named_global(r, s, "jaw_width");
  const double chin = named_global(r, s, "chin_length");
  const Vec2 c = o + Vec2{64.0, 64.0};
  const double rx_top = 40.0 + 4.0 * face_w;
  const double ry_top = 43.0;
  const double ry_bot = 50.0 + 4.0 * chin;
  const double rx_jaw = rx_top * (0.55 + 0.12 * jaw_w);
  auto implicit = [=](Vec2 p) {
    const double dx = p.x - c.x, dy = p.y - c.y;
    if (dy < 0.0) return (dx * dx) / (rx_top * rx_top) + (dy * dy) / (ry_top * ry_top) - 1.0;
    const double t = std::min(dy / ry_bot, 1.0);
    const double rx = rx_top + (rx_jaw - rx_top) * t;
    return (dx * dx) / (rx * rx) + (dy * dy) / (ry_bot * ry_bot) - 1.0;
  };
  auto distance = [=](Vec2 p) {
    const double h = 0.25;
    const double f = implicit(p);
    const double gx = (implicit(p + Vec2{h, 0}) - implicit(p - Vec2{h, 0})) / (2 * h);
    const double gy = (implicit(p + Vec2{0, h}) - implicit(p - Vec2{0, h})) / (2 * h);
    const double g = std::hypot(gx, gy);
    return g > 1e-9 ? f / g : -10.0;
  };
  auto shade = [=](Vec2 p) {
    const double u = (p.x - c.x) / rx_top, v = (p.y - c.y) / ry_bot;
    return 0.58 + 0.2 * std::max(0.0, 1.0 - (u * u + v * v));
  };
  const Vec2 lo = c - Vec2{rx_top + 2, ry_top + 2}, hi = c + Vec2{rx_top + 2, ry_bot + 2};
  cv.fill(lo, hi, distance, shade);
}

inline void draw_face_outline(Canvas& cv, Vec2 o, const Recipe& r, const FaceSchema& s) {
  // Traced separately so the outline does not count towards the fill mask.
  const double face_w = named_global(r, s, "face_width");
  const double jaw_w = named_global(r, s, "jaw_width");
  const double chin = named_global(r, s, "chin_length");
  const Vec2 c = o + Vec2{64.0, 64.0};
  const double rx_top = 40.0 + 4.0 * face_w;
  const double ry_top = 43.0;
  const double ry_bot = 50.0 + 4.0 * chin;
  const double rx_jaw = rx_top * (0.55 + 0.12 * jaw_w);
  Polyline pl;
  constexpr int n = 96;
  for (int i = 0; i <= n; ++i) {
    const double a = 2.0 * std::numbers::pi * i / n;
    const double ux = std::cos(a), uy = std::sin(a);
    if (uy < 0.0) {
      pl.pts.push_back(c + Vec2{rx_top * ux, ry_top * uy});
    } else {
      // Solve along the ray for the lower boundary with the tapered width.
      double lo = 0.0, hi = 2.0 * ry_bot;
      for (int it = 0; it < 40; ++it) {
        const double m = 0.5 * (lo + hi);
        const double dx = m * ux, dy = m * uy;
        const double t = std::min(dy / ry_bot, 1.0);
        const double rx = rx_top + (rx_jaw - rx_top) * t;
        ((dx * dx) / (rx * rx) + (dy * dy) / (ry_bot * ry_bot) < 1.0 ? lo : hi) = m;
      }
      pl.pts.push_back(c + Vec2{lo * ux, lo * uy});
    }
  }
  cv.stroke(pl, 0.6, 0.3);
}

inline void draw_eyes(Canvas& cv, Vec2 o, const Recipe& r, const FaceSchema& s) {
  const auto& rs = s.region(RegionId::Eyes);
  const auto& v = r.continuous[index_of(RegionId::Eyes)];
  const double spacing = named(v, rs.continuous_params, "spacing");
  const double size = named(v, rs.continuous_params, "size");
  const double tilt = named(v, rs.continuous_params, "tilt");
  const double vpos = named(v, rs.continuous_params, "vertical_position");
  const double half = 15.0 + 3.0 * spacing;
  const double rx = 5.5 + 1.5 * size;
  const double ry = 0.55 * rx;
  const double cy = 45.0 + 3.0 * vpos;
  for (int side : {-1, 1}) {
    const Vec2 c = o + Vec2{64.0 + side * half, cy};
    const double angle = side * 0.25 * tilt;
    switch (r.discrete[index_of(RegionId::Eyes)]) {
    case 0: cv.stroke_ellipse(c, rx, ry, angle, 0.65, 0.08); break;
    case 1: cv.fill_ellipse(c, rx, ry, angle, 0.22); break;
    default:
      cv.stroke_ellipse(c, rx, ry, angle, 0.65, 0.08);
      cv.fill_ellipse(c, 0.55 * ry, 0.55 * ry, 0.0, 0.04);
      break;
    }
  }
}

inline void draw_nose(Canvas& cv, Vec2 o, const Recipe& r, const FaceSchema& s) {
  const auto& rs = s.region(RegionId::Nose);
  const auto& v = r.continuous[index_of(RegionId::Nose)];
  const double length = named(v, rs.continuous_params, "length");
  const double width = named(v, rs.continuous_params, "width");
  const double curve = named(v, rs.continuous_params, "tip_curve");
  const double vpos = named(v, rs.continuous_params, "vertical_position");
  const double x = o.x + 64.0;
  const double tip = o.y + 72.0 + 3.0 * vpos;
  const double len = 11.0 + 3.0 * length;
  const double top = tip - len;
  const double hw = 3.0 + 1.5 * width;
  const Polyline base = quad_bezier({x - hw, tip}, {x, tip + 1.0 + 2.5 * curve}, {x + hw, tip});
  switch (r.discrete[index_of(RegionId::Nose)]) {
  case 0:
    cv.stroke(segment({x, top}, {x, tip - 1.0}), 0.6, 0.1);
    cv.stroke(base, 0.6, 0.1);
    break;
  case 1:
    for (int side : {-1, 1})
      cv.stroke(quad_bezier({x + side * 0.8, top}, {x + side * 0.3 * hw, tip - 0.4 * len}, {x + side * hw, tip}), 0.6,
                0.1);
    cv.stroke(base, 0.6, 0.1);
    break;
  default:
    cv.stroke(segment({x, top}, {x, tip - 1.0}), 0.6, 0.1);
    cv.stroke(base, 0.5, 0.2);
    for (int side : {-1, 1}) cv.fill_ellipse({x + side * 0.8 * hw, tip + 0.3}, 1.3 + 0.25 * width, 1.0, 0.0, 0.05);
    break;
  }
}

inline void draw_mouth(Canvas& cv, Vec2 o, const Recipe& r, const FaceSchema& s) {
  const auto& rs = s.region(RegionId::Mouth);
  const auto& v = r.continuous[index_of(RegionId::Mouth)];
  const double width = named(v, rs.continuous_params, "width");
  const double thickness = named(v, rs.continuous_params, "thickness");
  const double curvature = named(v, rs.continuous_params, "curvature");
  const double vpos = named(v, rs.continuous_params, "vertical_position");
  const double x = o.x + 64.0;
  const double cy = o.y + 92.0 + 3.0 * vpos;
  const double hw = 11.0 + 4.0 * width;
  const double th = 2.5 + 1.5 * thickness;
  const double k = 2.5 * curvature;
  auto lip = [&](double dy) { return quad_bezier({x - hw, cy - k + dy}, {x, cy + k + dy}, {x + hw, cy - k + dy}); };
  const Polyline centre = lip(0.0);
  switch (r.discrete[index_of(RegionId::Mouth)]) {
  case 0:
    cv.stroke(centre, 0.7, 0.1);
    cv.stroke(lip(th), 0.5, 0.3);
    break;
  case 1: {
    const Vec2 lo = centre.lo() - Vec2{th + 1, th + 1}, hi = centre.hi() + Vec2{th + 1, th + 1};
    cv.fill(lo, hi, [&](Vec2 p) { return centre.distance(p) - th; }, [](Vec2) { return 0.4; });
    cv.stroke(centre, 0.6, 0.1);
    break;
  }
  default: {
    cv.stroke(lip(-th), 0.6, 0.12);
    cv.stroke(lip(th), 0.6, 0.12);
    const double inner = 0.5 * th;
    const Vec2 lo = centre.lo() - Vec2{inner + 1, inner + 1}, hi = centre.hi() + Vec2{inner + 1, inner + 1};
    cv.fill(lo, hi, [&](Vec2 p) { return centre.distance(p) - inner; }, [](Vec2) { return 0.05; });
    break;
  }
  }
}

inline Rect clamp_into_frame(Rect box, int w, int h) {
  box.width = std::min(box.width, w);
  box.height = std::min(box.height, h);
  box.x = std::clamp(box.x, 0, w - box.width);
  box.y = std::clamp(box.y, 0, h - box.height);
  return box;
}

} // namespace detail

// Padded mask box grown symmetrically to the region's fixed window, then
// shifted to lie inside the frame.
inline Rect crop_box_for(const Mask& mask, RegionId region) {
  const Rect bb = bounding_box(mask);
  Rect padded{bb.x - kCropMargin, bb.y - kCropMargin, bb.width + 2 * kCropMargin, bb.height + 2 * kCropMargin};
  const Rect win = crop_window_size(region);
  const int w = std::max(win.width, padded.width);
  const int h = std::max(win.height, padded.height);
  Rect box{padded.x - (w - padded.width) / 2, padded.y - (h - padded.height) / 2, w, h};
  return detail::clamp_into_frame(box, mask.width, mask.height);
}

inline RenderOutput render(const Recipe& recipe, const ViewParams& view, const FaceSchema& schema) {
  validate_recipe(recipe, schema);
  validate_view(view);
  using detail::Vec2;

  RenderOutput out;
  out.view = view;
  Image img(kFrameSize, kFrameSize);
  for (int y = 0; y < kFrameSize; ++y)
    for (int x = 0; x < kFrameSize; ++x) img.at(x, y) = static_cast<float>(0.14 + 0.08 * (y + 0.5) / kFrameSize);

  const Vec2 origin{view.jitter_x, view.jitter_y};
  out.face_mask = Mask(kFrameSize, kFrameSize);
  {
    detail::Canvas cv(img, out.face_mask);
    detail::draw_face(cv, origin, recipe, schema);
  }
  {
    Mask scratch(kFrameSize, kFrameSize);
    detail::Canvas cv(img, scratch);
    detail::draw_face_outline(cv, origin, recipe, schema);
  }
  for (auto id : kRegions) {
    auto& m = out.masks[index_of(id)] = Mask(kFrameSize, kFrameSize);
    detail::Canvas cv(img, m);
    switch (id) {
    case RegionId::Eyes: detail::draw_eyes(cv, origin, recipe, schema); break;
    case RegionId::Nose: detail::draw_nose(cv, origin, recipe, schema); break;
    case RegionId::Mouth: detail::draw_mouth(cv, origin, recipe, schema); break;
    }
    out.crop_boxes[index_of(id)] = crop_box_for(m, id);
  }

  for (int y = 0; y < kFrameSize; ++y)
    for (int x = 0; x < kFrameSize; ++x) {
      double v = 0.5 + view.contrast * (img.at(x, y) - 0.5) + view.brightness;
      if (view.noise_amplitude > 0.0 && !out.face_mask.at(x, y))
        v += view.noise_amplitude * detail::hash_noise(view.noise_seed, x, y);
      img.at(x, y) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  out.image = std::move(img);
  return out;
}

inline Image crop_region(const Image& frame, const Rect& box, int size = kCropSize) {
  return resample_bilinear(frame, box, size, size);
}

inline Image crop_region(const RenderOutput& out, RegionId region, int size = kCropSize) {
  return crop_region(out.image, out.crop_boxes[index_of(region)], size);
}

// Crop boxes of the zero recipe under the zero view; used at inference time
// when no masks are available.
inline PerRegion<Rect> nominal_crop_boxes(const FaceSchema& schema) {
  return render(zero_recipe(schema), ViewParams{}, schema).crop_boxes;
}

} // namespace f2p
