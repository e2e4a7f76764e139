#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "f2p/error.hpp"
#include "f2p/image.hpp"
#include "f2p/render.hpp"
#include "f2p/rng.hpp"
#include "f2p/schema.hpp"

namespace f2p {

// ---------------------------------------------------------------------------
// Network description

enum class LayerKind { Conv, Pool, Dense };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int channels = 0; // Conv: output channels
  int kernel = 3;   // Conv
  int stride = 2;   // Conv
  int grid = 1;     // Pool: adaptive average pool to grid x grid
  int units = 0;    // Dense
  bool relu = true;

  static LayerSpec conv(int channels, int kernel = 3, int stride = 2) {
    return {LayerKind::Conv, channels, kernel, stride, 1, 0, true};
  }
  static LayerSpec pool(int grid = 1) { return {LayerKind::Pool, 0, 0, 0, grid, 0, false}; }
  static LayerSpec dense(int units, bool relu = true) { return {LayerKind::Dense, 0, 0, 0, 1, units, relu}; }

  bool operator==(const LayerSpec&) const = default;
};

struct HeadSpec {
  std::string group;
  int continuous = 0;
  int one_hot = 0;
  int width() const { return continuous + one_hot; }
  bool operator==(const HeadSpec&) const = default;
};

struct NetSpec {
  int input_size = 0;
  // Inputs are mapped to (x - input_mean) * input_scale before the trunk.
  double input_mean = 0.5;
  double input_scale = 2.0;
  std::vector<LayerSpec> trunk;
  std::vector<HeadSpec> heads;

  int output_width() const {
    int w = 0;
    for (const auto& h : heads) w += h.width();
    return w;
  }

  // Groups indexed into the output slice: each head contributes its
  // continuous dims followed by its one-hot dims.
  std::vector<TargetGroup> slice_groups() const {
    std::vector<TargetGroup> gs;
    int at = 0;
    for (const auto& h : heads) {
      TargetGroup g{h.group, {}, {}};
      for (int i = 0; i < h.continuous; ++i) g.continuous.push_back(at++);
      for (int i = 0; i < h.one_hot; ++i) g.one_hot.push_back(at++);
      gs.push_back(std::move(g));
    }
    return gs;
  }

  bool operator==(const NetSpec&) const = default;
};

inline json to_json(const NetSpec& s) {
  json trunk = json::array();
  for (const auto& l : s.trunk) {
    switch (l.kind) {
    case LayerKind::Conv:
      trunk.push_back({{"type", "conv"}, {"channels", l.channels}, {"kernel", l.kernel}, {"stride", l.stride}});
      break;
    case LayerKind::Pool: trunk.push_back({{"type", "pool"}, {"grid", l.grid}}); break;
    case LayerKind::Dense: trunk.push_back({{"type", "dense"}, {"units", l.units}, {"relu", l.relu}}); break;
    }
  }
  json heads = json::array();
  for (const auto& h : s.heads)
    heads.push_back({{"group", h.group}, {"continuous", h.continuous}, {"one_hot", h.one_hot}});
  return {{"input_size", s.input_size}, {"input_mean", s.input_mean}, {"input_scale", s.input_scale},
          {"trunk", trunk}, {"heads", heads}};
}

inline NetSpec net_spec_from_json(const json& j) {
  NetSpec s;
  s.input_size = j.at("input_size").get<int>();
  s.input_mean = j.at("input_mean").get<double>();
  s.input_scale = j.at("input_scale").get<double>();
  for (const auto& l : j.at("trunk")) {
    const auto type = l.at("type").get<std::string>();
    if (type == "conv")
      s.trunk.push_back(LayerSpec::conv(l.at("channels").get<int>(), l.at("kernel").get<int>(), l.at("stride").get<int>()));
    else if (type == "pool")
      s.trunk.push_back(LayerSpec::pool(l.at("grid").get<int>()));
    else if (type == "dense")
      s.trunk.push_back(LayerSpec::dense(l.at("units").get<int>(), l.at("relu").get<bool>()));
    else
      throw ValidationError("unknown layer type '" + type + "'");
  }
  for (const auto& h : j.at("heads"))
    s.heads.push_back({h.at("group").get<std::string>(), h.at("continuous").get<int>(), h.at("one_hot").get<int>()});
  return s;
}

// ---------------------------------------------------------------------------
// Network evaluation

template <class T>
class Network {
public:
  struct Shape {
    int h = 0, w = 0, c = 0;
    int size() const { return h * w * c; }
  };

  // Per-call scratch; one per thread.
  struct Workspace {
    std::vector<std::vector<T>> acts;  // output of each trunk layer
    std::vector<T> head_raw;           // pre-tanh head outputs
    std::vector<std::vector<T>> grads; // gradient wrt each trunk layer output
    std::vector<T> grad_features;
  };

  explicit Network(NetSpec spec) : spec_(std::move(spec)) {
    if (spec_.input_size <= 0) throw ValidationError("net input size must be positive");
    if (spec_.heads.empty()) throw ValidationError("net needs at least one head");
    Shape s{spec_.input_size, spec_.input_size, 1};
    std::size_t off = 0;
    bool flat = false;
    for (const auto& l : spec_.trunk) {
      Layer L{l, s, {}, off, 0};
      switch (l.kind) {
      case LayerKind::Conv: {
        if (flat) throw ValidationError("conv layer after dense layer");
        if (l.channels <= 0 || l.kernel <= 0 || l.stride <= 0) throw ValidationError("bad conv layer");
        const int pad = l.kernel / 2;
        L.out = {(s.h + 2 * pad - l.kernel) / l.stride + 1, (s.w + 2 * pad - l.kernel) / l.stride + 1, l.channels};
        if (L.out.h <= 0 || L.out.w <= 0) throw ValidationError("conv layer shrinks input to nothing");
        L.param_count = static_cast<std::size_t>(l.kernel * l.kernel * s.c * l.channels + l.channels);
        break;
      }
      case LayerKind::Pool:
        if (flat) throw ValidationError("pool layer after dense layer");
        if (l.grid <= 0 || l.grid > s.h || l.grid > s.w) throw ValidationError("bad pool grid");
        L.out = {l.grid, l.grid, s.c};
        break;
      case LayerKind::Dense:
        if (l.units <= 0) throw ValidationError("bad dense layer");
        L.out = {1, 1, l.units};
        L.param_count = static_cast<std::size_t>(s.size()) * l.units + l.units;
        flat = true;
        break;
      }
      off += L.param_count;
      s = L.out;
      layers_.push_back(L);
    }
    feature_dim_ = s.size();
    trunk_params_ = off;
    for (const auto& h : spec_.heads) {
      if (h.width() <= 0) throw ValidationError("head '" + h.group + "' has zero width");
      heads_.push_back({off, h.width()});
      off += static_cast<std::size_t>(feature_dim_) * h.width() + h.width();
    }
    total_params_ = off;
  }

  const NetSpec& spec() const { return spec_; }
  std::size_t param_count() const { return total_params_; }
  std::size_t trunk_param_count() const { return trunk_params_; }
  int feature_dim() const { return feature_dim_; }
  int input_pixels() const { return spec_.input_size * spec_.input_size; }
  int output_width() const { return spec_.output_width(); }

  Workspace make_workspace() const {
    Workspace ws;
    for (const auto& L : layers_) {
      ws.acts.emplace_back(static_cast<std::size_t>(L.out.size()));
      ws.grads.emplace_back(static_cast<std::size_t>(L.out.size()));
    }
    ws.head_raw.resize(static_cast<std::size_t>(output_width()));
    ws.grad_features.resize(static_cast<std::size_t>(feature_dim_));
    return ws;
  }

  // He-normal weights (std sqrt(2 / fan_in)) for ReLU layers, sqrt(1 / fan_in)
  // for the linear heads; zero biases.
  std::vector<T> init_params(std::uint64_t seed) const {
    std::vector<T> p(total_params_, T(0));
    Rng rng(seed);
    for (const auto& L : layers_) {
      if (L.param_count == 0) continue;
      const std::size_t n_w = L.param_count - static_cast<std::size_t>(L.out.c);
      const double fan_in = L.spec.kind == LayerKind::Conv ? L.spec.kernel * L.spec.kernel * L.in.c : L.in.size();
      const double sd = std::sqrt((L.spec.relu ? 2.0 : 1.0) / fan_in);
      for (std::size_t i = 0; i < n_w; ++i) p[L.offset + i] = static_cast<T>(sd * rng.normal());
    }
    const double sd = std::sqrt(1.0 / feature_dim_);
    for (const auto& H : heads_)
      for (std::size_t i = 0; i < static_cast<std::size_t>(feature_dim_ * H.width); ++i)
        p[H.offset + i] = static_cast<T>(sd * rng.normal());
    return p;
  }

  // Trunk forward; returns the feature vector (last trunk activation, or the
  // flattened input when the trunk is empty).
  std::span<const T> features(std::span<const T> params, std::span<const float> input, Workspace& ws,
                              std::vector<T>* input_copy = nullptr) const {
    check_input(input);
    std::vector<T> local;
    std::vector<T>& x0 = input_copy ? *input_copy : local;
    x0.resize(input.size());
    const T mean = static_cast<T>(spec_.input_mean), scale = static_cast<T>(spec_.input_scale);
    for (std::size_t i = 0; i < input.size(); ++i) x0[i] = (static_cast<T>(input[i]) - mean) * scale;
    const T* x = x0.data();
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const Layer& L = layers_[li];
      T* y = ws.acts[li].data();
      const T* w = params.data() + L.offset;
      switch (L.spec.kind) {
      case LayerKind::Conv: conv_forward(L, w, x, y); break;
      case LayerKind::Pool: pool_forward(L, x, y); break;
      case LayerKind::Dense: dense_forward(L.in.size(), L.out.c, w, x, y, L.spec.relu); break;
      }
      x = y;
    }
    if (layers_.empty()) {
      ws.acts.assign(1, x0);
      return ws.acts[0];
    }
    return ws.acts.back();
  }

  // Heads on a precomputed feature vector. Continuous outputs pass through
  // tanh; one-hot outputs are raw logits.
  void heads_forward(std::span<const T> params, std::span<const T> feats, Workspace& ws, std::span<T> out) const {
    std::size_t at = 0;
    for (std::size_t h = 0; h < heads_.size(); ++h) {
      const Head& H = heads_[h];
      dense_forward(feature_dim_, H.width, params.data() + H.offset, feats.data(), ws.head_raw.data() + at, false);
      for (int k = 0; k < H.width; ++k, ++at)
        out[at] = k < spec_.heads[h].continuous ? std::tanh(ws.head_raw[at]) : ws.head_raw[at];
    }
  }

  void forward(std::span<const T> params, std::span<const float> input, Workspace& ws, std::span<T> out) const {
    const auto f = features(params, input, ws);
    heads_forward(params, f, ws, out);
  }

  // Head gradient given dL/d(out) where `out` is what heads_forward produced.
  // Accumulates into grad (same layout as params) and writes dL/d(features)
  // into ws.grad_features.
  void heads_backward(std::span<const T> params, std::span<const T> feats, std::span<const T> out,
                      std::span<const T> grad_out, Workspace& ws, std::span<T> grad) const {
    std::fill(ws.grad_features.begin(), ws.grad_features.end(), T(0));
    std::size_t at = 0;
    std::vector<T> delta;
    for (std::size_t h = 0; h < heads_.size(); ++h) {
      const Head& H = heads_[h];
      delta.resize(static_cast<std::size_t>(H.width));
      for (int k = 0; k < H.width; ++k) {
        const std::size_t i = at + static_cast<std::size_t>(k);
        delta[static_cast<std::size_t>(k)] =
            k < spec_.heads[h].continuous ? grad_out[i] * (T(1) - out[i] * out[i]) : grad_out[i];
      }
      dense_backward(feature_dim_, H.width, params.data() + H.offset, feats.data(), delta.data(),
                     grad.data() + H.offset, ws.grad_features.data());
      at += static_cast<std::size_t>(H.width);
    }
  }

  // Full backward through the trunk. `input` must be the T-converted input
  // used for the forward pass that filled ws.
  void trunk_backward(std::span<const T> params, const std::vector<T>& input, Workspace& ws,
                      std::span<T> grad) const {
    if (layers_.empty()) return;
    std::copy(ws.grad_features.begin(), ws.grad_features.end(), ws.grads.back().begin());
    for (std::size_t li = layers_.size(); li-- > 0;) {
      const Layer& L = layers_[li];
      const T* x = li == 0 ? input.data() : ws.acts[li - 1].data();
      T* gx = li == 0 ? nullptr : ws.grads[li - 1].data();
      T* gy = ws.grads[li].data();
      const T* y = ws.acts[li].data();
      if (L.spec.relu)
        for (int i = 0; i < L.out.size(); ++i)
          if (y[i] <= T(0)) gy[i] = T(0);
      if (gx) std::fill(gx, gx + L.in.size(), T(0));
      const T* w = params.data() + L.offset;
      T* gw = grad.data() + L.offset;
      switch (L.spec.kind) {
      case LayerKind::Conv: conv_backward(L, w, x, gy, gw, gx); break;
      case LayerKind::Pool:
        if (gx) pool_backward(L, gy, gx);
        break;
      case LayerKind::Dense: dense_backward(L.in.size(), L.out.c, w, x, gy, gw, gx); break;
      }
    }
  }

  // Bitmask of every ReLU unit's state; used to detect kinks in gradient checks.
  std::vector<bool> relu_pattern(const Workspace& ws) const {
    std::vector<bool> bits;
    for (std::size_t li = 0; li < layers_.size(); ++li)
      if (layers_[li].spec.relu)
        for (T v : ws.acts[li]) bits.push_back(v > T(0));
    return bits;
  }

private:
  struct Layer {
    LayerSpec spec;
    Shape in, out;
    std::size_t offset = 0;
    std::size_t param_count = 0;
  };
  struct Head {
    std::size_t offset = 0;
    int width = 0;
  };

  void check_input(std::span<const float> input) const {
    if (static_cast<int>(input.size()) != input_pixels())
      throw ValidationError("input has " + std::to_string(input.size()) + " pixels, model expects " +
                            std::to_string(spec_.input_size) + "x" + std::to_string(spec_.input_size));
  }

  // HWC tensors; conv weights [ky][kx][ic][oc] followed by bias[oc].
  static void conv_forward(const Layer& L, const T* w, const T* x, T* y) {
    const int k = L.spec.kernel, s = L.spec.stride, pad = k / 2;
    const int C = L.in.c, OC = L.out.c;
    const T* bias = w + k * k * C * OC;
    for (int oy = 0; oy < L.out.h; ++oy)
      for (int ox = 0; ox < L.out.w; ++ox) {
        T* o = y + (oy * L.out.w + ox) * OC;
        for (int oc = 0; oc < OC; ++oc) o[oc] = bias[oc];
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * s - pad + ky;
          if (iy < 0 || iy >= L.in.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * s - pad + kx;
            if (ix < 0 || ix >= L.in.w) continue;
            const T* ip = x + (iy * L.in.w + ix) * C;
            const T* wp = w + (ky * k + kx) * C * OC;
            for (int ic = 0; ic < C; ++ic) {
              const T v = ip[ic];
              const T* wr = wp + ic * OC;
              for (int oc = 0; oc < OC; ++oc) o[oc] += v * wr[oc];
            }
          }
        }
        if (L.spec.relu)
          for (int oc = 0; oc < OC; ++oc) o[oc] = std::max(o[oc], T(0));
      }
  }

  static void conv_backward(const Layer& L, const T* w, const T* x, const T* gy, T* gw, T* gx) {
    const int k = L.spec.kernel, s = L.spec.stride, pad = k / 2;
    const int C = L.in.c, OC = L.out.c;
    T* gbias = gw + k * k * C * OC;
    for (int oy = 0; oy < L.out.h; ++oy)
      for (int ox = 0; ox < L.out.w; ++ox) {
        const T* d = gy + (oy * L.out.w + ox) * OC;
        bool any = false;
        for (int oc = 0; oc < OC; ++oc) {
          gbias[oc] += d[oc];
          any |= d[oc] != T(0);
        }
        if (!any) continue;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * s - pad + ky;
          if (iy < 0 || iy >= L.in.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * s - pad + kx;
            if (ix < 0 || ix >= L.in.w) continue;
            const T* ip = x + (iy * L.in.w + ix) * C;
            const T* wp = w + (ky * k + kx) * C * OC;
            T* gwp = gw + (ky * k + kx) * C * OC;
            T* gip = gx ? gx + (iy * L.in.w + ix) * C : nullptr;
            for (int ic = 0; ic < C; ++ic) {
              const T v = ip[ic];
              T* gwr = gwp + ic * OC;
              for (int oc = 0; oc < OC; ++oc) gwr[oc] += v * d[oc];
              if (gip) {
                const T* wr = wp + ic * OC;
                T acc = T(0);
                for (int oc = 0; oc < OC; ++oc) acc += wr[oc] * d[oc];
                gip[ic] += acc;
              }
            }
          }
        }
      }
  }

  static std::pair<int, int> pool_bin(int i, int n, int g) { return {i * n / g, ((i + 1) * n + g - 1) / g}; }

  static void pool_forward(const Layer& L, const T* x, T* y) {
    const int g = L.spec.grid, C = L.in.c;
    for (int by = 0; by < g; ++by)
      for (int bx = 0; bx < g; ++bx) {
        const auto [y0, y1] = pool_bin(by, L.in.h, g);
        const auto [x0, x1] = pool_bin(bx, L.in.w, g);
        T* o = y + (by * g + bx) * C;
        std::fill(o, o + C, T(0));
        for (int iy = y0; iy < y1; ++iy)
          for (int ix = x0; ix < x1; ++ix) {
            const T* ip = x + (iy * L.in.w + ix) * C;
            for (int c = 0; c < C; ++c) o[c] += ip[c];
          }
        const T inv = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
        for (int c = 0; c < C; ++c) o[c] *= inv;
      }
  }

  static void pool_backward(const Layer& L, const T* gy, T* gx) {
    const int g = L.spec.grid, C = L.in.c;
    for (int by = 0; by < g; ++by)
      for (int bx = 0; bx < g; ++bx) {
        const auto [y0, y1] = pool_bin(by, L.in.h, g);
        const auto [x0, x1] = pool_bin(bx, L.in.w, g);
        const T* d = gy + (by * g + bx) * C;
        const T inv = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
        for (int iy = y0; iy < y1; ++iy)
          for (int ix = x0; ix < x1; ++ix) {
            T* gp = gx + (iy * L.in.w + ix) * C;
            for (int c = 0; c < C; ++c) gp[c] += d[c] * inv;
          }
      }
  }

  // Row-major weights [out][in] followed by bias[out].
  static void dense_forward(int n_in, int n_out, const T* w, const T* x, T* y, bool relu) {
    const T* bias = w + static_cast<std::size_t>(n_in) * n_out;
    for (int j = 0; j < n_out; ++j) {
      const T* row = w + static_cast<std::size_t>(j) * n_in;
      T acc = bias[j];
      for (int i = 0; i < n_in; ++i) acc += row[i] * x[i];
      y[j] = relu ? std::max(acc, T(0)) : acc;
    }
  }

  static void dense_backward(int n_in, int n_out, const T* w, const T* x, const T* d, T* gw, T* gx) {
    T* gbias = gw + static_cast<std::size_t>(n_in) * n_out;
    for (int j = 0; j < n_out; ++j) {
      const T dj = d[j];
      gbias[j] += dj;
      if (dj == T(0)) continue;
      const T* row = w + static_cast<std::size_t>(j) * n_in;
      T* grow = gw + static_cast<std::size_t>(j) * n_in;
      for (int i = 0; i < n_in; ++i) grow[i] += dj * x[i];
      if (gx)
        for (int i = 0; i < n_in; ++i) gx[i] += dj * row[i];
    }
  }

  NetSpec spec_;
  std::vector<Layer> layers_;
  std::vector<Head> heads_;
  int feature_dim_ = 0;
  std::size_t trunk_params_ = 0;
  std::size_t total_params_ = 0;
};

// ---------------------------------------------------------------------------
// Multi-part loss: sum_i v_i R_i + sum_i w_i C_i

enum class RegressionNorm { L1, L2 };

struct LossSpec {
  RegressionNorm norm = RegressionNorm::L1;
  std::map<std::string, double> regression_weights;     // v_i; missing groups weigh 1
  std::map<std::string, double> classification_weights; // w_i; missing groups weigh 1

  double v(const std::string& g) const {
    auto it = regression_weights.find(g);
    return it == regression_weights.end() ? 1.0 : it->second;
  }
  double w(const std::string& g) const {
    auto it = classification_weights.find(g);
    return it == classification_weights.end() ? 1.0 : it->second;
  }

  void validate() const {
    for (const auto* m : {&regression_weights, &classification_weights})
      for (const auto& [g, x] : *m)
        if (!std::isfinite(x) || x < 0.0) throw ValidationError("loss weight for '" + g + "' must be finite and >= 0");
  }
};

inline json to_json(const LossSpec& s) {
  return {{"norm", s.norm == RegressionNorm::L1 ? "L1" : "L2"},
          {"regression_weights", s.regression_weights},
          {"classification_weights", s.classification_weights}};
}

inline LossSpec loss_spec_from_json(const json& j) {
  LossSpec s;
  const auto norm = j.value("norm", std::string("L1"));
  if (norm != "L1" && norm != "L2") throw ValidationError("loss norm must be L1 or L2");
  s.norm = norm == "L1" ? RegressionNorm::L1 : RegressionNorm::L2;
  s.regression_weights = j.value("regression_weights", std::map<std::string, double>{});
  s.classification_weights = j.value("classification_weights", std::map<std::string, double>{});
  s.validate();
  return s;
}

struct GroupLoss {
  std::string group;
  double regression = 0.0;
  double classification = 0.0;
};

struct LossResult {
  double total = 0.0;
  std::vector<GroupLoss> parts;
};

namespace detail {

template <class T>
void softmax(const T* z, int n, T* p) {
  T m = z[0];
  for (int i = 1; i < n; ++i) m = std::max(m, z[i]);
  T s = T(0);
  for (int i = 0; i < n; ++i) s += (p[i] = std::exp(z[i] - m));
  for (int i = 0; i < n; ++i) p[i] /= s;
}

template <class T>
T log_sum_exp(const T* z, int n) {
  T m = z[0];
  for (int i = 1; i < n; ++i) m = std::max(m, z[i]);
  T s = T(0);
  for (int i = 0; i < n; ++i) s += std::exp(z[i] - m);
  return m + std::log(s);
}

} // namespace detail

// `pred` holds tanh'd continuous outputs and raw one-hot logits; `target`
// holds continuous targets and one-hot (or soft) class targets. When `grad`
// is non-null it receives dL/dpred.
template <class T>
LossResult multipart_loss(std::span<const T> pred, std::span<const T> target, const std::vector<TargetGroup>& groups,
                          const LossSpec& spec, std::span<T> grad = {}) {
  if (pred.size() != target.size()) throw ValidationError("prediction and target widths differ");
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
  LossResult res;
  std::vector<T> prob;
  for (const auto& g : groups) {
    GroupLoss part{g.name, 0.0, 0.0};
    for (int i : g.continuous)
      if (i < 0 || static_cast<std::size_t>(i) >= pred.size()) throw ValidationError("group " + g.name + " out of range");
    for (int i : g.one_hot)
      if (i < 0 || static_cast<std::size_t>(i) >= pred.size()) throw ValidationError("group " + g.name + " out of range");

    if (!g.continuous.empty()) {
      const double n = static_cast<double>(g.continuous.size());
      const double v = spec.v(g.name);
      double r = 0.0;
      for (int i : g.continuous) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
        r += spec.norm == RegressionNorm::L1 ? std::abs(d) : d * d;
        if (!grad.empty()) {
          const double gd = spec.norm == RegressionNorm::L1 ? (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) : 2.0 * d;
          grad[i] = static_cast<T>(v * gd / n);
        }
      }
      part.regression = r / n;
    }
    if (!g.one_hot.empty()) {
      const int k = static_cast<int>(g.one_hot.size());
      std::vector<T> z(static_cast<std::size_t>(k));
      for (int j = 0; j < k; ++j) z[j] = pred[g.one_hot[j]];
      const T lse = detail::log_sum_exp(z.data(), k);
      double c = 0.0, tsum = 0.0;
      for (int j = 0; j < k; ++j) {
        const double t = static_cast<double>(target[g.one_hot[j]]);
        c -= t * (static_cast<double>(z[j]) - static_cast<double>(lse));
        tsum += t;
      }
      part.classification = c;
      if (!grad.empty()) {
        prob.resize(static_cast<std::size_t>(k));
        detail::softmax(z.data(), k, prob.data());
        const double w = spec.w(g.name);
        for (int j = 0; j < k; ++j)
          grad[g.one_hot[j]] = static_cast<T>(w * (tsum * static_cast<double>(prob[j]) -
                                                   static_cast<double>(target[g.one_hot[j]])));
      }
    }
    res.total += spec.v(g.name) * part.regression + spec.w(g.name) * part.classification;
    res.parts.push_back(std::move(part));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Predictor models

enum class InputKind { FullFrame, Crop };
enum class TrainingMode { FrozenTrunk, FullTraining };

inline std::string_view mode_name(TrainingMode m) { return m == TrainingMode::FrozenTrunk ? "FrozenTrunk" : "FullTraining"; }
inline std::string_view input_name(InputKind k) { return k == InputKind::FullFrame ? "FullFrame" : "Crop"; }

inline TrainingMode mode_from_name(std::string_view s) {
  if (s == "FrozenTrunk" || s == "frozen") return TrainingMode::FrozenTrunk;
  if (s == "FullTraining" || s == "full") return TrainingMode::FullTraining;
  throw ValidationError("unknown training mode '" + std::string(s) + "'");
}

inline InputKind input_from_name(std::string_view s) {
  if (s == "FullFrame" || s == "full" || s == "frame") return InputKind::FullFrame;
  if (s == "Crop" || s == "crop") return InputKind::Crop;
  throw ValidationError("unknown input kind '" + std::string(s) + "'");
}

// Which target the model predicts (the complete vector, or one region's
// slice) and which image it consumes.
struct ModelScope {
  std::optional<RegionId> region; // empty: complete target
  InputKind input = InputKind::FullFrame;

  bool complete() const { return !region.has_value(); }

  std::string label() const {
    return (complete() ? std::string("complete") : "local-" + region_file_tag(*region)) + "-" +
           (input == InputKind::FullFrame ? "frame" : "crop");
  }

  void validate() const {
    if (complete() && input == InputKind::Crop) throw ValidationError("complete-target models take full frames only");
  }

  bool operator==(const ModelScope&) const = default;

  static ModelScope aggregate() { return {std::nullopt, InputKind::FullFrame}; }
  static ModelScope local(RegionId r, InputKind in = InputKind::Crop) { return {r, in}; }
};

// A local slice covers its region's continuous dims (Global-tagged included)
// and its one-hot slice. The complete scope adds the whole-face globals.
inline std::vector<HeadSpec> scope_heads(const ModelScope& scope, const FaceSchema& schema) {
  std::vector<HeadSpec> heads;
  for (auto id : kRegions) {
    if (scope.region && *scope.region != id) continue;
    const auto& rs = schema.region(id);
    heads.push_back({std::string(region_name(id)), static_cast<int>(rs.continuous_params.size()), rs.discrete_option_count});
  }
  if (scope.complete()) heads.push_back({"Face", static_cast<int>(schema.global_params.size()), 0});
  return heads;
}

// Maps slice position -> index in the full target vector.
inline std::vector<int> scope_target_index(const ModelScope& scope, const FaceSchema& schema) {
  const TargetLayout layout(schema);
  std::vector<int> idx;
  for (auto id : kRegions) {
    if (scope.region && *scope.region != id) continue;
    for (int i = layout.continuous[index_of(id)].begin; i < layout.continuous[index_of(id)].end; ++i) idx.push_back(i);
    for (int i = layout.one_hot[index_of(id)].begin; i < layout.one_hot[index_of(id)].end; ++i) idx.push_back(i);
  }
  if (scope.complete())
    for (int i = layout.globals.begin; i < layout.globals.end; ++i) idx.push_back(i);
  return idx;
}

// Stride-2 3x3 convs, 4x4 average-pooled grid, 64-unit dense trunk, one
// dense head per group.
inline NetSpec default_net_spec(const ModelScope& scope, const FaceSchema& schema) {
  scope.validate();
  NetSpec s;
  s.input_size = scope.input == InputKind::FullFrame ? kFrameSize : kCropSize;
  // Full frames get one more stride-2 conv; a 4x4 pooled grid keeps coarse layout.
  if (scope.input == InputKind::FullFrame)
    s.trunk = {LayerSpec::conv(8), LayerSpec::conv(16), LayerSpec::conv(16), LayerSpec::pool(4), LayerSpec::dense(64)};
  else
    s.trunk = {LayerSpec::conv(8), LayerSpec::conv(16), LayerSpec::pool(4), LayerSpec::dense(64)};
  s.heads = scope_heads(scope, schema);
  return s;
}

struct PredictorModel {
  NetSpec spec;
  std::vector<float> params;
  ModelScope scope;
  TrainingMode mode = TrainingMode::FrozenTrunk;
  std::string schema_fingerprint;
  std::vector<int> target_index;

  Network<float> network() const { return Network<float>(spec); }
  std::vector<TargetGroup> groups() const { return spec.slice_groups(); }
  int slice_width() const { return spec.output_width(); }

  // Raw outputs: tanh'd continuous values and one-hot logits.
  std::vector<float> forward(const Image& img) const {
    if (img.width != spec.input_size || img.height != spec.input_size)
      throw ValidationError("image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                            ", model expects " + std::to_string(spec.input_size) + "x" + std::to_string(spec.input_size));
    const auto net = network();
    auto ws = net.make_workspace();
    std::vector<float> out(static_cast<std::size_t>(net.output_width()));
    net.forward(params, img.pixels, ws, out);
    return out;
  }

  // Outputs in blend space: continuous values as produced, one-hot logits
  // replaced by softmax probabilities.
  std::vector<double> predict(const Image& img) const {
    const auto raw = forward(img);
    std::vector<double> out(raw.begin(), raw.end());
    for (const auto& g : groups()) {
      if (g.one_hot.empty()) continue;
      std::vector<double> z, p(g.one_hot.size());
      for (int i : g.one_hot) z.push_back(out[static_cast<std::size_t>(i)]);
      detail::softmax(z.data(), static_cast<int>(z.size()), p.data());
      for (std::size_t j = 0; j < g.one_hot.size(); ++j) out[static_cast<std::size_t>(g.one_hot[j])] = p[j];
    }
    return out;
  }

  bool operator==(const PredictorModel&) const = default;
};

inline PredictorModel init_model(const NetSpec& spec, std::uint64_t seed, const ModelScope& scope,
                                 const FaceSchema& schema) {
  scope.validate();
  const auto expected = scope_heads(scope, schema);
  if (spec.heads != expected) throw ValidationError("net heads do not match the " + scope.label() + " target slice");
  const int want_input = scope.input == InputKind::FullFrame ? kFrameSize : kCropSize;
  if (spec.input_size != want_input)
    throw ValidationError("scope " + scope.label() + " needs input size " + std::to_string(want_input));
  Network<float> net(spec);
  PredictorModel m;
  m.spec = spec;
  m.params = net.init_params(seed);
  m.scope = scope;
  m.schema_fingerprint = schema_fingerprint(schema);
  m.target_index = scope_target_index(scope, schema);
  return m;
}

inline PredictorModel init_model(const ModelScope& scope, const FaceSchema& schema, std::uint64_t seed) {
  return init_model(default_net_spec(scope, schema), seed, scope, schema);
}

template <class T = double>
std::vector<T> gather(const std::vector<double>& full, const std::vector<int>& index) {
  std::vector<T> out;
  out.reserve(index.size());
  for (int i : index) out.push_back(static_cast<T>(full.at(static_cast<std::size_t>(i))));
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradientCheckOptions {
  int param_samples = 10;
  std::uint64_t seed = 1;
  // Mutation hook applied to the analytic gradient before comparison.
  std::function<void(std::vector<double>&)> corrupt;
};

// Compares analytic parameter gradients of the multi-part loss with central
// differences on a random parameter subset. Parameters whose perturbation
// flips a ReLU unit or the sign of an L1 residual are resampled, since the
// loss is not differentiable across those kinks. Relative error is
// |a - n| / max(|a|, |n|, 1e-3).
inline double backward_check(const NetSpec& spec, const std::vector<double>& params, const Image& image,
                             const std::vector<double>& target, const LossSpec& loss, double epsilon,
                             const GradientCheckOptions& opt = {}) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) throw ValidationError("epsilon must lie in [1e-6, 1e-3]");
  Network<double> net(spec);
  if (params.size() != net.param_count()) throw ValidationError("parameter count does not match net spec");
  const auto groups = spec.slice_groups();
  const auto ws0 = net.make_workspace();
  std::vector<double> out(static_cast<std::size_t>(net.output_width()));
  std::vector<double> gout(out.size());

  auto signature = [&](const std::vector<double>& p) {
    auto ws = ws0;
    net.forward(p, image.pixels, ws, out);
    auto bits = net.relu_pattern(ws);
    for (const auto& g : groups)
      for (int i : g.continuous) bits.push_back(out[static_cast<std::size_t>(i)] > target[static_cast<std::size_t>(i)]);
    return bits;
  };
  auto loss_at = [&](const std::vector<double>& p) {
    auto ws = ws0;
    net.forward(p, image.pixels, ws, out);
    return multipart_loss<double>(out, target, groups, loss).total;
  };

  std::vector<double> grad(params.size(), 0.0);
  {
    auto ws = ws0;
    std::vector<double> input;
    const auto f = net.features(params, image.pixels, ws, &input);
    const std::vector<double> feats(f.begin(), f.end());
    net.heads_forward(params, feats, ws, out);
    multipart_loss<double>(out, target, groups, loss, gout);
    net.heads_backward(params, feats, out, gout, ws, grad);
    net.trunk_backward(params, input, ws, grad);
  }
  if (opt.corrupt) opt.corrupt(grad);

  const auto base_sig = signature(params);
  Rng rng(opt.seed);
  double worst = 0.0;
  int checked = 0;
  for (int attempt = 0; checked < opt.param_samples && attempt < 50 * opt.param_samples; ++attempt) {
    const std::size_t i = rng.below(params.size());
    auto p = params;
    p[i] = params[i] + epsilon;
    if (signature(p) != base_sig) continue;
    const double up = loss_at(p);
    p[i] = params[i] - epsilon;
    if (signature(p) != base_sig) continue;
    const double down = loss_at(p);
    const double numeric = (up - down) / (2.0 * epsilon);
    const double denom = std::max({std::abs(grad[i]), std::abs(numeric), 1e-3});
    worst = std::max(worst, std::abs(grad[i] - numeric) / denom);
    ++checked;
  }
  if (checked == 0) throw Error("gradient check found no kink-free parameters");
  return worst;
}

inline double backward_check(const PredictorModel& model, const Image& image, const std::vector<double>& target_slice,
                             const LossSpec& loss, double epsilon, const GradientCheckOptions& opt = {}) {
  return backward_check(model.spec, std::vector<double>(model.params.begin(), model.params.end()), image, target_slice,
                        loss, epsilon, opt);
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, fingerprint, JSON header, little-endian f32 blob.

inline constexpr char kCheckpointMagic[8] = {'F', '2', 'P', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == EOF) throw ValidationError("truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<U>(v);
}

} // namespace detail

inline json model_header(const PredictorModel& m) {
  json scope = {{"input", input_name(m.scope.input)}};
  scope["region"] = m.scope.region ? json(std::string(region_name(*m.scope.region))) : json(nullptr);
  return {{"net", to_json(m.spec)}, {"scope", scope}, {"mode", mode_name(m.mode)}, {"target_index", m.target_index}};
}

inline void save_checkpoint(const std::filesystem::path& path, const PredictorModel& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint '" + path.string() + "'");
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.schema_fingerprint.size()));
  os.write(m.schema_fingerprint.data(), static_cast<std::streamsize>(m.schema_fingerprint.size()));
  const std::string header = model_header(m).dump();
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::put_le<std::uint64_t>(os, m.params.size());
  for (float f : m.params) detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f));
  if (!os) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

inline PredictorModel load_checkpoint(const std::filesystem::path& path, const FaceSchema& schema) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint '" + path.string() + "'");
  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw ValidationError("'" + path.string() + "' is not a checkpoint");
  if (detail::get_le<std::uint32_t>(is) != kCheckpointVersion) throw ValidationError("unsupported checkpoint version");
  PredictorModel m;
  m.schema_fingerprint.resize(detail::get_le<std::uint32_t>(is));
  is.read(m.schema_fingerprint.data(), static_cast<std::streamsize>(m.schema_fingerprint.size()));
  if (m.schema_fingerprint != schema_fingerprint(schema))
    throw ValidationError("checkpoint '" + path.string() + "' was trained against a different schema");
  std::string header(detail::get_le<std::uint32_t>(is), '\0');
  is.read(header.data(), static_cast<std::streamsize>(header.size()));
  try {
    const json h = json::parse(header);
    m.spec = net_spec_from_json(h.at("net"));
    m.scope.input = input_from_name(h.at("scope").at("input").get<std::string>());
    if (!h.at("scope").at("region").is_null())
      m.scope.region = region_from_name(h.at("scope").at("region").get<std::string>());
    m.mode = mode_from_name(h.at("mode").get<std::string>());
    m.target_index = h.at("target_index").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint header: ") + e.what());
  }
  const auto n = detail::get_le<std::uint64_t>(is);
  if (n != Network<float>(m.spec).param_count()) throw ValidationError("checkpoint parameter count mismatch");
  m.params.resize(n);
  for (auto& f : m.params) f = std::bit_cast<float>(detail::get_le<std::uint32_t>(is));
  return m;
}

} // namespace f2p
