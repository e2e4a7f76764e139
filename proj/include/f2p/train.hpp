#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "f2p/datagen.hpp"
#include "f2p/nets.hpp"
#include "f2p/parallel.hpp"

namespace f2p {

struct TrainConfig {
  int max_epochs = 40;
  int batch_size = 32;
  double learning_rate = 0.02;
  double momentum = 0.9;
  double decay_factor = 0.5;
  int patience = 2;
  int max_halvings = 3; // consecutive halvings without improvement before stopping
  double grad_clip = 5.0;
  std::uint64_t seed = 7;
  TrainingMode mode = TrainingMode::FrozenTrunk;
  bool verbose = false;

  void validate() const {
    if (max_epochs < 1 || batch_size < 1) throw ValidationError("epochs and batch size must be >= 1");
    if (!(learning_rate > 0.0) || !(decay_factor > 0.0 && decay_factor < 1.0))
      throw ValidationError("learning rate must be positive and decay factor in (0, 1)");
    if (patience < 1) throw ValidationError("patience must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0) throw ValidationError("momentum must lie in [0, 1)");
  }
};

inline json to_json(const TrainConfig& c) {
  return {{"max_epochs", c.max_epochs}, {"batch_size", c.batch_size},   {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},     {"decay_factor", c.decay_factor}, {"patience", c.patience},
          {"max_halvings", c.max_halvings}, {"grad_clip", c.grad_clip}, {"seed", c.seed},
          {"mode", mode_name(c.mode)}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.decay_factor = j.value("decay_factor", c.decay_factor);
  c.patience = j.value("patience", c.patience);
  c.max_halvings = j.value("max_halvings", c.max_halvings);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  if (j.contains("mode")) c.mode = mode_from_name(j.at("mode").get<std::string>());
  c.verbose = j.value("verbose", c.verbose);
  c.validate();
  return c;
}

// Images (one input kind) and full target vectors for one split, held in
// memory so several models can train from the same decode.
struct SampleSet {
  int input_size = 0;
  std::vector<float> pixels;
  std::vector<std::vector<double>> targets;
  std::vector<std::string> ids;

  std::size_t size() const { return targets.size(); }
  std::span<const float> input(std::size_t i) const {
    const std::size_t n = static_cast<std::size_t>(input_size) * input_size;
    return {pixels.data() + i * n, n};
  }
  Image image(std::size_t i) const {
    Image img(input_size, input_size);
    const auto in = input(i);
    std::copy(in.begin(), in.end(), img.pixels.begin());
    return img;
  }
};

inline SampleSet load_samples(const DatasetManifest& m, Split split, InputKind input,
                              std::optional<RegionId> crop_region_id = std::nullopt, int workers = 1) {
  if (input == InputKind::Crop && !crop_region_id) throw ValidationError("crop samples need a region");
  const auto recs = m.split(split);
  SampleSet s;
  s.input_size = input == InputKind::FullFrame ? kFrameSize : kCropSize;
  const std::size_t px = static_cast<std::size_t>(s.input_size) * s.input_size;
  s.pixels.resize(recs.size() * px);
  s.targets.resize(recs.size());
  s.ids.resize(recs.size());
  parallel_for(recs.size(), resolve_workers(workers), [&](std::size_t i) {
    const auto& r = *recs[i];
    const Image img = input == InputKind::FullFrame ? m.load_frame(r) : m.load_crop(r, *crop_region_id);
    if (img.width != s.input_size || img.height != s.input_size)
      throw ValidationError("sample " + r.id + ": unexpected image size");
    std::copy(img.pixels.begin(), img.pixels.end(), s.pixels.begin() + static_cast<std::ptrdiff_t>(i * px));
    s.targets[i] = r.target.values;
    s.ids[i] = r.id;
  });
  return s;
}

struct EpochRecord {
  int epoch = 0;
  double learning_rate = 0.0;
  LossResult train;
  LossResult val;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "epoch,train_total,val_total,learning_rate";
    if (!epochs.empty())
      for (const auto& p : epochs.front().train.parts)
        os << ",train_" << p.group << "_reg,train_" << p.group << "_cls,val_" << p.group << "_reg,val_" << p.group
           << "_cls";
    os << '\n';
    for (const auto& e : epochs) {
      os << e.epoch << ',' << e.train.total << ',' << e.val.total << ',' << e.learning_rate;
      for (std::size_t g = 0; g < e.train.parts.size(); ++g)
        os << ',' << e.train.parts[g].regression << ',' << e.train.parts[g].classification << ','
           << e.val.parts[g].regression << ',' << e.val.parts[g].classification;
      os << '\n';
    }
    return os.str();
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write history '" + path.string() + "'");
    os << to_csv();
  }
};

struct TrainResult {
  PredictorModel model;
  TrainHistory history;
};

namespace detail {

inline void accumulate(LossResult& acc, const LossResult& x) {
  if (acc.parts.empty()) acc.parts = x.parts;
  else
    for (std::size_t g = 0; g < x.parts.size(); ++g) {
      acc.parts[g].regression += x.parts[g].regression;
      acc.parts[g].classification += x.parts[g].classification;
    }
  acc.total += x.total;
}

inline LossResult mean_of(LossResult acc, std::size_t n) {
  const double inv = n ? 1.0 / static_cast<double>(n) : 0.0;
  acc.total *= inv;
  for (auto& p : acc.parts) {
    p.regression *= inv;
    p.classification *= inv;
  }
  return acc;
}

inline void check_finite(const LossResult& r, const std::string& where) {
  if (!std::isfinite(r.total)) {
    std::ostringstream os;
    os << "non-finite loss " << where << " (parts:";
    for (const auto& p : r.parts) os << ' ' << p.group << '=' << p.regression << '/' << p.classification;
    os << ')';
    throw TrainingError(os.str());
  }
}

} // namespace detail

// Mean loss of `model` over a sample set.
inline LossResult evaluate_loss(const PredictorModel& model, const SampleSet& set, const LossSpec& loss) {
  const auto net = model.network();
  auto ws = net.make_workspace();
  const auto groups = model.groups();
  std::vector<float> out(static_cast<std::size_t>(net.output_width()));
  LossResult acc;
  for (std::size_t i = 0; i < set.size(); ++i) {
    net.forward(model.params, set.input(i), ws, out);
    const auto t = gather<float>(set.targets[i], model.target_index);
    detail::accumulate(acc, multipart_loss<float>(out, t, groups, loss));
  }
  return detail::mean_of(acc, set.size());
}

// Minibatch SGD with momentum and a plateau schedule: the rate is multiplied
// by decay_factor after `patience` epochs without validation improvement;
// training stops after max_halvings consecutive decays without improvement
// or at max_epochs. The parameters with the best validation loss are kept.
// FrozenTrunk updates head parameters only; trunk features are computed once.
inline TrainResult train(PredictorModel model, const SampleSet& train_set, const SampleSet& val_set,
                         const LossSpec& loss, const TrainConfig& config) {
  config.validate();
  loss.validate();
  if (train_set.size() == 0) throw TrainingError("empty training split");
  if (val_set.size() == 0) throw TrainingError("empty validation split");
  if (train_set.input_size != model.spec.input_size || val_set.input_size != model.spec.input_size)
    throw ValidationError("sample input size does not match model " + model.scope.label());

  model.mode = config.mode;
  const auto net = model.network();
  const auto groups = model.groups();
  const bool frozen = config.mode == TrainingMode::FrozenTrunk;
  const std::size_t first_trainable = frozen ? net.trunk_param_count() : 0;
  const std::size_t n_params = net.param_count();
  const int width = net.output_width();
  const int fdim = net.feature_dim();

  std::vector<std::vector<float>> targets(train_set.size());
  for (std::size_t i = 0; i < train_set.size(); ++i) targets[i] = gather<float>(train_set.targets[i], model.target_index);

  auto ws = net.make_workspace();
  std::vector<float> feats_cache;
  if (frozen) {
    feats_cache.resize(train_set.size() * static_cast<std::size_t>(fdim));
    for (std::size_t i = 0; i < train_set.size(); ++i) {
      const auto f = net.features(model.params, train_set.input(i), ws);
      std::copy(f.begin(), f.end(), feats_cache.begin() + static_cast<std::ptrdiff_t>(i * fdim));
    }
  }

  TrainResult result;
  auto record = [&](int epoch, double lr, const LossResult& tr) {
    EpochRecord e{epoch, lr, tr, evaluate_loss(model, val_set, loss)};
    detail::check_finite(e.val, "on validation at epoch " + std::to_string(epoch));
    if (config.verbose)
      std::clog << model.scope.label() << " [" << mode_name(config.mode) << "] epoch " << epoch << " lr " << lr
                << " train " << tr.total << " val " << e.val.total << std::endl;
    result.history.epochs.push_back(std::move(e));
    return result.history.epochs.back().val.total;
  };

  double lr = config.learning_rate;
  double best_val = record(0, lr, evaluate_loss(model, train_set, loss));
  std::vector<float> best_params = model.params;
  int bad_epochs = 0, halvings_without_gain = 0;

  std::vector<float> grad(n_params), velocity(n_params, 0.0f), out(static_cast<std::size_t>(width)),
      gout(static_cast<std::size_t>(width)), input_copy;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(config.seed, 0x7A11));

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    LossResult epoch_acc;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(config.batch_size));
      std::fill(grad.begin() + static_cast<std::ptrdiff_t>(first_trainable), grad.end(), 0.0f);
      for (std::size_t k = b0; k < b1; ++k) {
        const std::size_t i = order[k];
        std::span<const float> feats;
        if (frozen) {
          feats = {feats_cache.data() + i * static_cast<std::size_t>(fdim), static_cast<std::size_t>(fdim)};
        } else {
          feats = net.features(model.params, train_set.input(i), ws, &input_copy);
        }
        // The heads read features while trunk_backward later reuses ws; copy.
        const std::vector<float> fcopy(feats.begin(), feats.end());
        net.heads_forward(model.params, fcopy, ws, out);
        const auto lr_i = multipart_loss<float>(out, targets[i], groups, loss, gout);
        detail::check_finite(lr_i, "at epoch " + std::to_string(epoch) + " sample " + train_set.ids[i]);
        detail::accumulate(epoch_acc, lr_i);
        net.heads_backward(model.params, fcopy, out, gout, ws, grad);
        if (!frozen) net.trunk_backward(model.params, input_copy, ws, grad);
      }
      const float inv = 1.0f / static_cast<float>(b1 - b0);
      double norm2 = 0.0;
      for (std::size_t p = first_trainable; p < n_params; ++p) {
        grad[p] *= inv;
        norm2 += static_cast<double>(grad[p]) * grad[p];
      }
      const double norm = std::sqrt(norm2);
      if (!std::isfinite(norm)) throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch));
      const float clip = norm > config.grad_clip ? static_cast<float>(config.grad_clip / norm) : 1.0f;
      const float mom = static_cast<float>(config.momentum), rate = static_cast<float>(lr);
      for (std::size_t p = first_trainable; p < n_params; ++p) {
        velocity[p] = mom * velocity[p] + grad[p] * clip;
        model.params[p] -= rate * velocity[p];
      }
    }
    const double val = record(epoch, lr, detail::mean_of(epoch_acc, order.size()));
    if (val < best_val - 1e-7) {
      best_val = val;
      best_params = model.params;
      bad_epochs = 0;
      halvings_without_gain = 0;
    } else if (++bad_epochs >= config.patience) {
      bad_epochs = 0;
      if (++halvings_without_gain > config.max_halvings) break;
      lr *= config.decay_factor;
    }
  }
  model.params = std::move(best_params);
  result.model = std::move(model);
  return result;
}

inline TrainResult train(PredictorModel model, const DatasetManifest& manifest, const LossSpec& loss,
                         const TrainConfig& config) {
  if (manifest.schema_fingerprint != model.schema_fingerprint)
    throw ValidationError("manifest schema does not match model " + model.scope.label());
  const auto region = model.scope.input == InputKind::Crop ? model.scope.region : std::nullopt;
  const auto tr = load_samples(manifest, Split::Train, model.scope.input, region, manifest.config.workers);
  const auto va = load_samples(manifest, Split::Val, model.scope.input, region, manifest.config.workers);
  return train(std::move(model), tr, va, loss, config);
}

} // namespace f2p
