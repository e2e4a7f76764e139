#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "f2p/datagen.hpp"
#include "f2p/train.hpp"
#include "helpers.hpp"

using namespace f2p;

namespace {

SampleSet crop_set(RegionId region, int n, std::uint64_t seed) {
  const auto schema = default_schema();
  Rng rng(seed);
  SampleSet s;
  s.input_size = kCropSize;
  for (int i = 0; i < n; ++i) {
    const auto recipe = sample_recipe(rng, schema);
    const auto out = render(recipe, {}, schema);
    const auto crop = crop_region(out, region);
    s.pixels.insert(s.pixels.end(), crop.pixels.begin(), crop.pixels.end());
    s.targets.push_back(encode_recipe(recipe, schema).values);
    s.ids.push_back("s" + std::to_string(i));
  }
  return s;
}

TrainConfig quick(TrainingMode mode, int epochs = 3) {
  TrainConfig c;
  c.max_epochs = epochs;
  c.batch_size = 8;
  c.mode = mode;
  return c;
}

} // namespace

TEST(Train, FrozenModeLeavesTrunkBitIdentical) {
  const auto schema = default_schema();
  const auto set = crop_set(RegionId::Nose, 24, 1);
  const auto model = init_model(ModelScope::local(RegionId::Nose), schema, 3);
  const auto r = train(model, set, set, {}, quick(TrainingMode::FrozenTrunk));
  const auto trunk = static_cast<std::ptrdiff_t>(model.network().trunk_param_count());
  ASSERT_GT(trunk, 0);
  EXPECT_TRUE(std::equal(model.params.begin(), model.params.begin() + trunk, r.model.params.begin()));
  EXPECT_NE(model.params, r.model.params);
  EXPECT_EQ(r.model.mode, TrainingMode::FrozenTrunk);

  const auto full = train(r.model, set, set, {}, quick(TrainingMode::FullTraining));
  EXPECT_FALSE(std::equal(model.params.begin(), model.params.begin() + trunk, full.model.params.begin()));
}

TEST(Train, OverfitsTenSamples) {
  const auto schema = default_schema();
  const auto set = crop_set(RegionId::Mouth, 10, 2);
  TrainConfig c = quick(TrainingMode::FullTraining, 500);
  c.batch_size = 5;
  c.patience = 50;
  c.max_halvings = 20;
  const auto r = train(init_model(ModelScope::local(RegionId::Mouth), schema, 4), set, set, {}, c);
  const double first = r.history.epochs.front().train.total;
  const double best = evaluate_loss(r.model, set, {}).total;
  EXPECT_LT(best, 0.1 * first) << "epoch0 " << first << " final " << best;
}

TEST(Train, DeterministicForFixedSeed) {
  const auto schema = default_schema();
  const auto set = crop_set(RegionId::Eyes, 16, 5);
  const auto m = init_model(ModelScope::local(RegionId::Eyes), schema, 9);
  const auto a = train(m, set, set, {}, quick(TrainingMode::FullTraining, 2));
  const auto b = train(m, set, set, {}, quick(TrainingMode::FullTraining, 2));
  EXPECT_EQ(a.model.params, b.model.params);
  EXPECT_EQ(a.history.to_csv(), b.history.to_csv());
}

TEST(Train, HistoryCsvLayout) {
  const auto schema = default_schema();
  const auto set = crop_set(RegionId::Nose, 8, 6);
  const auto r = train(init_model(ModelScope::local(RegionId::Nose), schema, 1), set, set, {},
                       quick(TrainingMode::FrozenTrunk, 2));
  const auto csv = r.history.to_csv();
  EXPECT_EQ(csv.rfind("epoch,train_total,val_total,learning_rate", 0), 0u);
  EXPECT_NE(csv.find("Nose"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + static_cast<long>(r.history.epochs.size()));
}

TEST(Train, EmptySplitIsTrainingError) {
  const auto schema = default_schema();
  const auto set = crop_set(RegionId::Nose, 4, 7);
  SampleSet empty;
  empty.input_size = kCropSize;
  const auto m = init_model(ModelScope::local(RegionId::Nose), schema, 1);
  EXPECT_THROW(train(m, empty, set, {}, quick(TrainingMode::FrozenTrunk)), TrainingError);
  EXPECT_THROW(train(m, set, empty, {}, quick(TrainingMode::FrozenTrunk)), TrainingError);
}

TEST(Train, NonFiniteLossIsTrainingError) {
  const auto schema = default_schema();
  auto set = crop_set(RegionId::Nose, 4, 8);
  set.pixels[10] = std::numeric_limits<float>::quiet_NaN();
  const auto m = init_model(ModelScope::local(RegionId::Nose), schema, 1);
  EXPECT_THROW(train(m, set, set, {}, quick(TrainingMode::FullTraining)), TrainingError);
}

TEST(Train, WrongInputSizeRejected) {
  const auto schema = default_schema();
  const auto set = crop_set(RegionId::Nose, 4, 8);
  EXPECT_THROW(train(init_model(ModelScope::aggregate(), schema, 1), set, set, {}, quick(TrainingMode::FrozenTrunk)),
               ValidationError);
}

TEST(TrainConfigJson, RoundTripAndValidation) {
  TrainConfig c;
  c.max_epochs = 11;
  c.mode = TrainingMode::FullTraining;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(back.max_epochs, 11);
  EXPECT_EQ(back.mode, TrainingMode::FullTraining);
  EXPECT_THROW(train_config_from_json(json{{"learning_rate", -1.0}}), ValidationError);
  EXPECT_THROW(train_config_from_json(json{{"batch_size", 0}}), ValidationError);
}
