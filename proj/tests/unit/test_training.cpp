#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "fpcnet/training.hpp"
#include "fpcnet/verify/fixtures.hpp"

using namespace fpcnet;

namespace {

ParamStore<double> scalar(double v) {
  ParamStore<double> p;
  p.add("w", TensorD(Shape{1}, v));
  return p;
}

}  // namespace

TEST(Sgd, ZeroGradientIsFixedPoint) {
  Rng rng(1);
  ParamStore<double> p;
  p.add("a", randn<double>({3, 4}, 0, 1, rng));
  p.add("b", randn<double>({5}, 0, 1, rng));
  const auto before = p;
  auto st = make_optimizer(p, SgdConfig{0.9, 0.0}, 0.1);
  ParamStore<double> g;
  for (const auto& [n, t] : p) g.add(n, zeros_like(t));
  for (int i = 0; i < 25; ++i) sgd_step(p, g, st);
  EXPECT_EQ(p.get("a"), before.get("a"));
  EXPECT_EQ(p.get("b"), before.get("b"));
  for (const auto& [n, v] : st.velocity) EXPECT_EQ(v.shape(), p.get(n).shape());
}

TEST(Sgd, TwoStepRecurrence) {
  auto p = scalar(1.0);
  auto st = make_optimizer(p, SgdConfig{0.9, 0.0}, 0.1);
  const auto g = scalar(1.0);
  sgd_step(p, g, st);
  sgd_step(p, g, st);
  EXPECT_NEAR(p.get("w")[0], 0.71, 1e-12);
  EXPECT_NEAR(st.velocity.get("w")[0], 1.9, 1e-12);
}

TEST(Sgd, WeightDecayOnly) {
  auto p = scalar(1.0);
  auto st = make_optimizer(p, SgdConfig{}, 0.01);
  sgd_step(p, scalar(0.0), st);
  EXPECT_NEAR(p.get("w")[0], 0.999999, 1e-15);
}

TEST(Sgd, BadGradientsLeaveParametersUntouched) {
  auto p = scalar(1.0);
  p.add("v", TensorD(Shape{2}, 3.0));
  auto st = make_optimizer(p, SgdConfig{}, 0.01);
  ParamStore<double> g = scalar(0.5);
  g.add("v", TensorD(Shape{2}, std::vector<double>{1.0, std::nan("")}));
  EXPECT_THROW(sgd_step(p, g, st), NumericalError);
  EXPECT_EQ(p.get("w")[0], 1.0);
  ParamStore<double> wrong = scalar(0.5);
  wrong.add("v", TensorD(Shape{3}));
  EXPECT_THROW(sgd_step(p, wrong, st), ShapeError);
  EXPECT_THROW(sgd_step(p, scalar(0.5), st), Error);
}

TEST(Schedule, PiecewiseRates) {
  const Schedule s;
  for (std::size_t e = 0; e < 120; ++e) {
    const double want = e < 50 ? 0.01 : e < 80 ? 0.001 : e < 110 ? 0.0001 : 0.00001;
    ASSERT_DOUBLE_EQ(lr_at(e, s), want) << "epoch " << e;
  }
  EXPECT_EQ(lr_at(0, s), 0.01);
  EXPECT_DOUBLE_EQ(lr_at(80, s), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(119, s), 1e-5);
  EXPECT_THROW(lr_at(120, s), UsageError);
  Schedule bad;
  bad.milestones = {80, 50};
  EXPECT_THROW(bad.validate(), UsageError);
}

TEST(Train, LoggedRatesFollowSchedule) {
  auto data = verify::bar_fixture(16);
  TrainOptions o = verify::overfit_options(0.01, 6);
  o.schedule.milestones = {2, 4};
  o.batch_size = 1;
  Rng rng(3);
  std::ostringstream log;
  const auto res = train<float>(NetworkConfig::tiny(), o, data, rng, &log);
  ASSERT_EQ(res.epochs.size(), 6u);
  EXPECT_EQ(res.step_losses.size(), 12u);
  for (const auto& e : res.epochs) EXPECT_DOUBLE_EQ(e.lr, lr_at(e.epoch, o.schedule));
  std::istringstream in(log.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto f = util::split(line, '\t');
    ASSERT_EQ(f.size(), 3u) << line;
    EXPECT_EQ(std::stoul(f[0]), n);
    EXPECT_DOUBLE_EQ(std::stod(f[2]), lr_at(n, o.schedule));
    ++n;
  }
  EXPECT_EQ(n, 6u);
}

TEST(Train, OverfitsTwoImageFixture) {
  const auto cfg = NetworkConfig::tiny();
  const auto data = verify::bar_fixture();
  Rng rng(7);
  const auto res = train<float>(cfg, verify::overfit_options(), data, rng);
  EXPECT_EQ(res.step_losses.size(), 200u);
  const auto rep = verify::training_f1(cfg, res.checkpoint.params, data);
  EXPECT_GE(rep.f1, 0.99) << "P " << rep.precision << " R " << rep.recall;

  Rng again(7);
  const auto res2 = train<float>(cfg, verify::overfit_options(), data, again);
  EXPECT_EQ(res.step_losses, res2.step_losses);
  EXPECT_EQ(res.checkpoint.params.get("head.weight"), res2.checkpoint.params.get("head.weight"));
}

TEST(Train, EarlyLossDecreases) {
  Rng rng(7);
  const auto res = train<float>(NetworkConfig::tiny(), verify::overfit_options(0.01, 11), verify::bar_fixture(), rng);
  int rises = 0;
  for (std::size_t i = 1; i < 11; ++i) rises += res.step_losses[i] >= res.step_losses[i - 1];
  EXPECT_LE(rises, 1);
}

TEST(Train, CheckpointWrittenAtCadenceAndEnd) {
  const auto dir = std::filesystem::temp_directory_path() / "fpcnet_train_ckpt";
  std::filesystem::create_directories(dir);
  TrainOptions o = verify::overfit_options(0.01, 3);
  o.checkpoint_every = 1;
  o.checkpoint_path = dir / "m.fpck";
  Rng rng(2);
  const auto res = train<float>(NetworkConfig::tiny(), o, verify::bar_fixture(16), rng);
  const auto back = load_checkpoint<float>(o.checkpoint_path);
  EXPECT_EQ(back.params.get("head.weight"), res.checkpoint.params.get("head.weight"));
  EXPECT_EQ(back.config, res.checkpoint.config);
  std::filesystem::remove_all(dir);
}

TEST(Train, NonFiniteLossNamesBatch) {
  auto data = verify::bar_fixture(16);
  data[0].image.data()[5] = std::numeric_limits<float>::quiet_NaN();
  Rng rng(1);
  try {
    train<float>(NetworkConfig::tiny(), verify::overfit_options(0.01, 2), data, rng);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("epoch 0"), std::string::npos) << m;
    EXPECT_NE(m.find("bar"), std::string::npos) << m;
  }
}

TEST(Train, EmptySetRejected) {
  Rng rng(1);
  EXPECT_THROW(train<float>(NetworkConfig::tiny(), TrainOptions{}, {}, rng), DataError);
}
