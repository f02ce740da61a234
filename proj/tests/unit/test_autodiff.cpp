#include <gtest/gtest.h>

#include <chrono>

#include "fpcnet/autodiff.hpp"
#include "fpcnet/verify/gradcheck.hpp"
#include "fpcnet/verify/suites.hpp"

using namespace fpcnet;

TEST(Tape, BackwardVisitsInReverseOrder) {
  Tape<double> t;
  auto a = t.leaf(TensorD(Shape{2}, 1.0), "a");
  auto b = nn::relu(a);
  auto c = nn::sigmoid(b);
  auto d = nn::weighted_sum(c, TensorD(Shape{2}, 1.0));
  t.backward(d);
  const std::vector<std::size_t> expected{d.id, c.id, b.id};
  EXPECT_EQ(t.visit_order(), expected);
}

TEST(Tape, EveryParameterGetsMatchingGradient) {
  Rng rng(1);
  Tape<double> t;
  auto x = t.constant(randn<double>({1, 2, 4, 4}, 0, 1, rng));
  auto w = t.leaf(randn<double>({3, 2, 3, 3}, 0, 1, rng), "w");
  auto b = t.leaf(randn<double>({3}, 0, 1, rng), "b");
  auto y = nn::conv2d(x, w, b, ops::ConvSpec::same(3));
  t.backward(nn::weighted_sum(y, ones<double>(y.shape())));
  ASSERT_TRUE(t.has_grad(w.id));
  ASSERT_TRUE(t.has_grad(b.id));
  EXPECT_EQ(w.grad().shape(), w.shape());
  EXPECT_EQ(b.grad().shape(), b.shape());
  EXPECT_FALSE(t.has_grad(x.id));
}

TEST(Tape, FanOutAccumulates) {
  Tape<double> t;
  auto a = t.leaf(TensorD(Shape{3}, 2.0));
  auto s = nn::add(a, a);
  t.backward(nn::weighted_sum(s, TensorD(Shape{3}, 1.0)));
  for (auto g : a.grad().data()) EXPECT_EQ(g, 2.0);
}

TEST(GradCheck, EveryOpPassesOnOneSeed) {
  const auto results = verify::run_gradient_checks(verify::op_problems(42));
  EXPECT_EQ(results.size(), 14u);
  for (const auto& r : results) EXPECT_TRUE(r.passed) << r.name << ": " << verify::describe(r);
}

TEST(GradCheck, SigmoidSlopeAtZero) {
  Tape<double> t;
  auto x = t.leaf(TensorD(Shape{1}, 0.0));
  t.backward(nn::weighted_sum(nn::sigmoid(x), TensorD(Shape{1}, 1.0)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
  verify::GradProblem p{{TensorD(Shape{1}, 0.0)}, [](Tape<double>&, const std::vector<Var<double>>& v) {
                          return nn::weighted_sum(nn::sigmoid(v[0]), TensorD(Shape{1}, 1.0));
                        }};
  EXPECT_TRUE(verify::gradient_check("sigmoid@0", p).passed);
}

// A ReLU whose backward has the wrong sign must be caught and named.
TEST(GradCheck, MutatedBackwardIsNamed) {
  auto bad_relu = [](Var<double> x) {
    return x.tape->record("relu", ops::relu(x.value()), {x.id}, [id = x.id](Tape<double>& t, const TensorD& g) {
      t.accumulate(id, scale(ops::relu_backward(g, t.value(id)), -1.0));
    });
  };
  Rng rng(5);
  TensorD dir = randn<double>({2, 3, 4, 4}, 0, 1, rng);
  TensorD x = randn<double>({2, 3, 4, 4}, 0, 1, rng);
  for (auto& v : x.data()) v += v < 0 ? -0.01 : 0.01;
  auto problems = verify::op_problems(3);
  problems.push_back({"relu(sign-flipped)", {{x}, [=](Tape<double>&, const std::vector<Var<double>>& v) {
                                               return nn::weighted_sum(bad_relu(v[0]), dir);
                                             }}});
  const auto results = verify::run_gradient_checks(problems);
  EXPECT_EQ(verify::failing_ops(results), "relu(sign-flipped)");
}

TEST(GradCheck, NetworkSingleSeed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto np = verify::network_problem(100);
  const auto r = verify::gradient_check("fpcnet", np.problem, verify::network_check_options(100));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_TRUE(r.passed) << verify::describe(r);
  std::size_t expected = 0;
  for (const auto& t : np.problem.inputs) expected += std::min<std::size_t>(6, t.numel());
  EXPECT_EQ(r.probes, expected);
  EXPECT_EQ(np.names.size(), np.problem.inputs.size());
  RecordProperty("seconds", std::to_string(secs));
}

TEST(GradCheck, ProbesAcrossReluKinkAreResampled) {
  // Entry 0 sits exactly on the kink; the other entries are smooth.
  TensorD x(Shape{4}, std::vector<double>{0.0, 0.5, -0.7, 1.3});
  verify::GradProblem p{{x}, [](Tape<double>&, const std::vector<Var<double>>& v) {
                          return nn::weighted_sum(nn::relu(v[0]), TensorD(Shape{4}, 1.0));
                        }};
  const auto r = verify::gradient_check("relu@0", p);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.probes, 3u);
  EXPECT_TRUE(r.passed);
  verify::GradCheckOptions strict;
  strict.skip_branch_changes = false;
  EXPECT_FALSE(verify::gradient_check("relu@0", p, strict).passed);
}
