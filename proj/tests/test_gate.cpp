#include "cct/gate.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "fd_check.hpp"

using namespace cct;
using cct_test::max_grad_rel_err;

namespace {

GateContext train_ctx(double alpha = 0.0, Rng* rng = nullptr) {
  GateContext ctx;
  ctx.mode = GateMode::Train;
  ctx.alpha = alpha;
  ctx.rng = rng;
  return ctx;
}

GateContext infer_ctx() {
  GateContext ctx;
  ctx.mode = GateMode::Infer;
  return ctx;
}

// d=1 identity net: logit(x) = relu(x) - relu(-x) = x.
ControlNetwork identity_net(Tape& tape) {
  ControlNetwork net;
  net.w1 = tape.parameter({1, 2}, {1.0, -1.0});
  net.b = tape.parameter({2}, {0.0, 0.0});
  net.w2 = tape.parameter({2, 1}, {1.0, -1.0});
  return net;
}

}  // namespace

TEST(GateForward, ZeroInitializedNetOpensAtHalf) {
  Tape tape;
  Rng rng(1);
  ControlNetwork net = ControlNetwork::create(tape, 4, 8, 1, rng);
  Tensor x = randn({5, 4}, rng, 1.0);
  Tensor g = gate_forward(net, x, train_ctx());
  ASSERT_EQ(g.shape(), (Shape{5, 1}));
  for (int i = 0; i < g.numel(); ++i) EXPECT_DOUBLE_EQ(g.at(i), 0.5);
}

TEST(GateForward, ZeroInitializedNetIsActiveAtInference) {
  // Tie at exactly 0.5 counts as active.
  Tape tape;
  Rng rng(2);
  ControlNetwork net = ControlNetwork::create(tape, 4, 8, 3, rng);
  Tensor x = randn({5, 4}, rng, 1.0);
  Tensor g = gate_forward(net, x, infer_ctx());
  for (int i = 0; i < g.numel(); ++i) EXPECT_DOUBLE_EQ(g.at(i), 1.0);
}

TEST(GateForward, FixedLogitsThresholdAtInference) {
  Tape tape;
  ControlNetwork net = identity_net(tape);
  Tensor x = Tensor::from_data({2, 1}, {-3.0, 3.0});
  Tensor g = gate_forward(net, x, infer_ctx());
  EXPECT_DOUBLE_EQ(g.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(g.at(1, 0), 1.0);
}

TEST(GateForward, InferenceRecordsNothingOnTheTape) {
  Tape tape;
  Rng rng(3);
  ControlNetwork net = ControlNetwork::create(tape, 4, 8, 1, rng);
  Tensor x = randn({5, 4}, rng, 1.0);
  gate_forward(net, x, infer_ctx());
  EXPECT_EQ(tape.num_ops(), 0u);
}

TEST(GateForward, NegativeAlphaThrows) {
  Tape tape;
  Rng rng(4);
  ControlNetwork net = ControlNetwork::create(tape, 2, 4, 1, rng);
  Tensor x = Tensor::zeros({1, 2});
  EXPECT_THROW(gate_forward(net, x, train_ctx(-0.1)), ContractError);
}

TEST(GateForward, NoisyGateAtZeroLogitAveragesHalf) {
  // Monte-Carlo check: sigma(0 + 5 N(0,1)) is symmetric around 0.5.
  Tape tape;
  Rng rng(5);
  ControlNetwork net = ControlNetwork::create(tape, 2, 4, 1, rng);
  Tensor x = Tensor::zeros({1, 2});
  Rng noise(12345);
  GateContext ctx = train_ctx(5.0, &noise);
  GradPause pause(tape);
  double mean = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) mean += gate_forward(net, x, ctx).at(0) / n;
  EXPECT_NEAR(mean, 0.5, 0.02);
}

TEST(GateForward, TrainValuesStrictlyInsideUnitInterval) {
  Tape tape;
  Rng rng(6);
  ControlNetwork net = ControlNetwork::create(tape, 4, 8, 2, rng);
  for (double& v : net.w2.mutable_data()) v = rng.normal() * 3.0;
  Tensor x = randn({16, 4}, rng, 2.0);
  Rng noise(7);
  Tensor g = gate_forward(net, x, train_ctx(5.0, &noise));
  for (int i = 0; i < g.numel(); ++i) {
    EXPECT_GT(g.at(i), 0.0);
    EXPECT_LT(g.at(i), 1.0);
  }
}

TEST(GateForward, InferenceIsDeterministic) {
  Tape tape;
  Rng rng(8);
  ControlNetwork net = ControlNetwork::create(tape, 4, 8, 2, rng);
  for (double& v : net.w2.mutable_data()) v = rng.normal();
  Tensor x = randn({10, 4}, rng, 1.0);
  Tensor g1 = gate_forward(net, x, infer_ctx());
  Tensor g2 = gate_forward(net, x, infer_ctx());
  EXPECT_EQ(g1.data(), g2.data());
}

TEST(GateForward, FreshNoisePerCall) {
  Tape tape;
  Rng rng(9);
  ControlNetwork net = ControlNetwork::create(tape, 4, 8, 1, rng);
  Tensor x = randn({6, 4}, rng, 1.0);
  Rng noise(10);
  GateContext ctx = train_ctx(2.0, &noise);
  Tensor g1 = gate_forward(net, x, ctx);
  Tensor g2 = gate_forward(net, x, ctx);
  EXPECT_NE(g1.data(), g2.data());
}

TEST(GateForward, GradientsFlowToAllControlParameters) {
  Tape tape;
  Rng rng(11);
  ControlNetwork net = ControlNetwork::create(tape, 3, 4, 2, rng);
  // Move off the zero init so w2/b gradients are informative.
  for (double& v : net.w2.mutable_data()) v = rng.normal() * 0.5;
  for (double& v : net.b.mutable_data()) v = rng.normal() * 0.5;
  Tensor x = randn({5, 3}, rng, 1.0);
  double err = max_grad_rel_err(tape, {net.w1, net.b, net.w2}, [&]() {
    Rng noise(77);  // replayed draw keeps the loss deterministic
    GateContext ctx = train_ctx(1.5, &noise);
    return sum(gate_forward(net, x, ctx));
  });
  EXPECT_LT(err, 1e-4);
}

TEST(AlphaAt, PaperRampValues) {
  NoiseSchedule s{5.0, 300000, NoiseSchedule::Mode::LinearRamp};
  EXPECT_DOUBLE_EQ(alpha_at(s, 0), 0.0);
  EXPECT_DOUBLE_EQ(alpha_at(s, 150000), 2.5);
  EXPECT_DOUBLE_EQ(alpha_at(s, 300000), 5.0);
  EXPECT_DOUBLE_EQ(alpha_at(s, 600000), 5.0);  // capped
  EXPECT_THROW(alpha_at(s, -1), ContractError);
}

TEST(AlphaAt, ConstantMode) {
  NoiseSchedule s{5.0, 300000, NoiseSchedule::Mode::Constant};
  EXPECT_DOUBLE_EQ(alpha_at(s, 0), 5.0);
  EXPECT_DOUBLE_EQ(alpha_at(s, 1234), 5.0);
}

TEST(ApplyGate, EndpointAndMidpointCases) {
  Rng rng(13);
  Tensor branch = randn({4, 3}, rng, 1.0);
  Tensor residual = randn({4, 3}, rng, 1.0);

  Tensor off = apply_gate(Tensor::scalar(0.0), branch, residual);
  EXPECT_EQ(off.data(), residual.data());

  Tensor on = apply_gate(Tensor::scalar(1.0), branch, residual);
  for (int i = 0; i < on.numel(); ++i)
    EXPECT_DOUBLE_EQ(on.at(i), branch.at(i) + residual.at(i));

  Tensor half = apply_gate(Tensor::scalar(0.5), branch, residual);
  for (int i = 0; i < half.numel(); ++i)
    EXPECT_DOUBLE_EQ(half.at(i), residual.at(i) + 0.5 * branch.at(i));
}

TEST(ApplyGate, PerRowGateAndShapeError) {
  Tensor branch = Tensor::from_data({2, 2}, {1, 1, 1, 1});
  Tensor residual = Tensor::zeros({2, 2});
  Tensor gate = Tensor::from_data({2}, {1.0, 0.0});
  Tensor out = apply_gate(gate, branch, residual);
  EXPECT_EQ(out.data(), (std::vector<double>{1, 1, 0, 0}));

  Tensor bad = Tensor::from_data({3}, {1, 1, 1});
  EXPECT_THROW(apply_gate(bad, branch, residual), DimError);
}

TEST(ApplyGate, SaturatedTrainMatchesInfer) {
  // |logit| > 10 and alpha = 0: continuous gating and hard thresholding
  // agree through apply_gate to 1e-4.
  Tape tape;
  ControlNetwork net = identity_net(tape);
  Rng rng(17);
  Tensor x = Tensor::from_data({6, 1}, {-14, 12, 30, -11, 25, -40});
  Tensor branch = randn({6, 3}, rng, 2.0);
  Tensor residual = randn({6, 3}, rng, 2.0);

  Tensor g_train = gate_forward(net, x, train_ctx(0.0));
  Tensor g_infer = gate_forward(net, x, infer_ctx());
  Tensor z_train = apply_gate(g_train, branch, residual);
  Tensor z_infer = apply_gate(g_infer, branch, residual);
  double worst = 0.0;
  for (int i = 0; i < z_train.numel(); ++i)
    worst = std::max(worst, std::fabs(z_train.at(i) - z_infer.at(i)));
  EXPECT_LT(worst, 1e-4);
}

TEST(ControlNetwork, ForcedGatesSkipTheNetwork) {
  Tape tape;
  Rng rng(19);
  ControlNetwork net = ControlNetwork::create(tape, 4, 8, 2, rng);
  Tensor x = randn({3, 4}, rng, 1.0);
  GateContext on = train_ctx();
  on.force = GateForce::AllOn;
  GateContext off = infer_ctx();
  off.force = GateForce::AllOff;
  Tensor g_on = gate_forward(net, x, on);
  Tensor g_off = gate_forward(net, x, off);
  for (int i = 0; i < g_on.numel(); ++i) {
    EXPECT_DOUBLE_EQ(g_on.at(i), 1.0);
    EXPECT_DOUBLE_EQ(g_off.at(i), 0.0);
  }
  EXPECT_EQ(tape.num_ops(), 0u);
}
