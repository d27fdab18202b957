#pragma once

#include <string>

#include "cct/error.hpp"
#include "cct/rng.hpp"
#include "cct/tensor.hpp"

// Control networks and gates: noisy continuous sigmoid gating during
// training, hard thresholding at inference.

namespace cct {

enum class GateMode { Train, Infer };

// Override every gate to a fixed state (equivalence tests, ungated
// baselines, pass-through checks).
enum class GateForce { None, AllOn, AllOff };

struct GateContext {
  GateMode mode = GateMode::Train;
  double alpha = 0.0;
  Rng* rng = nullptr;  // noise + dropout source in train mode
  GateForce force = GateForce::None;
  bool dropout = false;
};

// Per-token decision for one gated sub-network at inference.
struct GateDecision {
  double continuous = 0.0;  // sigmoid of the un-noised logit
  bool active = false;      // continuous >= 0.5, i.e. logit >= 0
  double cost = 0.0;        // flops of the controlled sub-network
};

// Single-hidden-layer feed-forward net producing one logit per token
// and per controlled sub-network.
struct ControlNetwork {
  Tensor w1;  // [d, hidden]
  Tensor b;   // [hidden]
  Tensor w2;  // [hidden, arity]

  int arity() const { return w2.cols(); }

  // w2 and b start at zero so every pre-activation logit is exactly 0
  // and all gates open at 0.5.
  static ControlNetwork create(Tape& tape, int d, int hidden, int arity,
                               Rng& rng) {
    if (hidden <= 0 || arity < 1)
      throw ContractError("ControlNetwork: hidden and arity must be positive");
    ControlNetwork net;
    net.w1 = tape.parameter({d, hidden},
                            randn({d, hidden}, rng, 1.0 / std::sqrt(d)).data());
    net.b = tape.parameter({hidden}, std::vector<double>(hidden, 0.0));
    net.w2 = tape.parameter({hidden, arity},
                            std::vector<double>(static_cast<std::size_t>(hidden) * arity, 0.0));
    return net;
  }

  // Pre-sigmoid logits, one row per token: RELU(x W1 + b) W2.
  Tensor logits(const Tensor& x) const {
    return matmul(relu(add_row_broadcast(matmul(x, w1), b)), w2);
  }
};

// Gate values for every token: train mode returns sigmoid(logit + alpha * N(0,1))
// with fresh noise per token and per output unit; infer mode returns the
// deterministic binary indicator of logit >= 0 (sigmoid >= 0.5 counts as
// active, ties included).
inline Tensor gate_forward(const ControlNetwork& net, const Tensor& x,
                           const GateContext& ctx) {
  if (ctx.alpha < 0.0)
    throw ContractError("gate_forward: negative noise level " +
                        std::to_string(ctx.alpha));
  const int t = x.rows(), m = net.arity();
  if (ctx.force == GateForce::AllOn) return Tensor::full({t, m}, 1.0);
  if (ctx.force == GateForce::AllOff) return Tensor::zeros({t, m});

  if (ctx.mode == GateMode::Infer) {
    Tensor lg;
    {
      Tape* tape = x.tape() ? x.tape() : net.w1.tape();
      if (tape) {
        GradPause pause(*tape);
        lg = net.logits(x);
      } else {
        lg = net.logits(x);
      }
    }
    Tensor out = Tensor::zeros({t, m});
    for (int i = 0; i < out.numel(); ++i)
      out.set(i, lg.at(i) >= 0.0 ? 1.0 : 0.0);
    return out;
  }

  Tensor lg = net.logits(x);
  if (ctx.alpha > 0.0) {
    if (!ctx.rng)
      throw ContractError("gate_forward: train mode with alpha > 0 needs an rng");
    Tensor noise = Tensor::zeros({t, m});
    for (int i = 0; i < noise.numel(); ++i)
      noise.set(i, ctx.alpha * ctx.rng->normal());
    lg = add(lg, noise);
  }
  return sigmoid(lg);
}

// Gate noise stddev over training: either a linear ramp from 0 to
// alpha_max across ramp_steps (capped afterwards) or a constant.
struct NoiseSchedule {
  double alpha_max = 5.0;
  long ramp_steps = 300000;
  enum class Mode { LinearRamp, Constant };
  Mode mode = Mode::LinearRamp;
};

inline double alpha_at(const NoiseSchedule& s, long step) {
  if (step < 0) throw ContractError("alpha_at: negative step");
  if (s.mode == NoiseSchedule::Mode::Constant) return s.alpha_max;
  if (s.ramp_steps <= 0) return s.alpha_max;
  double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(s.ramp_steps));
  return s.alpha_max * frac;
}

// gate * branch + residual. gate is scalar or one value per row of branch.
inline Tensor apply_gate(const Tensor& gate, const Tensor& branch,
                         const Tensor& residual) {
  Tensor scaled = gate.numel() == 1 ? mul(branch, gate) : row_scale(branch, gate);
  return add(scaled, residual);
}

}  // namespace cct
