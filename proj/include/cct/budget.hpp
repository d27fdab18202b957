#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "cct/error.hpp"
#include "cct/rng.hpp"
#include "cct/tensor.hpp"

// Flop accounting for gated sub-networks: per-gate cost model, batch
// budgets, expected/realized utilization, and the two-sided budget loss.
//
// Costs count multiply-accumulates of the gated matmuls only (2 flops
// per MAC). Layer norms, softmax, nonlinearities and the control
// networks themselves always execute, so they are reported as fixed
// overhead and never enter C_l.

namespace cct {

enum class Subnet { SelfAttnKV, SelfAttnQ, CrossAttnKV, CrossAttnQ, FeedForward };
enum class Component { Encoder, Decoder };

inline std::string component_name(Component c) {
  return c == Component::Encoder ? "encoder" : "decoder";
}

// CSV/report name for a gate. Feed-forward gates are per sub-layer.
inline std::string subnet_name(Subnet kind, int ff_index = 0) {
  switch (kind) {
    case Subnet::SelfAttnKV: return "self-attn-kv";
    case Subnet::SelfAttnQ: return "self-attn-q";
    case Subnet::CrossAttnKV: return "cross-attn-kv";
    case Subnet::CrossAttnQ: return "cross-attn-q";
    case Subnet::FeedForward: return "ff-sub-layer-" + std::to_string(ff_index);
  }
  return "?";
}

inline std::pair<Subnet, int> parse_subnet(const std::string& name) {
  if (name == "self-attn-kv") return {Subnet::SelfAttnKV, 0};
  if (name == "self-attn-q") return {Subnet::SelfAttnQ, 0};
  if (name == "cross-attn-kv") return {Subnet::CrossAttnKV, 0};
  if (name == "cross-attn-q") return {Subnet::CrossAttnQ, 0};
  const std::string prefix = "ff-sub-layer-";
  if (name.rfind(prefix, 0) == 0)
    return {Subnet::FeedForward, std::stoi(name.substr(prefix.size()))};
  throw FormatError("unknown sub-network kind: " + name);
}

// ---------------------------------------------------------------------------
// Gate traces
// ---------------------------------------------------------------------------

// Gate activations of one control network over one sequence: `arity`
// values per token (arity = M for split feed-forward gates, 1 otherwise).
// Padded positions carry valid = 0 and are skipped by all accounting.
struct GateTraceEntry {
  int seq = 0;
  Component stack = Component::Encoder;  // where the layer lives
  int layer = 0;                         // index within its stack
  Subnet kind = Subnet::SelfAttnKV;
  int arity = 1;
  std::vector<double> values;      // tokens x arity, row-major
  std::vector<std::uint8_t> valid; // per token
  std::vector<int> attn_len;       // per token, attended keys (q kinds only)
  std::vector<int> decode_step;    // per token; decode traces only
  Tensor taped;                    // gate tensor, continuous training traces

  int tokens() const { return static_cast<int>(valid.size()); }
  double value(int t, int j = 0) const {
    return values[static_cast<std::size_t>(t) * arity + j];
  }
};

struct GateTrace {
  std::vector<GateTraceEntry> entries;
  std::vector<int> symbol_of_seq;            // assigned budget symbol per sequence
  std::vector<std::vector<int>> src_tokens;  // per sequence, unpadded
  std::vector<std::vector<int>> tgt_tokens;
  bool binary = false;

  int num_seqs() const { return static_cast<int>(symbol_of_seq.size()); }
};

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

struct GateCost {
  double fixed = 0.0;    // flops per token, length-independent part
  double per_key = 0.0;  // flops per attended key (score + context matmuls)
  Component component = Component::Encoder;  // budget this gate draws from
};

struct CostConfig {
  int d = 64;
  int d_h = 256;
  int heads = 4;  // does not change gated flop totals; kept for reporting
  int ff_splits = 1;
  int enc_layers = 0;
  int dec_layers = 0;
  // Cross-attention key/value projections act on encoder outputs but sit
  // in decoder layers; by default their cost draws from the decoder budget.
  bool cross_kv_in_encoder_budget = false;
};

class CostModel {
 public:
  using Key = std::tuple<Component, int, Subnet>;

  void add(Component stack, int layer, Subnet kind, GateCost cost) {
    table_[{stack, layer, kind}] = cost;
  }

  const GateCost& cost(Component stack, int layer, Subnet kind) const {
    auto it = table_.find({stack, layer, kind});
    if (it == table_.end())
      throw ContractError("cost model has no entry for " +
                          component_name(stack) + " layer " +
                          std::to_string(layer) + " " + subnet_name(kind));
    return it->second;
  }

  // Flop cost of one gate decision at token position t of `entry`.
  double entry_cost(const GateTraceEntry& entry, int t) const {
    const GateCost& c = cost(entry.stack, entry.layer, entry.kind);
    double keys = entry.attn_len.empty() ? 0.0
                                         : static_cast<double>(entry.attn_len[t]);
    return c.fixed + c.per_key * keys;
  }

  Component component_of(const GateTraceEntry& entry) const {
    return cost(entry.stack, entry.layer, entry.kind).component;
  }

  const std::map<Key, GateCost>& table() const { return table_; }
  const CostConfig& config() const { return config_; }
  void set_config(const CostConfig& c) { config_ = c; }

 private:
  std::map<Key, GateCost> table_;
  CostConfig config_;
};

// Per-token flop costs of the gated branches, from layer dimensions:
//   kv branch         2 projections x 2*d*d
//   q branch          query + output projection (2 x 2*d*d) plus
//                     score/context matmuls, 2 x 2*d per attended key
//   ff sub-layer i    2 x 2*d*(d_h/M)
inline CostModel layer_costs(const CostConfig& cfg) {
  if (cfg.d <= 0 || cfg.d_h <= 0 || cfg.ff_splits <= 0 ||
      cfg.d_h % cfg.ff_splits != 0)
    throw ContractError("layer_costs: invalid dimensions (d=" +
                        std::to_string(cfg.d) + ", d_h=" + std::to_string(cfg.d_h) +
                        ", M=" + std::to_string(cfg.ff_splits) + ")");
  const double d = cfg.d;
  const double kv = 2.0 * (2.0 * d * d);
  const double q_fixed = 2.0 * d * d + 2.0 * d * d;
  const double q_per_key = 2.0 * (2.0 * d);
  const double ff = 2.0 * (2.0 * d * (cfg.d_h / cfg.ff_splits));

  CostModel m;
  m.set_config(cfg);
  for (int l = 0; l < cfg.enc_layers; ++l) {
    m.add(Component::Encoder, l, Subnet::SelfAttnKV, {kv, 0.0, Component::Encoder});
    m.add(Component::Encoder, l, Subnet::SelfAttnQ,
          {q_fixed, q_per_key, Component::Encoder});
    m.add(Component::Encoder, l, Subnet::FeedForward, {ff, 0.0, Component::Encoder});
  }
  for (int l = 0; l < cfg.dec_layers; ++l) {
    m.add(Component::Decoder, l, Subnet::SelfAttnKV, {kv, 0.0, Component::Decoder});
    m.add(Component::Decoder, l, Subnet::SelfAttnQ,
          {q_fixed, q_per_key, Component::Decoder});
    m.add(Component::Decoder, l, Subnet::CrossAttnKV,
          {kv, 0.0,
           cfg.cross_kv_in_encoder_budget ? Component::Encoder : Component::Decoder});
    m.add(Component::Decoder, l, Subnet::CrossAttnQ,
          {q_fixed, q_per_key, Component::Decoder});
    m.add(Component::Decoder, l, Subnet::FeedForward, {ff, 0.0, Component::Decoder});
  }
  return m;
}

// ---------------------------------------------------------------------------
// Budgets and utilization
// ---------------------------------------------------------------------------

// Budget tuples (encoder fraction, decoder fraction), one control symbol
// per tuple. Duplicated tuples implement non-uniform weighting.
struct BudgetSpec {
  std::vector<std::pair<double, double>> budgets;

  int size() const { return static_cast<int>(budgets.size()); }

  static BudgetSpec cross_product(const std::vector<double>& enc,
                                  const std::vector<double>& dec) {
    BudgetSpec s;
    for (double pe : enc)
      for (double pd : dec) s.budgets.emplace_back(pe, pd);
    return s;
  }

  // Encoder-only budgets (MLM); the decoder slot mirrors the value but
  // is never consulted when the model has no decoder gates.
  static BudgetSpec scalar_list(const std::vector<double>& ps) {
    BudgetSpec s;
    for (double p : ps) s.budgets.emplace_back(p, p);
    return s;
  }

  double fraction(int symbol, Component c) const {
    if (symbol < 0 || symbol >= size())
      throw IndexError("budget symbol " + std::to_string(symbol) +
                       " outside spec of " + std::to_string(size()));
    return c == Component::Encoder ? budgets[symbol].first
                                   : budgets[symbol].second;
  }

  // Budgets below 0.05 destabilize training and p = 0 breaks the loss
  // normalization, so they are rejected up front.
  void validate() const {
    if (budgets.empty()) throw ContractError("budget spec: empty budget list");
    for (auto& [pe, pd] : budgets) {
      for (double p : {pe, pd}) {
        if (p < 0.05 || p > 1.0)
          throw ContractError("budget spec: fraction " + std::to_string(p) +
                              " outside [0.05, 1]");
      }
    }
  }
};

// I.i.d. uniform symbol assignment over the budget list.
inline std::vector<int> assign_budgets(int batch_size, const BudgetSpec& spec,
                                       Rng& rng) {
  if (batch_size < 1)
    throw ContractError("assign_budgets: batch size must be >= 1");
  if (spec.size() < 1) throw ContractError("assign_budgets: empty budget spec");
  std::vector<int> out(batch_size);
  for (int& s : out) s = rng.uniform_int(spec.size());
  return out;
}

namespace detail {

template <class Fn>
void for_component_entries(const GateTrace& trace, const CostModel& costs,
                           Component component, int symbol, Fn&& fn) {
  for (const GateTraceEntry& e : trace.entries) {
    if (costs.component_of(e) != component) continue;
    if (symbol >= 0 && trace.symbol_of_seq[e.seq] != symbol) continue;
    fn(e);
  }
}

}  // namespace detail

// Total flops of all gated branches of `component` over unpadded
// positions; the denominator of every budget fraction.
inline double available_compute(const GateTrace& trace, const CostModel& costs,
                                Component component, int symbol = -1) {
  double total = 0.0;
  detail::for_component_entries(trace, costs, component, symbol,
                                [&](const GateTraceEntry& e) {
                                  for (int t = 0; t < e.tokens(); ++t) {
                                    if (!e.valid[t]) continue;
                                    total += e.arity * costs.entry_cost(e, t);
                                  }
                                });
  return total;
}

// C_budget: fraction p of the maximum computation available for the batch.
inline double batch_budget(double p, const GateTrace& trace,
                           const CostModel& costs, Component component,
                           int symbol = -1) {
  if (p < 0.0 || p > 1.0)
    throw ContractError("batch_budget: p outside [0,1]");
  return p * available_compute(trace, costs, component, symbol);
}

// Verifies the trace holds at least one entry for every gate of the
// component, for every selected sequence.
inline void check_trace_complete(const GateTrace& trace, const CostModel& costs,
                                 Component component, int symbol = -1) {
  std::set<std::tuple<int, Component, int, Subnet>> seen;
  for (const GateTraceEntry& e : trace.entries)
    seen.insert({e.seq, e.stack, e.layer, e.kind});
  for (int s = 0; s < trace.num_seqs(); ++s) {
    if (symbol >= 0 && trace.symbol_of_seq[s] != symbol) continue;
    for (auto& [key, cost] : costs.table()) {
      if (cost.component != component) continue;
      auto [stack, layer, kind] = key;
      if (!seen.count({s, stack, layer, kind}))
        throw ContractError("gate trace missing entry: seq " + std::to_string(s) +
                            " " + component_name(stack) + " layer " +
                            std::to_string(layer) + " " + subnet_name(kind));
    }
  }
}

// C_util: sum of gate * C_l over unpadded positions. Returns a tape
// participant when the trace carries taped (continuous) gate tensors,
// otherwise a constant scalar.
inline Tensor utilized_compute(const GateTrace& trace, const CostModel& costs,
                               Component component, int symbol = -1) {
  check_trace_complete(trace, costs, component, symbol);
  double plain = 0.0;
  Tensor taped_total;
  detail::for_component_entries(
      trace, costs, component, symbol, [&](const GateTraceEntry& e) {
        if (e.taped.defined()) {
          Tensor cost_mask = Tensor::zeros({e.tokens(), e.arity});
          for (int t = 0; t < e.tokens(); ++t) {
            if (!e.valid[t]) continue;
            double c = costs.entry_cost(e, t);
            for (int j = 0; j < e.arity; ++j) cost_mask.set(t, j, c);
          }
          Tensor part = sum(mul(e.taped, cost_mask));
          taped_total = taped_total.defined() ? add(taped_total, part) : part;
        } else {
          for (int t = 0; t < e.tokens(); ++t) {
            if (!e.valid[t]) continue;
            double c = costs.entry_cost(e, t);
            for (int j = 0; j < e.arity; ++j) plain += e.value(t, j) * c;
          }
        }
      });
  if (!taped_total.defined()) return Tensor::scalar(plain);
  if (plain != 0.0) taped_total = add(taped_total, Tensor::scalar(plain));
  return taped_total;
}

inline double utilized_compute_value(const GateTrace& trace,
                                     const CostModel& costs, Component component,
                                     int symbol = -1) {
  double total = 0.0;
  detail::for_component_entries(trace, costs, component, symbol,
                                [&](const GateTraceEntry& e) {
                                  for (int t = 0; t < e.tokens(); ++t) {
                                    if (!e.valid[t]) continue;
                                    double c = costs.entry_cost(e, t);
                                    for (int j = 0; j < e.arity; ++j)
                                      total += e.value(t, j) * c;
                                  }
                                });
  return total;
}

// Two-sided budget loss |C_budget - C_util| / C_budget; under-utilization
// is penalized too. Subgradient 0 at exact adherence (see abs_val).
inline double budget_loss(double c_budget, double c_util) {
  if (c_budget <= 0.0)
    throw ContractError("budget_loss: C_budget must be positive");
  return std::fabs(c_budget - c_util) / c_budget;
}

inline Tensor budget_loss(double c_budget, const Tensor& c_util) {
  if (c_budget <= 0.0)
    throw ContractError("budget_loss: C_budget must be positive");
  return scale(abs_val(sub(c_util, Tensor::scalar(c_budget))), 1.0 / c_budget);
}

// Multi-task budget loss: one term per (assigned symbol, component) over
// that symbol's sub-batch; empty sub-batches contribute nothing.
inline Tensor multi_budget_loss(const GateTrace& trace, const BudgetSpec& spec,
                                const CostModel& costs) {
  for (int s : trace.symbol_of_seq)
    if (s < 0 || s >= spec.size())
      throw ContractError("multi_budget_loss: sequence carries symbol " +
                          std::to_string(s) + " outside the budget spec");
  Tensor total;
  for (int sym = 0; sym < spec.size(); ++sym) {
    bool any = false;
    for (int s : trace.symbol_of_seq) any = any || (s == sym);
    if (!any) continue;
    for (Component comp : {Component::Encoder, Component::Decoder}) {
      double avail = available_compute(trace, costs, comp, sym);
      if (avail == 0.0) continue;  // component has no gates (e.g. MLM decoder)
      double cb = spec.fraction(sym, comp) * avail;
      Tensor term = budget_loss(cb, utilized_compute(trace, costs, comp, sym));
      total = total.defined() ? add(total, term) : term;
    }
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

}  // namespace cct
