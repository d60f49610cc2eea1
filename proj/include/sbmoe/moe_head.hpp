#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sbmoe/numerics.hpp"

namespace sbmoe {

enum class Pooling : std::uint8_t { kTop1 = 0, kAll = 1 };

std::string_view to_string(Pooling pooling);
Pooling parse_pooling(std::string_view name);

struct HeadConfig {
  std::size_t dim = 0;
  std::size_t n_experts = 6;
  Pooling pooling = Pooling::kTop1;

  static constexpr std::size_t kMaxExperts = 64;

  // Bottleneck width shared by the experts and the gate: ceil(dim / 2).
  std::size_t hidden() const { return (dim + 1) / 2; }
  // Throws ConfigError unless dim >= 2 and 1 <= n_experts <= 64.
  void validate() const;

  bool operator==(const HeadConfig&) const = default;
};

// Bottleneck adapter with a skip connection:
//   y = x + W_up * gelu(W_down * x + b_down) + b_up
struct ExpertParams {
  Matrix w_down;  // hidden x dim
  Vector b_down;  // hidden
  Matrix w_up;    // dim x hidden
  Vector b_up;    // dim

  bool operator==(const ExpertParams&) const = default;
};

// Two-layer gate. The noise projection reads the same hidden activation as
// the clean logits.
struct GateParams {
  Matrix w_hidden;  // hidden x dim
  Vector b_hidden;  // hidden
  Matrix w_out;     // n x hidden
  Vector b_out;     // n
  Matrix w_noise;   // n x hidden
  Vector b_noise;   // n

  bool operator==(const GateParams&) const = default;
};

struct HeadParams {
  HeadConfig config;
  std::vector<ExpertParams> experts;
  GateParams gate;

  // All tensors allocated with the shapes implied by `config`, filled with 0.
  static HeadParams zeros(const HeadConfig& config);

  bool operator==(const HeadParams&) const = default;
};

// Gradient of a scalar with respect to every HeadParams tensor.
struct GradientSet {
  std::vector<ExpertParams> experts;
  GateParams gate;

  static GradientSet zeros_like(const HeadParams& params);
};

inline std::span<double> tensor_span(Matrix& m) { return m.data(); }
inline std::span<const double> tensor_span(const Matrix& m) { return m.data(); }
inline std::span<double> tensor_span(Vector& v) { return v; }
inline std::span<const double> tensor_span(const Vector& v) { return v; }

// Visits every tensor in serialization order: per expert (w_down, b_down,
// w_up, b_up), then the gate (w_hidden, b_hidden, w_out, b_out, w_noise,
// b_noise). `fn(group, expert_index, span)`; expert_index is -1 for gate
// tensors. Works on HeadParams and GradientSet, const or not.
template <class Params, class Fn>
void for_each_tensor(Params& params, Fn&& fn) {
  for (std::size_t i = 0; i < params.experts.size(); ++i) {
    auto& e = params.experts[i];
    const auto idx = static_cast<int>(i);
    fn(std::string_view("expert.w_down"), idx, tensor_span(e.w_down));
    fn(std::string_view("expert.b_down"), idx, tensor_span(e.b_down));
    fn(std::string_view("expert.w_up"), idx, tensor_span(e.w_up));
    fn(std::string_view("expert.b_up"), idx, tensor_span(e.b_up));
  }
  auto& g = params.gate;
  fn(std::string_view("gate.w_hidden"), -1, tensor_span(g.w_hidden));
  fn(std::string_view("gate.b_hidden"), -1, tensor_span(g.b_hidden));
  fn(std::string_view("gate.w_out"), -1, tensor_span(g.w_out));
  fn(std::string_view("gate.b_out"), -1, tensor_span(g.b_out));
  fn(std::string_view("gate.w_noise"), -1, tensor_span(g.w_noise));
  fn(std::string_view("gate.b_noise"), -1, tensor_span(g.b_noise));
}

// Flattened copy of every parameter in serialization order, and its inverse.
Vector flatten(const HeadParams& params);
void unflatten(std::span<const double> flat, HeadParams& params);
std::size_t allocated_parameter_count(const HeadParams& params);

struct RoutingInfo {
  Vector clean_logits;
  Vector noisy_logits;  // equals clean_logits when noise is off
  Vector probs;
  std::size_t selected = 0;  // argmax of probs, lowest index on ties
};

struct HeadOutput {
  Vector output;
  RoutingInfo routing;
};

// Returns x + W_up * gelu(W_down * x + b_down) + b_up.
Vector expert_forward(const ExpertParams& expert, std::span<const double> x);

// Gate logits and routing probabilities. Passing an rng switches on the
// training-time noise: one standard normal draw per expert, scaled by
// softplus of the noise projection.
RoutingInfo gate_forward(const GateParams& gate, std::span<const double> x, SeededRng* rng = nullptr);

HeadOutput head_forward(const HeadParams& params, std::span<const double> x, SeededRng* rng = nullptr);

// Intermediate values of one head evaluation, kept for the backward pass.
struct ExpertTrace {
  bool evaluated = false;
  Vector pre;    // W_down x + b_down
  Vector act;    // gelu(pre)
  Vector delta;  // W_up act + b_up (expert output minus x)
};

struct HeadTrace {
  Vector input;
  Vector gate_pre;   // W_hidden x + b_hidden
  Vector gate_act;   // gelu(gate_pre)
  Vector noise_pre;  // W_noise gate_act + b_noise
  Vector noise;      // standard normal draws; empty when noise is off
  RoutingInfo routing;
  std::vector<ExpertTrace> experts;  // TOP1 evaluates only the selected expert
  Vector output;
};

// Deterministic head evaluation with externally supplied noise draws
// (empty span = noise off). `noise` must have n_experts entries otherwise.
HeadTrace trace_head(const HeadParams& params, std::span<const double> x, std::span<const double> noise);

struct ParamCount {
  std::size_t per_expert = 0;
  std::size_t gate = 0;
  std::size_t total = 0;
};

ParamCount param_count(const HeadConfig& config);

// Glorot-uniform weights for W_down, W_hidden, W_out, W_noise; W_up and all
// biases zero, so every expert starts as the identity map.
HeadParams init_head(const HeadConfig& config, SeededRng& rng);

// Rounds every parameter to the nearest 32-bit float (the on-disk precision).
HeadParams quantize_to_f32(const HeadParams& params);

// "SBMH" model file: magic | u32 version | u32 dim | u32 n | u8 pooling |
// little-endian f32 parameters in for_each_tensor order.
std::string encode_model(const HeadParams& params);
HeadParams decode_model(std::string_view bytes);
void write_model(const std::filesystem::path& path, const HeadParams& params);
HeadParams read_model(const std::filesystem::path& path);

}  // namespace sbmoe
