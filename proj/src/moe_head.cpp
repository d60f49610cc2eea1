#include "sbmoe/moe_head.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sbmoe/errors.hpp"

namespace sbmoe {

namespace {

void check_dim(std::span<const double> x, std::size_t dim, const char* where) {
  if (x.size() != dim) {
    throw ShapeError(std::string(where) + ": input has " + std::to_string(x.size()) +
                     " entries, expected " + std::to_string(dim));
  }
}

std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

Vector add(Vector a, std::span<const double> b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

void fill_glorot(Matrix& m, SeededRng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  for (double& w : m.data()) w = rng.uniform(-bound, bound);
}

void evaluate_expert(const ExpertParams& e, std::span<const double> x, ExpertTrace& t) {
  t.pre = add(matvec(e.w_down, x), e.b_down);
  t.act.resize(t.pre.size());
  std::transform(t.pre.begin(), t.pre.end(), t.act.begin(), gelu);
  t.delta = add(matvec(e.w_up, t.act), e.b_up);
  t.evaluated = true;
}

Vector draw_noise(std::size_t n, SeededRng& rng) {
  Vector noise(n);
  for (double& eps : noise) eps = gaussian(rng);
  return noise;
}

// Fills the gate fields of `t`; `noise` empty means noise off.
void route(const GateParams& g, std::span<const double> x, std::span<const double> noise, HeadTrace& t) {
  t.noise.assign(noise.begin(), noise.end());
  t.gate_pre = add(matvec(g.w_hidden, x), g.b_hidden);
  t.gate_act.resize(t.gate_pre.size());
  std::transform(t.gate_pre.begin(), t.gate_pre.end(), t.gate_act.begin(), gelu);
  RoutingInfo& r = t.routing;
  r.clean_logits = add(matvec(g.w_out, t.gate_act), g.b_out);
  r.noisy_logits = r.clean_logits;
  if (!noise.empty()) {
    t.noise_pre = add(matvec(g.w_noise, t.gate_act), g.b_noise);
    for (std::size_t i = 0; i < noise.size(); ++i) r.noisy_logits[i] += noise[i] * softplus(t.noise_pre[i]);
  }
  r.probs = softmax(r.noisy_logits);
  r.selected = argmax_lowest(r.probs);
}

}  // namespace

std::string_view to_string(Pooling pooling) { return pooling == Pooling::kTop1 ? "top1" : "all"; }

Pooling parse_pooling(std::string_view name) {
  if (name == "top1" || name == "TOP1") return Pooling::kTop1;
  if (name == "all" || name == "ALL") return Pooling::kAll;
  throw ConfigError("unknown pooling '" + std::string(name) + "' (expected top1 or all)");
}

void HeadConfig::validate() const {
  if (dim < 2) throw ConfigError("head dimension must be at least 2, got " + std::to_string(dim));
  if (n_experts < 1 || n_experts > kMaxExperts) {
    throw ConfigError("number of experts must be in [1, 64], got " + std::to_string(n_experts));
  }
}

HeadParams HeadParams::zeros(const HeadConfig& config) {
  config.validate();
  const std::size_t d = config.dim;
  const std::size_t h = config.hidden();
  const std::size_t n = config.n_experts;
  HeadParams p;
  p.config = config;
  p.experts.assign(n, ExpertParams{Matrix(h, d), Vector(h, 0.0), Matrix(d, h), Vector(d, 0.0)});
  p.gate = GateParams{Matrix(h, d), Vector(h, 0.0), Matrix(n, h), Vector(n, 0.0), Matrix(n, h), Vector(n, 0.0)};
  return p;
}

GradientSet GradientSet::zeros_like(const HeadParams& params) {
  HeadParams z = HeadParams::zeros(params.config);
  return GradientSet{std::move(z.experts), std::move(z.gate)};
}

Vector flatten(const HeadParams& params) {
  Vector flat;
  flat.reserve(allocated_parameter_count(params));
  for_each_tensor(params, [&](std::string_view, int, std::span<const double> t) {
    flat.insert(flat.end(), t.begin(), t.end());
  });
  return flat;
}

void unflatten(std::span<const double> flat, HeadParams& params) {
  if (flat.size() != allocated_parameter_count(params)) throw ShapeError("unflatten: length mismatch");
  std::size_t pos = 0;
  for_each_tensor(params, [&](std::string_view, int, std::span<double> t) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), t.size(), t.begin());
    pos += t.size();
  });
}

std::size_t allocated_parameter_count(const HeadParams& params) {
  std::size_t count = 0;
  for_each_tensor(params, [&](std::string_view, int, std::span<const double> t) { count += t.size(); });
  return count;
}

Vector expert_forward(const ExpertParams& expert, std::span<const double> x) {
  check_dim(x, expert.w_down.cols(), "expert_forward");
  ExpertTrace t;
  evaluate_expert(expert, x, t);
  return add(Vector(x.begin(), x.end()), t.delta);
}

RoutingInfo gate_forward(const GateParams& gate, std::span<const double> x, SeededRng* rng) {
  check_dim(x, gate.w_hidden.cols(), "gate_forward");
  Vector noise;
  if (rng != nullptr) noise = draw_noise(gate.w_out.rows(), *rng);
  HeadTrace t;
  route(gate, x, noise, t);
  return std::move(t.routing);
}

HeadTrace trace_head(const HeadParams& params, std::span<const double> x, std::span<const double> noise) {
  const HeadConfig& c = params.config;
  check_dim(x, c.dim, "head_forward");
  if (!noise.empty() && noise.size() != c.n_experts) {
    throw ShapeError("head_forward: expected " + std::to_string(c.n_experts) + " noise draws, got " +
                     std::to_string(noise.size()));
  }
  const GateParams& g = params.gate;
  HeadTrace t;
  t.input.assign(x.begin(), x.end());

  route(g, x, noise, t);
  const RoutingInfo& r = t.routing;

  t.experts.resize(c.n_experts);
  if (c.pooling == Pooling::kTop1) {
    const std::size_t k = r.selected;
    evaluate_expert(params.experts[k], x, t.experts[k]);
    t.output.resize(c.dim);
    for (std::size_t j = 0; j < c.dim; ++j) t.output[j] = r.probs[k] * (x[j] + t.experts[k].delta[j]);
  } else {
    for (std::size_t i = 0; i < c.n_experts; ++i) evaluate_expert(params.experts[i], x, t.experts[i]);
    // sum_i p_i (x + delta_i) = x + sum_i p_i delta_i, since the probs sum to
    // one. The weighted deltas are summed order-independently so that
    // relabelling the experts cannot change the result.
    t.output.resize(c.dim);
    Vector terms(c.n_experts);
    for (std::size_t j = 0; j < c.dim; ++j) {
      for (std::size_t i = 0; i < c.n_experts; ++i) terms[i] = r.probs[i] * t.experts[i].delta[j];
      t.output[j] = x[j] + order_invariant_sum(terms);
    }
  }
  return t;
}

HeadOutput head_forward(const HeadParams& params, std::span<const double> x, SeededRng* rng) {
  Vector noise;
  if (rng != nullptr) noise = draw_noise(params.config.n_experts, *rng);
  HeadTrace t = trace_head(params, x, noise);
  return HeadOutput{std::move(t.output), std::move(t.routing)};
}

ParamCount param_count(const HeadConfig& config) {
  config.validate();
  const std::size_t d = config.dim;
  const std::size_t h = config.hidden();
  const std::size_t n = config.n_experts;
  ParamCount c;
  c.per_expert = 2 * d * h + h + d;
  c.gate = d * h + h + 2 * (n * h + n);
  c.total = n * c.per_expert + c.gate;
  return c;
}

HeadParams init_head(const HeadConfig& config, SeededRng& rng) {
  HeadParams p = HeadParams::zeros(config);
  for (ExpertParams& e : p.experts) fill_glorot(e.w_down, rng);
  fill_glorot(p.gate.w_hidden, rng);
  fill_glorot(p.gate.w_out, rng);
  fill_glorot(p.gate.w_noise, rng);
  return p;
}

HeadParams quantize_to_f32(const HeadParams& params) {
  HeadParams q = params;
  for_each_tensor(q, [](std::string_view, int, std::span<double> t) {
    for (double& v : t) v = static_cast<double>(static_cast<float>(v));
  });
  return q;
}

}  // namespace sbmoe
