#include "sbmoe/training.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sbmoe/errors.hpp"

namespace sbmoe {

namespace {

// Everything the backward pass needs from one forward evaluation.
struct BatchTape {
  std::vector<HeadTrace> queries;
  std::vector<HeadTrace> docs;
  std::vector<double> query_norms;  // cosine only
  std::vector<double> doc_norms;
  Matrix query_out;  // unit-normalized under cosine
  Matrix doc_out;
  Matrix scores;
  std::vector<std::size_t> selections;
};

BatchTape run_forward(const HeadParams& params, const Batch& batch, const BatchNoise& noise, Similarity kind) {
  const std::size_t b = batch.size();
  const std::size_t d = params.config.dim;
  if (batch.docs.rows() != b) throw ShapeError("batch: query and document counts differ");
  if (batch.queries.cols() != d || batch.docs.cols() != d) {
    throw ShapeError("batch embeddings have dimension " + std::to_string(batch.queries.cols()) +
                     ", head expects " + std::to_string(d));
  }
  BatchTape tape;
  tape.selections.assign(params.config.n_experts, 0);
  auto encode = [&](const Matrix& in, const Matrix& draws, std::vector<HeadTrace>& traces, Matrix& out,
                    std::vector<double>& norms) {
    traces.reserve(b);
    out = Matrix(b, d);
    norms.assign(b, 1.0);
    for (std::size_t i = 0; i < b; ++i) {
      const std::span<const double> eps = noise.active() ? draws.row(i) : std::span<const double>{};
      traces.push_back(trace_head(params, in.row(i), eps));
      ++tape.selections[traces.back().routing.selected];
      const Vector& y = traces.back().output;
      auto row = out.row(i);
      std::copy(y.begin(), y.end(), row.begin());
      if (kind == Similarity::kCosine) {
        norms[i] = norm(y);
        if (!(norms[i] > 0.0)) throw NumericError("cosine similarity of a zero-norm head output");
        for (double& v : row) v /= norms[i];
      }
    }
  };
  encode(batch.queries, noise.queries, tape.queries, tape.query_out, tape.query_norms);
  encode(batch.docs, noise.docs, tape.docs, tape.doc_out, tape.doc_norms);
  tape.scores = Matrix(b, b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) tape.scores(i, j) = dot(tape.query_out.row(i), tape.doc_out.row(j));
  }
  return tape;
}

// Loss and dL/dscores.
double loss_and_score_grad(const Matrix& scores, double temperature, Matrix* grad) {
  const std::size_t b = scores.rows();
  if (scores.cols() != b) throw ShapeError("contrastive_loss: score matrix must be square");
  if (b < 2) throw ShapeError("contrastive_loss: need at least 2 rows for in-batch negatives");
  if (!(temperature > 0.0)) throw ConfigError("contrastive_loss: temperature must be positive");
  if (!all_finite(scores.data())) throw NumericError("contrastive_loss: non-finite score");
  if (grad != nullptr) *grad = Matrix(b, b);
  double total = 0.0;
  Vector z(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) z[j] = scores(i, j) / temperature;
    const double max = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - max);
    const double lse = max + std::log(sum);
    total += lse - z[i];
    if (grad != nullptr) {
      const double scale = 1.0 / (static_cast<double>(b) * temperature);
      for (std::size_t j = 0; j < b; ++j) {
        (*grad)(i, j) = scale * (std::exp(z[j] - lse) - (i == j ? 1.0 : 0.0));
      }
    }
  }
  return total / static_cast<double>(b);
}

void expert_backward(const ExpertParams& e, const ExpertTrace& t, std::span<const double> x,
                     std::span<const double> grad_out, ExpertParams& g) {
  add_outer(g.w_up, grad_out, t.act);
  axpy(1.0, grad_out, g.b_up);
  Vector grad_pre = matvec_transposed(e.w_up, grad_out);
  for (std::size_t k = 0; k < grad_pre.size(); ++k) grad_pre[k] *= gelu_derivative(t.pre[k]);
  add_outer(g.w_down, grad_pre, x);
  axpy(1.0, grad_pre, g.b_down);
}

void head_backward(const HeadParams& params, const HeadTrace& t, std::span<const double> grad_out,
                   GradientSet& grads) {
  const std::size_t n = params.config.n_experts;
  const Vector& probs = t.routing.probs;
  const std::span<const double> x = t.input;
  Vector grad_probs(n, 0.0);
  Vector grad_expert(grad_out.size());

  if (params.config.pooling == Pooling::kTop1) {
    // y = p_k (x + delta_k)
    const std::size_t k = t.routing.selected;
    const ExpertTrace& et = t.experts[k];
    double g = 0.0;
    for (std::size_t j = 0; j < grad_out.size(); ++j) g += grad_out[j] * (x[j] + et.delta[j]);
    grad_probs[k] = g;
    for (std::size_t j = 0; j < grad_out.size(); ++j) grad_expert[j] = probs[k] * grad_out[j];
    expert_backward(params.experts[k], et, x, grad_expert, grads.experts[k]);
  } else {
    // y = x + sum_i p_i delta_i
    for (std::size_t i = 0; i < n; ++i) {
      const ExpertTrace& et = t.experts[i];
      grad_probs[i] = dot(grad_out, et.delta);
      for (std::size_t j = 0; j < grad_out.size(); ++j) grad_expert[j] = probs[i] * grad_out[j];
      expert_backward(params.experts[i], et, x, grad_expert, grads.experts[i]);
    }
  }

  // Softmax Jacobian: dL/dlogit_i = p_i (dL/dp_i - sum_j p_j dL/dp_j).
  const double mean = dot(probs, grad_probs);
  Vector grad_logits(n);
  for (std::size_t i = 0; i < n; ++i) grad_logits[i] = probs[i] * (grad_probs[i] - mean);

  const GateParams& gate = params.gate;
  GateParams& gg = grads.gate;
  add_outer(gg.w_out, grad_logits, t.gate_act);
  axpy(1.0, grad_logits, gg.b_out);
  Vector grad_act = matvec_transposed(gate.w_out, grad_logits);
  if (!t.noise.empty()) {
    // noisy_i = clean_i + eps_i * softplus(r_i), softplus' = sigmoid
    Vector grad_noise_pre(n);
    for (std::size_t i = 0; i < n; ++i) grad_noise_pre[i] = grad_logits[i] * t.noise[i] * sigmoid(t.noise_pre[i]);
    add_outer(gg.w_noise, grad_noise_pre, t.gate_act);
    axpy(1.0, grad_noise_pre, gg.b_noise);
    axpy(1.0, matvec_transposed(gate.w_noise, grad_noise_pre), grad_act);
  }
  for (std::size_t k = 0; k < grad_act.size(); ++k) grad_act[k] *= gelu_derivative(t.gate_pre[k]);
  add_outer(gg.w_hidden, grad_act, x);
  axpy(1.0, grad_act, gg.b_hidden);
}

// dL/d(raw head output) from dL/d(similarity operand).
Vector output_grad(std::span<const double> unit, double out_norm, Vector grad_unit, Similarity kind) {
  if (kind == Similarity::kDot) return grad_unit;
  const double radial = dot(grad_unit, unit);
  for (std::size_t k = 0; k < grad_unit.size(); ++k) grad_unit[k] = (grad_unit[k] - radial * unit[k]) / out_norm;
  return grad_unit;
}

template <class Params>
std::vector<std::span<double>> spans_of(Params& p) {
  std::vector<std::span<double>> out;
  for_each_tensor(p, [&](std::string_view, int, std::span<double> t) { out.push_back(t); });
  return out;
}

template <class Params>
std::vector<std::span<const double>> const_spans_of(const Params& p) {
  std::vector<std::span<const double>> out;
  for_each_tensor(p, [&](std::string_view, int, std::span<const double> t) { out.push_back(t); });
  return out;
}

}  // namespace

std::string_view to_string(Similarity similarity) { return similarity == Similarity::kCosine ? "cosine" : "dot"; }

Similarity parse_similarity(std::string_view name) {
  if (name == "cosine") return Similarity::kCosine;
  if (name == "dot") return Similarity::kDot;
  throw ConfigError("unknown similarity '" + std::string(name) + "' (expected cosine or dot)");
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("batch size must be at least 2 for in-batch negatives");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must be in (0, 1)");
  if (n_experts < 1 || n_experts > HeadConfig::kMaxExperts) {
    throw ConfigError("number of experts must be in [1, 64], got " + std::to_string(n_experts));
  }
}

Batch make_batch(std::span<const TrainingPair> pairs, const EmbeddingStore& query_store,
                 const EmbeddingStore& doc_store) {
  Batch batch{Matrix(pairs.size(), query_store.dim()), Matrix(pairs.size(), doc_store.dim()), {}, {}};
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto q = query_store.at(pairs[i].query_id);
    const auto d = doc_store.at(pairs[i].doc_id);
    std::copy(q.begin(), q.end(), batch.queries.row(i).begin());
    std::copy(d.begin(), d.end(), batch.docs.row(i).begin());
    batch.query_ids.push_back(pairs[i].query_id);
    batch.doc_ids.push_back(pairs[i].doc_id);
  }
  return batch;
}

double similarity(std::span<const double> a, std::span<const double> b, Similarity kind) {
  if (a.size() != b.size()) throw ShapeError("similarity: dimension mismatch");
  const double raw = dot(a, b);
  if (kind == Similarity::kDot) return raw;
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine similarity of a zero-norm vector");
  return raw / (na * nb);
}

double contrastive_loss(const Matrix& scores, double temperature) {
  return loss_and_score_grad(scores, temperature, nullptr);
}

BatchNoise draw_batch_noise(std::size_t batch_size, std::size_t n_experts, SeededRng& rng) {
  BatchNoise noise{Matrix(batch_size, n_experts), Matrix(batch_size, n_experts)};
  for (double& v : noise.queries.data()) v = gaussian(rng);
  for (double& v : noise.docs.data()) v = gaussian(rng);
  return noise;
}

BatchResult forward_batch(const HeadParams& params, const Batch& batch, const BatchNoise& noise,
                          const TrainConfig& cfg) {
  BatchTape tape = run_forward(params, batch, noise, cfg.similarity);
  return BatchResult{contrastive_loss(tape.scores, cfg.temperature), std::move(tape.selections)};
}

BatchResult forward_batch(const HeadParams& params, const Batch& batch, SeededRng* rng, const TrainConfig& cfg) {
  const BatchNoise noise =
      rng != nullptr ? draw_batch_noise(batch.size(), params.config.n_experts, *rng) : BatchNoise{};
  return forward_batch(params, batch, noise, cfg);
}

BackwardResult backward_batch(const HeadParams& params, const Batch& batch, const BatchNoise& noise,
                              const TrainConfig& cfg) {
  const BatchTape tape = run_forward(params, batch, noise, cfg.similarity);
  Matrix grad_scores;
  BackwardResult result;
  result.loss = loss_and_score_grad(tape.scores, cfg.temperature, &grad_scores);
  result.grads = GradientSet::zeros_like(params);
  result.expert_selections = tape.selections;

  const std::size_t b = batch.size();
  for (std::size_t i = 0; i < b; ++i) {
    // dL/dq_i = sum_j G_ij d_j
    const Vector grad_unit = matvec_transposed(tape.doc_out, grad_scores.row(i));
    const Vector g = output_grad(tape.query_out.row(i), tape.query_norms[i], grad_unit, cfg.similarity);
    head_backward(params, tape.queries[i], g, result.grads);
  }
  for (std::size_t j = 0; j < b; ++j) {
    Vector grad_unit(params.config.dim, 0.0);
    for (std::size_t i = 0; i < b; ++i) axpy(grad_scores(i, j), tape.query_out.row(i), grad_unit);
    const Vector g = output_grad(tape.doc_out.row(j), tape.doc_norms[j], std::move(grad_unit), cfg.similarity);
    head_backward(params, tape.docs[j], g, result.grads);
  }
  return result;
}

BackwardResult backward_batch(const HeadParams& params, const Batch& batch, SeededRng* rng, const TrainConfig& cfg) {
  const BatchNoise noise =
      rng != nullptr ? draw_batch_noise(batch.size(), params.config.n_experts, *rng) : BatchNoise{};
  return backward_batch(params, batch, noise, cfg);
}

AdamState AdamState::for_params(const HeadParams& params) {
  return AdamState{GradientSet::zeros_like(params), GradientSet::zeros_like(params), 0};
}

void adam_step(HeadParams& params, const GradientSet& grads, AdamState& state, double lr, const AdamOptions& options) {
  const auto p = spans_of(params);
  const auto g = const_spans_of(grads);
  const auto m = spans_of(state.first_moment);
  const auto v = spans_of(state.second_moment);
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
    throw ShapeError("adam_step: parameter and gradient tensor counts differ");
  }
  for (std::size_t t = 0; t < p.size(); ++t) {
    if (p[t].size() != g[t].size() || p[t].size() != m[t].size() || p[t].size() != v[t].size()) {
      throw ShapeError("adam_step: tensor shape mismatch");
    }
    if (!all_finite(g[t])) throw NumericError("adam_step: non-finite gradient");
  }
  ++state.step;
  const double step = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(options.beta1, step);
  const double correction2 = 1.0 - std::pow(options.beta2, step);
  for (std::size_t t = 0; t < p.size(); ++t) {
    for (std::size_t k = 0; k < p[t].size(); ++k) {
      const double gk = g[t][k];
      m[t][k] = options.beta1 * m[t][k] + (1.0 - options.beta1) * gk;
      v[t][k] = options.beta2 * v[t][k] + (1.0 - options.beta2) * gk * gk;
      const double m_hat = m[t][k] / correction1;
      const double v_hat = v[t][k] / correction2;
      p[t][k] -= lr * m_hat / (std::sqrt(v_hat) + options.epsilon);
    }
  }
}

}  // namespace sbmoe
