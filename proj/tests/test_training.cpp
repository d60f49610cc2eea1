#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "sbmoe/data_io.hpp"
#include "sbmoe/errors.hpp"
#include "sbmoe/training.hpp"

using namespace sbmoe;
using doctest::Approx;

namespace {

SyntheticData small_task() {
  SyntheticSpec spec;
  spec.dim = 8;
  spec.n_domains = 2;
  spec.docs_per_domain = 60;
  spec.queries_per_domain = 50;
  return generate_synthetic(spec);
}

TrainConfig small_config(Pooling pooling, std::size_t epochs) {
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.epochs = epochs;
  cfg.lr = 1e-2;
  cfg.n_experts = 3;
  cfg.pooling = pooling;
  cfg.val_fraction = 0.1;
  return cfg;
}

Batch random_batch(std::size_t b, std::size_t d, SeededRng& rng) {
  Batch batch{Matrix(b, d), Matrix(b, d), {}, {}};
  for (Matrix* m : {&batch.queries, &batch.docs}) {
    for (double& v : m->data()) v = gaussian(rng);
  }
  return batch;
}

double raw_loss(const Batch& batch, const TrainConfig& cfg) {
  Matrix scores(batch.size(), batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t j = 0; j < batch.size(); ++j) {
      scores(i, j) = similarity(batch.queries.row(i), batch.docs.row(j), cfg.similarity);
    }
  }
  return contrastive_loss(scores, cfg.temperature);
}

Vector flat_grads(const GradientSet& g) {
  Vector out;
  for_each_tensor(g, [&](std::string_view, int, std::span<const double> t) { out.insert(out.end(), t.begin(), t.end()); });
  return out;
}

}  // namespace

TEST_CASE("similarity") {
  const Vector v{0.3, -1.2, 2.0};
  const Vector neg{-0.3, 1.2, -2.0};
  CHECK(similarity(v, v, Similarity::kCosine) == Approx(1.0).epsilon(1e-15));
  CHECK(similarity(v, neg, Similarity::kCosine) == Approx(-1.0).epsilon(1e-15));
  CHECK(similarity(Vector{1, 0}, Vector{1, 1}, Similarity::kCosine) == Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(similarity(Vector{1, 2}, Vector{3, 4}, Similarity::kDot) == 11.0);
  CHECK_THROWS_AS(similarity(Vector{0, 0}, Vector{1, 1}, Similarity::kCosine), NumericError);
  CHECK_THROWS_AS(similarity(Vector{1}, Vector{1, 1}, Similarity::kDot), ShapeError);
}

TEST_CASE("contrastive loss closed forms") {
  CHECK(contrastive_loss(Matrix(2, 2, 0.3), 0.05) == Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(contrastive_loss(Matrix(64, 64, -0.7), 0.05) == Approx(std::log(64.0)).epsilon(1e-15));
  const double sharp = contrastive_loss(Matrix::identity(2), 0.05);
  CHECK(sharp == Approx(std::log1p(std::exp(-20.0))).epsilon(1e-12));
  CHECK(sharp == Approx(2.06e-9).epsilon(1e-3));
  CHECK_THROWS_AS(contrastive_loss(Matrix(2, 3), 0.05), ShapeError);
  CHECK_THROWS_AS(contrastive_loss(Matrix(1, 1), 0.05), ShapeError);
  Matrix bad(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(contrastive_loss(bad, 0.05), NumericError);
}

TEST_CASE("loss depends only on score over temperature") {
  SeededRng rng(3);
  Matrix s(5, 5);
  for (double& v : s.data()) v = gaussian(rng);
  Matrix scaled = s;
  for (double& v : scaled.data()) v *= 3.5;
  CHECK(contrastive_loss(s, 0.2) == Approx(contrastive_loss(scaled, 0.7)).epsilon(1e-13));
  CHECK(contrastive_loss(s, 0.2) >= 0.0);
}

TEST_CASE("initialized head reproduces the raw-embedding loss") {
  SeededRng rng(42);
  for (Similarity sim : {Similarity::kCosine, Similarity::kDot}) {
    TrainConfig cfg;
    cfg.pooling = Pooling::kAll;
    cfg.similarity = sim;
    const HeadParams head = init_head({8, 4, Pooling::kAll}, rng);
    const Batch batch = random_batch(6, 8, rng);
    CHECK(std::abs(forward_batch(head, batch, nullptr, cfg).loss - raw_loss(batch, cfg)) <= 1e-12);
  }
}

TEST_CASE("duplicated rows give ln B") {
  SeededRng rng(8);
  TrainConfig cfg;
  cfg.n_experts = 3;
  HeadParams head = init_head({6, 3, Pooling::kTop1}, rng);
  perturb_params(head, rng, 0.3);
  Batch batch{Matrix(5, 6), Matrix(5, 6), {}, {}};
  const Vector q{0.1, 0.5, -0.3, 0.8, 0.0, 0.2};
  const Vector d{-0.4, 0.1, 0.9, 0.3, 0.6, -0.2};
  for (std::size_t i = 0; i < 5; ++i) {
    std::copy(q.begin(), q.end(), batch.queries.row(i).begin());
    std::copy(d.begin(), d.end(), batch.docs.row(i).begin());
  }
  const BackwardResult r = backward_batch(head, batch, nullptr, cfg);
  CHECK(r.loss == Approx(std::log(5.0)).epsilon(1e-14));
  // Identical rows make every score equal: a stationary point.
  double sq = 0.0;
  for (double g : flat_grads(r.grads)) sq += g * g;
  CHECK(std::sqrt(sq) < 1e-8);
}

TEST_CASE("forward_batch golden value") {
  // d=8, B=4, n=2, ALL, seed 42; captured after the gradient checks passed.
  SyntheticSpec spec;
  spec.dim = 8;
  spec.n_domains = 1;
  spec.docs_per_domain = 4;
  spec.queries_per_domain = 4;
  const SyntheticData data = generate_synthetic(spec);
  const auto pairs = pairs_from_qrels(data.qrels);
  const Batch batch = make_batch(pairs, data.queries, data.docs);
  TrainConfig cfg;
  cfg.pooling = Pooling::kAll;
  cfg.n_experts = 2;
  SeededRng rng(42);
  HeadParams head = init_head({8, 2, Pooling::kAll}, rng);
  perturb_params(head, rng, 0.3);
  const BatchResult r = forward_batch(head, batch, nullptr, cfg);
  CHECK(r.loss == Approx(5.562724181016689).epsilon(1e-12));
  CHECK(r.expert_selections.size() == 2);
  CHECK(r.expert_selections[0] + r.expert_selections[1] == 8);
}

TEST_CASE("gradients match central differences") {
  for (Pooling pooling : {Pooling::kTop1, Pooling::kAll}) {
    for (Similarity sim : {Similarity::kCosine, Similarity::kDot}) {
      for (std::size_t n : {1, 3}) {
        TrainConfig cfg;
        cfg.batch_size = 4;
        cfg.pooling = pooling;
        cfg.similarity = sim;
        cfg.n_experts = n;
        const GradCheckReport report = grad_check(cfg, 8, 1e-5);
        CAPTURE(to_string(pooling));
        CAPTURE(to_string(sim));
        CAPTURE(n);
        CHECK(report.max_rel_error <= 1e-4);
        CHECK(report.max_abs_error <= 1e-7);
        CHECK(report.max_abs_gradient > 1e-2);
        CHECK(report.parameters == param_count({8, n, pooling}).total);
      }
    }
  }
}

TEST_CASE("relative error definition") {
  CHECK(gradient_relative_error(1.0, 1.0 + 1e-9) == 0.0);
  CHECK(gradient_relative_error(0.0, 5e-9) == 0.0);
  CHECK(gradient_relative_error(2.0, 1.0) == 0.5);
  CHECK(gradient_relative_error(-1e-3, 1e-3) == 2.0);
}

TEST_CASE("unselected top1 experts get no gradient") {
  SeededRng rng(90);
  TrainConfig cfg;
  cfg.n_experts = 4;
  HeadParams head = init_head({6, 4, Pooling::kTop1}, rng);
  perturb_params(head, rng, 0.3);
  for (double& v : head.gate.w_out.data()) v = 0.0;
  head.gate.b_out = {0.0, 3.0, 0.0, 0.0};
  const Batch batch = random_batch(4, 6, rng);
  const BackwardResult r = backward_batch(head, batch, nullptr, cfg);
  CHECK(r.expert_selections == std::vector<std::size_t>{0, 8, 0, 0});
  for (std::size_t i : {0, 2, 3}) {
    for (double g : r.grads.experts[i].w_up.data()) CHECK(g == 0.0);
    for (double g : r.grads.experts[i].w_down.data()) CHECK(g == 0.0);
  }
  bool nonzero = false;
  for (double g : r.grads.experts[1].w_up.data()) nonzero = nonzero || g != 0.0;
  CHECK(nonzero);
}

TEST_CASE("single expert gives the same gradients under both poolings") {
  SeededRng rng(91);
  HeadParams head = init_head({8, 1, Pooling::kTop1}, rng);
  perturb_params(head, rng, 0.3);
  const Batch batch = random_batch(4, 8, rng);
  TrainConfig cfg;
  cfg.n_experts = 1;
  const BackwardResult top1 = backward_batch(head, batch, nullptr, cfg);
  head.config.pooling = Pooling::kAll;
  cfg.pooling = Pooling::kAll;
  const BackwardResult all = backward_batch(head, batch, nullptr, cfg);
  CHECK(top1.loss == Approx(all.loss).epsilon(1e-14));
  const Vector a = flat_grads(top1.grads);
  const Vector b = flat_grads(all.grads);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-12);
}

TEST_CASE("noise draws are reused between forward and backward") {
  SeededRng rng(92);
  TrainConfig cfg;
  cfg.n_experts = 3;
  HeadParams head = init_head({8, 3, Pooling::kTop1}, rng);
  perturb_params(head, rng, 0.3);
  const Batch batch = random_batch(4, 8, rng);
  SeededRng a(5, 5);
  SeededRng b(5, 5);
  const BatchNoise noise = draw_batch_noise(4, 3, a);
  CHECK(noise.active());
  CHECK(forward_batch(head, batch, noise, cfg).loss == backward_batch(head, batch, &b, cfg).loss);
}

TEST_CASE("adam") {
  SeededRng rng(1);
  HeadParams head = init_head({2, 1, Pooling::kTop1}, rng);
  const HeadParams before = head;
  GradientSet zero = GradientSet::zeros_like(head);
  AdamState state = AdamState::for_params(head);
  adam_step(head, zero, state, 0.1);
  CHECK(head == before);

  GradientSet g = GradientSet::zeros_like(head);
  g.experts[0].b_up = {0.5, 0.5};
  g.gate.b_out = {0.5};
  AdamState fresh = AdamState::for_params(head);
  adam_step(head, g, fresh, 0.1);
  const double expected = -0.1 * 0.5 / (0.5 + 1e-8);
  CHECK(head.experts[0].b_up[0] == Approx(expected).epsilon(1e-14));
  CHECK(head.experts[0].b_up[0] == Approx(-0.1).epsilon(1e-6));
  CHECK(head.experts[0].b_up[1] == head.experts[0].b_up[0]);
  CHECK(head.gate.b_out[0] - before.gate.b_out[0] == head.experts[0].b_up[0]);
  CHECK(fresh.step == 1);

  g.gate.b_noise = {std::nan("")};
  const HeadParams snapshot = head;
  CHECK_THROWS_AS(adam_step(head, g, fresh, 0.1), NumericError);
  CHECK(head == snapshot);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.val_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.n_experts = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_similarity("dot") == Similarity::kDot);
  CHECK_THROWS_AS(parse_similarity("l2"), ConfigError);
}

TEST_CASE("zero epochs returns the initialized head") {
  const SyntheticData data = small_task();
  const TrainConfig cfg = small_config(Pooling::kAll, 0);
  const TrainResult r = train(pairs_from_qrels(data.qrels), cfg, data.queries, data.docs);
  SeededRng rng(cfg.seed, 0);
  CHECK(r.best.head == init_head({8, 3, Pooling::kAll}, rng));
  CHECK(r.best.epoch == 0);
  CHECK(r.history.size() == 1);
  CHECK_FALSE(r.history[0].train_loss.has_value());
  CHECK(r.val_pairs == 10);
  CHECK(r.train_pairs == 90);
}

TEST_CASE("training is reproducible and keeps the best validation epoch") {
  const SyntheticData data = small_task();
  const auto pairs = pairs_from_qrels(data.qrels);
  for (Pooling pooling : {Pooling::kTop1, Pooling::kAll}) {
    const TrainConfig cfg = small_config(pooling, 8);
    const TrainResult a = train(pairs, cfg, data.queries, data.docs);
    const TrainResult b = train(pairs, cfg, data.queries, data.docs);
    CHECK(a.best.head == b.best.head);
    CHECK(encode_model(a.best.head) == encode_model(b.best.head));
    CHECK(a.history.size() == 9);
    std::size_t argmin = 0;
    for (std::size_t e = 0; e < a.history.size(); ++e) {
      if (a.history[e].val_loss < a.history[argmin].val_loss) argmin = e;
    }
    CHECK(a.best.epoch == argmin);
    CHECK(a.best.val_loss == a.history[argmin].val_loss);
    CHECK(a.history.back().val_loss < a.history.front().val_loss);
    // Validation is noise-free, so re-evaluating the checkpoint is exact.
    std::vector<TrainingPair> shuffled = pairs;
    SeededRng split(cfg.seed, 1);
    shuffle(shuffled, split);
    const std::vector<TrainingPair> val(shuffled.end() - static_cast<std::ptrdiff_t>(a.val_pairs), shuffled.end());
    const double v1 = evaluation_loss(a.best.head, val, cfg, data.queries, data.docs);
    CHECK(v1 == a.best.val_loss);
    CHECK(evaluation_loss(a.best.head, val, cfg, data.queries, data.docs) == v1);
  }
}

TEST_CASE("training input errors") {
  const SyntheticData data = small_task();
  auto pairs = pairs_from_qrels(data.qrels);
  const TrainConfig cfg = small_config(Pooling::kTop1, 1);
  auto broken = pairs;
  broken[3].doc_id = "missing-doc";
  CHECK_THROWS_WITH_AS(train(broken, cfg, data.queries, data.docs), doctest::Contains("missing-doc"), DataError);
  const std::vector<TrainingPair> few(pairs.begin(), pairs.begin() + 3);
  CHECK_THROWS_AS(train(few, cfg, data.queries, data.docs), ConfigError);
  CHECK_THROWS_AS(train(pairs, cfg, data.queries, EmbeddingStore(4)), ShapeError);
}

TEST_CASE("checkpoint files") {
  const SyntheticData data = small_task();
  const TrainResult r = train(pairs_from_qrels(data.qrels), small_config(Pooling::kAll, 2), data.queries, data.docs);
  const auto dir = std::filesystem::temp_directory_path() / "sbmoe_test_training";
  std::filesystem::create_directories(dir);
  const auto model = dir / "head.sbmh";
  write_checkpoint(model, r);
  CHECK(meta_path_for(model) == dir / "head.meta.json");
  CHECK(read_model(model) == quantize_to_f32(r.best.head));
  std::ifstream in(meta_path_for(model));
  const auto meta = nlohmann::json::parse(in);
  CHECK(meta["epoch"] == r.best.epoch);
  CHECK(meta["train_config"]["pooling"] == "all");
  CHECK(meta["digests"]["algorithm"] == "fnv1a64");
  std::filesystem::remove_all(dir);
}
