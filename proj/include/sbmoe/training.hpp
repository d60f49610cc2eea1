#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sbmoe/data_io.hpp"
#include "sbmoe/moe_head.hpp"
#include "sbmoe/numerics.hpp"

namespace sbmoe {

enum class Similarity { kCosine, kDot };

std::string_view to_string(Similarity similarity);
Similarity parse_similarity(std::string_view name);

struct TrainConfig {
  std::size_t batch_size = 64;
  double lr = 1e-4;
  std::size_t epochs = 30;
  double temperature = 0.05;
  double val_fraction = 0.05;
  std::uint64_t seed = 42;
  Pooling pooling = Pooling::kTop1;
  std::size_t n_experts = 6;
  Similarity similarity = Similarity::kCosine;

  void validate() const;
};

// Row i of `docs` is the positive for row i of `queries`; every other row is
// an in-batch negative.
struct Batch {
  Matrix queries;
  Matrix docs;
  std::vector<std::string> query_ids;
  std::vector<std::string> doc_ids;

  std::size_t size() const { return queries.rows(); }
};

Batch make_batch(std::span<const TrainingPair> pairs, const EmbeddingStore& query_store,
                 const EmbeddingStore& doc_store);

double similarity(std::span<const double> a, std::span<const double> b, Similarity kind);

// Mean over rows of -log softmax(scores[i] / temperature)[i].
double contrastive_loss(const Matrix& scores, double temperature);

// Gating noise for one batch: one row of standard normal draws per query and
// per document. Empty matrices mean noise off.
struct BatchNoise {
  Matrix queries;
  Matrix docs;

  bool active() const { return queries.rows() > 0; }
};

// Draws all query rows first, then all document rows.
BatchNoise draw_batch_noise(std::size_t batch_size, std::size_t n_experts, SeededRng& rng);

struct BatchResult {
  double loss = 0.0;
  std::vector<std::size_t> expert_selections;  // argmax counts over queries and docs
};

// Loss of the head applied to every query and document of the batch. With an
// rng the forward pass is a training pass with fresh gating noise.
BatchResult forward_batch(const HeadParams& params, const Batch& batch, SeededRng* rng, const TrainConfig& cfg);
BatchResult forward_batch(const HeadParams& params, const Batch& batch, const BatchNoise& noise,
                          const TrainConfig& cfg);

struct BackwardResult {
  double loss = 0.0;
  GradientSet grads;
  std::vector<std::size_t> expert_selections;
};

// Exact reverse-mode gradient of forward_batch. Noise draws are constants;
// under TOP1 the argmax is a constant and gradients reach the gate through
// the selected probability only.
BackwardResult backward_batch(const HeadParams& params, const Batch& batch, SeededRng* rng, const TrainConfig& cfg);
BackwardResult backward_batch(const HeadParams& params, const Batch& batch, const BatchNoise& noise,
                              const TrainConfig& cfg);

struct AdamState {
  GradientSet first_moment;
  GradientSet second_moment;
  std::uint64_t step = 0;

  static AdamState for_params(const HeadParams& params);
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam update. Throws NumericError on a non-finite gradient
// before touching any parameter.
void adam_step(HeadParams& params, const GradientSet& grads, AdamState& state, double lr,
               const AdamOptions& options = {});

struct Checkpoint {
  HeadParams head;
  std::size_t epoch = 0;
  double val_loss = 0.0;
  TrainConfig config;
};

struct EpochStats {
  std::size_t epoch = 0;
  std::optional<double> train_loss;  // absent for the pre-training evaluation
  double val_loss = 0.0;
  std::vector<std::size_t> expert_selections;
};

struct TrainingDigests {
  std::uint64_t queries = 0;
  std::uint64_t docs = 0;
  std::uint64_t pairs = 0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochStats> history;  // epoch 0 = initialized head
  TrainingDigests digests;
  std::size_t train_pairs = 0;
  std::size_t val_pairs = 0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Seeded train/validation split, Adam over shuffled full batches, and
// noise-free validation after every epoch. Returns the lowest validation
// loss checkpoint, the initialized head included as epoch 0; the earliest
// epoch wins exact ties.
TrainResult train(const std::vector<TrainingPair>& pairs, const TrainConfig& cfg, const EmbeddingStore& query_store,
                  const EmbeddingStore& doc_store, const EpochCallback& on_epoch = {});

// Noise-free loss over `pairs`, in consecutive chunks of `batch_size`; a last
// chunk smaller than 2 is merged into the previous one. Chunk losses are
// weighted by chunk size.
double evaluation_loss(const HeadParams& params, const std::vector<TrainingPair>& pairs, const TrainConfig& cfg,
                       const EmbeddingStore& query_store, const EmbeddingStore& doc_store);

// Model file plus "<stem>.meta.json" with the config, epoch, val loss and
// input digests.
std::filesystem::path meta_path_for(const std::filesystem::path& model_path);
void write_checkpoint(const std::filesystem::path& model_path, const TrainResult& result);

// Absolute error at or below this counts as exact agreement.
inline constexpr double kGradCheckAbsFloor = 1e-8;
double gradient_relative_error(double analytic, double numeric);

struct GradCheckReport {
  struct Group {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t parameters = 0;
  };
  std::vector<Group> groups;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double max_abs_gradient = 0.0;
  std::size_t parameters = 0;
};

// Random unit-norm batch of `cfg.batch_size` pairs at dimension `dim`, a
// head with every tensor perturbed away from its identity initialization,
// gating noise on, and central differences with step `h` over every
// parameter.
GradCheckReport grad_check(const TrainConfig& cfg, std::size_t dim, double h = 1e-5);

// Adds scale * N(0, 1) to every parameter.
void perturb_params(HeadParams& params, SeededRng& rng, double scale);

}  // namespace sbmoe
