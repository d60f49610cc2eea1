#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <string>

#include "json.hpp"

#include "sbmoe/detail/binary_io.hpp"
#include "sbmoe/errors.hpp"
#include "sbmoe/training.hpp"

namespace sbmoe {

namespace {

// Independent random streams derived from the one user-facing seed.
enum Stream : std::uint64_t { kInitStream = 0, kSplitStream = 1, kShuffleStream = 2, kNoiseStream = 5 };

std::uint64_t digest_pairs(const std::vector<TrainingPair>& pairs) {
  std::uint64_t h = fnv1a64("");
  for (const auto& p : pairs) {
    h = fnv1a64(p.query_id, h);
    h = fnv1a64(std::string_view("\t", 1), h);
    h = fnv1a64(p.doc_id, h);
    h = fnv1a64(std::string_view("\n", 1), h);
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::pair<std::size_t, std::size_t>> chunk_ranges(std::size_t count, std::size_t batch_size) {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t begin = 0; begin < count; begin += batch_size) {
    ranges.emplace_back(begin, std::min(count, begin + batch_size));
  }
  if (ranges.size() > 1 && ranges.back().second - ranges.back().first < 2) {
    ranges[ranges.size() - 2].second = ranges.back().second;
    ranges.pop_back();
  }
  return ranges;
}

}  // namespace

double evaluation_loss(const HeadParams& params, const std::vector<TrainingPair>& pairs, const TrainConfig& cfg,
                       const EmbeddingStore& query_store, const EmbeddingStore& doc_store) {
  if (pairs.size() < 2) throw ConfigError("evaluation needs at least 2 pairs");
  double weighted = 0.0;
  for (const auto& [begin, end] : chunk_ranges(pairs.size(), cfg.batch_size)) {
    const std::span<const TrainingPair> chunk(pairs.data() + begin, end - begin);
    const Batch batch = make_batch(chunk, query_store, doc_store);
    weighted += static_cast<double>(chunk.size()) * forward_batch(params, batch, BatchNoise{}, cfg).loss;
  }
  return weighted / static_cast<double>(pairs.size());
}

TrainResult train(const std::vector<TrainingPair>& pairs, const TrainConfig& cfg, const EmbeddingStore& query_store,
                  const EmbeddingStore& doc_store, const EpochCallback& on_epoch) {
  cfg.validate();
  if (query_store.dim() != doc_store.dim()) {
    throw ShapeError("query store dimension " + std::to_string(query_store.dim()) +
                     " differs from document store dimension " + std::to_string(doc_store.dim()));
  }
  for (const auto& p : pairs) {
    if (!query_store.find(p.query_id)) throw DataError("training pair references unknown query id '" + p.query_id + "'");
    if (!doc_store.find(p.doc_id)) throw DataError("training pair references unknown document id '" + p.doc_id + "'");
  }

  TrainResult result;
  result.digests = TrainingDigests{fnv1a64(encode_store(query_store)), fnv1a64(encode_store(doc_store)),
                                   digest_pairs(pairs)};

  std::vector<TrainingPair> shuffled = pairs;
  SeededRng split_rng(cfg.seed, kSplitStream);
  shuffle(shuffled, split_rng);
  const auto n_val = static_cast<std::size_t>(std::ceil(cfg.val_fraction * static_cast<double>(pairs.size())));
  if (n_val < 2) {
    throw ConfigError("validation split holds " + std::to_string(n_val) + " pairs; at least 2 are required");
  }
  if (pairs.size() < n_val + 2) throw ConfigError("fewer than 2 training pairs remain after the validation split");
  std::vector<TrainingPair> train_set(shuffled.begin(), shuffled.end() - static_cast<std::ptrdiff_t>(n_val));
  const std::vector<TrainingPair> val_set(shuffled.end() - static_cast<std::ptrdiff_t>(n_val), shuffled.end());
  result.train_pairs = train_set.size();
  result.val_pairs = val_set.size();
  const std::size_t batch_size = std::min(cfg.batch_size, train_set.size());

  HeadConfig head_config{query_store.dim(), cfg.n_experts, cfg.pooling};
  SeededRng init_rng(cfg.seed, kInitStream);
  HeadParams head = init_head(head_config, init_rng);
  AdamState adam = AdamState::for_params(head);
  SeededRng shuffle_rng(cfg.seed, kShuffleStream);
  SeededRng noise_rng(cfg.seed, kNoiseStream);

  EpochStats initial;
  initial.val_loss = evaluation_loss(head, val_set, cfg, query_store, doc_store);
  initial.expert_selections.assign(cfg.n_experts, 0);
  result.history.push_back(initial);
  result.best = Checkpoint{head, 0, initial.val_loss, cfg};
  if (on_epoch) on_epoch(initial);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(train_set, shuffle_rng);
    EpochStats stats;
    stats.epoch = epoch;
    stats.expert_selections.assign(cfg.n_experts, 0);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin + batch_size <= train_set.size(); begin += batch_size) {
      const Batch batch = make_batch({train_set.data() + begin, batch_size}, query_store, doc_store);
      BackwardResult step = backward_batch(head, batch, &noise_rng, cfg);
      adam_step(head, step.grads, adam, cfg.lr);
      loss_sum += step.loss;
      ++steps;
      for (std::size_t i = 0; i < cfg.n_experts; ++i) stats.expert_selections[i] += step.expert_selections[i];
    }
    stats.train_loss = loss_sum / static_cast<double>(steps);
    stats.val_loss = evaluation_loss(head, val_set, cfg, query_store, doc_store);
    if (!std::isfinite(stats.val_loss)) throw NumericError("validation loss became non-finite");
    if (stats.val_loss < result.best.val_loss) result.best = Checkpoint{head, epoch, stats.val_loss, cfg};
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return result;
}

std::filesystem::path meta_path_for(const std::filesystem::path& model_path) {
  std::filesystem::path meta = model_path;
  meta.replace_extension(".meta.json");
  return meta;
}

void write_checkpoint(const std::filesystem::path& model_path, const TrainResult& result) {
  write_model(model_path, result.best.head);
  const TrainConfig& c = result.best.config;
  nlohmann::ordered_json meta;
  meta["model"] = model_path.filename().string();
  meta["train_config"] = {
      {"batch_size", c.batch_size},   {"lr", c.lr},
      {"epochs", c.epochs},           {"temperature", c.temperature},
      {"val_fraction", c.val_fraction}, {"seed", c.seed},
      {"pooling", to_string(c.pooling)}, {"n_experts", c.n_experts},
      {"similarity", to_string(c.similarity)},
  };
  meta["dim"] = result.best.head.config.dim;
  meta["epoch"] = result.best.epoch;
  meta["val_loss"] = result.best.val_loss;
  meta["train_pairs"] = result.train_pairs;
  meta["val_pairs"] = result.val_pairs;
  meta["digests"] = {{"algorithm", "fnv1a64"},
                     {"queries", hex64(result.digests.queries)},
                     {"docs", hex64(result.digests.docs)},
                     {"pairs", hex64(result.digests.pairs)}};
  detail::write_file(meta_path_for(model_path), meta.dump(2) + "\n");
}

void perturb_params(HeadParams& params, SeededRng& rng, double scale) {
  for_each_tensor(params, [&](std::string_view, int, std::span<double> t) {
    for (double& v : t) v += scale * gaussian(rng);
  });
}

double gradient_relative_error(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= kGradCheckAbsFloor) return 0.0;
  return diff / std::max(std::abs(analytic), std::abs(numeric));
}

GradCheckReport grad_check(const TrainConfig& cfg, std::size_t dim, double h) {
  cfg.validate();
  const HeadConfig head_config{dim, cfg.n_experts, cfg.pooling};
  SeededRng rng(cfg.seed, kInitStream);
  HeadParams head = init_head(head_config, rng);
  perturb_params(head, rng, 0.3);

  Batch batch{Matrix(cfg.batch_size, dim), Matrix(cfg.batch_size, dim), {}, {}};
  for (Matrix* m : {&batch.queries, &batch.docs}) {
    for (std::size_t i = 0; i < m->rows(); ++i) {
      auto row = m->row(i);
      for (double& v : row) v = gaussian(rng);
      const double n = norm(row);
      for (double& v : row) v /= n;
    }
  }
  const BatchNoise noise = draw_batch_noise(cfg.batch_size, cfg.n_experts, rng);

  const BackwardResult analytic = backward_batch(head, batch, noise, cfg);
  HeadParams probe = head;
  const auto loss_at = [&](std::span<const double> flat) {
    unflatten(flat, probe);
    return forward_batch(probe, batch, noise, cfg).loss;
  };
  const Vector numeric = finite_difference_gradient(loss_at, flatten(head), h);

  GradCheckReport report;
  std::map<std::string, std::size_t> group_index;
  std::size_t pos = 0;
  for_each_tensor(analytic.grads, [&](std::string_view name, int, std::span<const double> t) {
    auto [it, inserted] = group_index.emplace(std::string(name), report.groups.size());
    if (inserted) report.groups.push_back({std::string(name), 0.0, 0});
    auto& group = report.groups[it->second];
    for (double a : t) {
      report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric[pos]));
      report.max_abs_gradient = std::max(report.max_abs_gradient, std::abs(a));
      const double err = gradient_relative_error(a, numeric[pos++]);
      group.max_rel_error = std::max(group.max_rel_error, err);
      ++group.parameters;
    }
  });
  for (const auto& g : report.groups) {
    report.max_rel_error = std::max(report.max_rel_error, g.max_rel_error);
    report.parameters += g.parameters;
  }
  return report;
}

}  // namespace sbmoe
