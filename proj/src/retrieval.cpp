#include <algorithm>
#include <string>
#include <thread>

#include "sbmoe/errors.hpp"
#include "sbmoe/retrieval_eval.hpp"

namespace sbmoe {

namespace {

// Runs fn(i) for i in [0, count) over up to `threads` workers. Each index is
// handled by exactly one worker, so results written per index do not depend
// on scheduling.
template <class Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> workers;
  const std::size_t chunk = (count + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (std::size_t i = w * chunk; i < std::min(count, (w + 1) * chunk); ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void normalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const double n = norm(row);
    if (!(n > 0.0)) throw NumericError("cosine similarity of a zero-norm embedding (row " + std::to_string(i) + ")");
    for (double& v : row) v /= n;
  }
}

}  // namespace

Matrix apply_head(const EmbeddingStore& store, const HeadParams* head, std::size_t threads) {
  if (head != nullptr && head->config.dim != store.dim()) {
    throw ShapeError("head dimension " + std::to_string(head->config.dim) + " does not match store dimension " +
                     std::to_string(store.dim()));
  }
  Matrix out(store.size(), store.dim());
  parallel_for(store.size(), threads, [&](std::size_t i) {
    const auto x = store.vector(i);
    auto row = out.row(i);
    if (head == nullptr) {
      std::copy(x.begin(), x.end(), row.begin());
    } else {
      const Vector y = head_forward(*head, x).output;
      std::copy(y.begin(), y.end(), row.begin());
    }
  });
  return out;
}

Run retrieve(const EmbeddingStore& query_store, const EmbeddingStore& doc_store, const HeadParams* head,
             std::size_t k, Similarity kind, std::size_t threads) {
  if (k < 1) throw ConfigError("retrieve: k must be at least 1");
  if (query_store.dim() != doc_store.dim()) {
    throw ShapeError("query dimension " + std::to_string(query_store.dim()) + " does not match document dimension " +
                     std::to_string(doc_store.dim()));
  }
  Matrix queries = apply_head(query_store, head, threads);
  Matrix docs = apply_head(doc_store, head, threads);
  if (kind == Similarity::kCosine) {
    normalize_rows(queries);
    normalize_rows(docs);
  }
  const std::size_t keep = std::min(k, doc_store.size());
  std::vector<std::vector<ScoredDoc>> ranked(query_store.size());
  parallel_for(query_store.size(), threads, [&](std::size_t qi) {
    std::vector<std::pair<double, std::size_t>> scored(doc_store.size());
    for (std::size_t di = 0; di < doc_store.size(); ++di) scored[di] = {dot(queries.row(qi), docs.row(di)), di};
    const auto better = [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return doc_store.id(a.second) < doc_store.id(b.second);
    };
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), better);
    auto& out = ranked[qi];
    out.reserve(keep);
    for (std::size_t r = 0; r < keep; ++r) out.push_back(ScoredDoc{doc_store.id(scored[r].second), scored[r].first});
  });
  Run run;
  for (std::size_t qi = 0; qi < query_store.size(); ++qi) run.emplace(query_store.id(qi), std::move(ranked[qi]));
  return run;
}

}  // namespace sbmoe
