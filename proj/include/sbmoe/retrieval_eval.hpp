#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sbmoe/data_io.hpp"
#include "sbmoe/moe_head.hpp"
#include "sbmoe/training.hpp"

namespace sbmoe {

// Head output (noise off) for every entry of `store`; identity when `head`
// is null. Returned row i belongs to store.id(i).
Matrix apply_head(const EmbeddingStore& store, const HeadParams* head, std::size_t threads = 1);

// Exhaustive scoring of every query against every document. Each query gets
// its top-k documents ordered by descending score, ties by ascending doc id.
Run retrieve(const EmbeddingStore& query_store, const EmbeddingStore& doc_store, const HeadParams* head,
             std::size_t k, Similarity kind, std::size_t threads = 1);

enum class Gain { kLinear, kExponential };

struct MetricReport {
  std::string metric;                      // e.g. "ndcg_cut_10"
  std::map<std::string, double> per_query; // queries with >= 1 relevant doc
  double mean = 0.0;
  std::size_t evaluated = 0;
};

// DCG@k = sum_{r<=k} gain(rel_r) / log2(r + 1), normalized by the DCG of the
// ideal ordering of all judged documents. Queries absent from the run score 0.
MetricReport ndcg_at_k(const Run& run, const Qrels& qrels, std::size_t k = 10, Gain gain = Gain::kLinear);

// |relevant in top k| / |relevant|.
MetricReport recall_at_k(const Run& run, const Qrels& qrels, std::size_t k = 100);

// Dispatches "ndcg_cut_<k>" and "recall_<k>".
MetricReport evaluate_metric(const Run& run, const Qrels& qrels, const std::string& metric);

struct TTestResult {
  double t = 0.0;
  std::size_t df = 0;
  double p_two_sided = 1.0;
};

// Paired two-sided Student t-test on a - b. Throws DegenerateVarianceError
// when all differences are identical.
TTestResult paired_ttest(std::span<const double> a, std::span<const double> b);

// CDF of Student's t with `df` degrees of freedom, via the regularized
// incomplete beta function.
double student_t_cdf(double t, double df);
double regularized_incomplete_beta(double a, double b, double x);

struct SignificanceReport {
  std::string metric;
  double mean_a = 0.0;
  double mean_b = 0.0;
  double t = 0.0;
  std::size_t df = 0;
  double p_raw = 1.0;
  double p_corrected = 1.0;
  std::size_t comparisons = 1;
  std::size_t queries = 0;
  bool significant = false;
};

inline constexpr double kSignificanceLevel = 0.05;

double bonferroni(double p, std::size_t comparisons);

// Paired t-test per metric over the queries evaluated in both runs, with
// Bonferroni correction for `comparisons` tests. Metrics with zero-variance
// differences are collected and reported together in one
// DegenerateVarianceError.
std::vector<SignificanceReport> compare_runs(const Run& run_a, const Run& run_b, const Qrels& qrels,
                                             const std::vector<std::string>& metrics, std::size_t comparisons);

}  // namespace sbmoe
