#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "sbmoe/errors.hpp"
#include "sbmoe/retrieval_eval.hpp"

namespace sbmoe {

namespace {

double gain_of(int grade, Gain gain) {
  return gain == Gain::kLinear ? static_cast<double>(grade) : std::exp2(static_cast<double>(grade)) - 1.0;
}

int grade_of(const std::map<std::string, int>& judged, const std::string& doc_id) {
  const auto it = judged.find(doc_id);
  return it == judged.end() ? 0 : it->second;
}

bool has_relevant(const std::map<std::string, int>& judged) {
  return std::any_of(judged.begin(), judged.end(), [](const auto& kv) { return kv.second > 0; });
}

const std::vector<ScoredDoc>& ranking_for(const Run& run, const std::string& qid) {
  static const std::vector<ScoredDoc> kEmpty;
  const auto it = run.find(qid);
  return it == run.end() ? kEmpty : it->second;
}

void finish(MetricReport& report) {
  report.evaluated = report.per_query.size();
  double sum = 0.0;
  for (const auto& [qid, v] : report.per_query) sum += v;
  report.mean = report.evaluated == 0 ? 0.0 : sum / static_cast<double>(report.evaluated);
}

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIterations = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIterations; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

}  // namespace

MetricReport ndcg_at_k(const Run& run, const Qrels& qrels, std::size_t k, Gain gain) {
  if (k < 1) throw ConfigError("ndcg cutoff must be at least 1");
  MetricReport report;
  report.metric = "ndcg_cut_" + std::to_string(k);
  for (const auto& [qid, judged] : qrels) {
    if (!has_relevant(judged)) continue;
    const auto& ranking = ranking_for(run, qid);
    double dcg = 0.0;
    for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) {
      dcg += gain_of(grade_of(judged, ranking[r].doc_id), gain) / std::log2(static_cast<double>(r) + 2.0);
    }
    std::vector<int> ideal;
    for (const auto& [did, grade] : judged) ideal.push_back(grade);
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    double idcg = 0.0;
    for (std::size_t r = 0; r < std::min(k, ideal.size()); ++r) {
      idcg += gain_of(ideal[r], gain) / std::log2(static_cast<double>(r) + 2.0);
    }
    report.per_query[qid] = dcg / idcg;
  }
  finish(report);
  return report;
}

MetricReport recall_at_k(const Run& run, const Qrels& qrels, std::size_t k) {
  if (k < 1) throw ConfigError("recall cutoff must be at least 1");
  MetricReport report;
  report.metric = "recall_" + std::to_string(k);
  for (const auto& [qid, judged] : qrels) {
    std::size_t relevant = 0;
    for (const auto& [did, grade] : judged) relevant += grade > 0 ? 1 : 0;
    if (relevant == 0) continue;
    const auto& ranking = ranking_for(run, qid);
    std::size_t found = 0;
    for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) found += grade_of(judged, ranking[r].doc_id) > 0;
    report.per_query[qid] = static_cast<double>(found) / static_cast<double>(relevant);
  }
  finish(report);
  return report;
}

MetricReport evaluate_metric(const Run& run, const Qrels& qrels, const std::string& metric) {
  const auto cutoff = [&](std::string_view prefix) -> std::size_t {
    const std::string digits = metric.substr(prefix.size());
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw ConfigError("bad metric cutoff in '" + metric + "'");
    }
    return std::stoul(digits);
  };
  if (metric.rfind("ndcg_cut_", 0) == 0) return ndcg_at_k(run, qrels, cutoff("ndcg_cut_"));
  if (metric.rfind("recall_", 0) == 0) return recall_at_k(run, qrels, cutoff("recall_"));
  throw ConfigError("unknown metric '" + metric + "' (expected ndcg_cut_<k> or recall_<k>)");
}

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw NumericError("incomplete beta: parameters must be positive");
  if (x < 0.0 || x > 1.0 || std::isnan(x)) throw NumericError("incomplete beta: x outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw NumericError("student t: degrees of freedom must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t > 0.0 ? 1.0 - tail : tail;
}

TTestResult paired_ttest(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("paired t-test: samples differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw DataError("paired t-test needs at least 2 paired observations");
  Vector diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = a[i] - b[i];
  double mean = 0.0;
  for (double d : diff) mean += d;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double d : diff) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
    throw DegenerateVarianceError("paired t-test: differences have zero variance");
  }
  TTestResult r;
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.df = n - 1;
  // Two-sided p = I_{df/(df+t^2)}(df/2, 1/2).
  const double df = static_cast<double>(r.df);
  r.p_two_sided = regularized_incomplete_beta(0.5 * df, 0.5, df / (df + r.t * r.t));
  return r;
}

double bonferroni(double p, std::size_t comparisons) {
  if (comparisons < 1) throw ConfigError("number of comparisons must be at least 1");
  return std::min(1.0, static_cast<double>(comparisons) * p);
}

std::vector<SignificanceReport> compare_runs(const Run& run_a, const Run& run_b, const Qrels& qrels,
                                             const std::vector<std::string>& metrics, std::size_t comparisons) {
  if (comparisons < 1) throw ConfigError("number of comparisons must be at least 1");
  std::vector<SignificanceReport> reports;
  std::string degenerate;
  for (const std::string& metric : metrics) {
    const MetricReport ra = evaluate_metric(run_a, qrels, metric);
    const MetricReport rb = evaluate_metric(run_b, qrels, metric);
    Vector a;
    Vector b;
    for (const auto& [qid, va] : ra.per_query) {
      const auto it = rb.per_query.find(qid);
      if (it == rb.per_query.end() || !run_a.contains(qid) || !run_b.contains(qid)) continue;
      a.push_back(va);
      b.push_back(it->second);
    }
    if (a.size() < 2) {
      throw DataError("runs share " + std::to_string(a.size()) + " judged queries for " + metric + "; need at least 2");
    }
    SignificanceReport rep;
    rep.metric = metric;
    rep.comparisons = comparisons;
    rep.queries = a.size();
    for (std::size_t i = 0; i < a.size(); ++i) {
      rep.mean_a += a[i];
      rep.mean_b += b[i];
    }
    rep.mean_a /= static_cast<double>(a.size());
    rep.mean_b /= static_cast<double>(b.size());
    try {
      const TTestResult t = paired_ttest(a, b);
      rep.t = t.t;
      rep.df = t.df;
      rep.p_raw = t.p_two_sided;
    } catch (const DegenerateVarianceError&) {
      degenerate += (degenerate.empty() ? "" : ", ") + metric;
      continue;
    }
    rep.p_corrected = bonferroni(rep.p_raw, comparisons);
    rep.significant = rep.p_corrected < kSignificanceLevel;
    reports.push_back(rep);
  }
  if (!degenerate.empty()) {
    throw DegenerateVarianceError("paired differences have zero variance for: " + degenerate);
  }
  return reports;
}

}  // namespace sbmoe
