#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "sbmoe/cli.hpp"
#include "sbmoe/data_io.hpp"
#include "sbmoe/errors.hpp"
#include "sbmoe/moe_head.hpp"
#include "sbmoe/retrieval_eval.hpp"
#include "sbmoe/training.hpp"

namespace sbmoe::cli {

namespace {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

using Register = std::function<void(CLI::App*, std::function<void()>)>;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

Json selections_json(const std::vector<std::size_t>& counts) { return Json(counts); }

Json metric_json(const MetricReport& r, bool per_query) {
  Json j;
  j["metric"] = r.metric;
  j["mean"] = r.mean;
  j["evaluated"] = r.evaluated;
  if (per_query) {
    Json q = Json::object();
    for (const auto& [qid, v] : r.per_query) q[qid] = v;
    j["per_query"] = std::move(q);
  }
  return j;
}

// Options shared by `train` and `sweep`.
struct TrainFlags {
  std::string queries;
  std::string docs;
  std::string qrels;
  std::string pooling = "top1";
  std::string similarity = "cosine";
  TrainConfig cfg;

  void add_to(CLI::App& app) {
    app.add_option("--queries", queries, "Query embedding store (SBMV)")->required();
    app.add_option("--docs", docs, "Document embedding store (SBMV)")->required();
    app.add_option("--qrels", qrels, "Training qrels; every grade > 0 is a (query, doc) pair")
        ->required()
        ;
    app.add_option("--pooling", pooling, "Expert pooling: top1 or all")->capture_default_str();
    app.add_option("--epochs", cfg.epochs, "Training epochs")->capture_default_str();
    app.add_option("--batch-size", cfg.batch_size, "Pairs per batch (in-batch negatives)")->capture_default_str();
    app.add_option("--lr", cfg.lr, "Adam learning rate")->capture_default_str();
    app.add_option("--temperature", cfg.temperature, "Contrastive loss temperature")->capture_default_str();
    app.add_option("--val-frac", cfg.val_fraction, "Fraction of pairs held out for validation")
        ->capture_default_str();
    app.add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
    app.add_option("--similarity", similarity, "Similarity: cosine or dot")->capture_default_str();
  }

  TrainConfig resolve() {
    cfg.pooling = parse_pooling(pooling);
    cfg.similarity = parse_similarity(similarity);
    cfg.validate();
    return cfg;
  }
};

struct LoadedData {
  EmbeddingStore queries;
  EmbeddingStore docs;
  Qrels qrels;
};

LoadedData load_training_data(const TrainFlags& f, std::ostream& err) {
  LoadedData data{read_store(f.queries), read_store(f.docs), {}};
  ParseStats stats;
  data.qrels = parse_qrels(fs::path(f.qrels), &stats);
  if (stats.duplicates > 0) err << "warning: " << stats.duplicates << " duplicate qrels lines (last grade kept)\n";
  return data;
}

// Queries of `store` that are judged in `qrels`.
EmbeddingStore judged_queries(const EmbeddingStore& store, const Qrels& qrels) {
  return store.filter([&](const std::string& id) { return qrels.contains(id); });
}

Json epoch_json(const EpochStats& s) {
  Json j;
  j["epoch"] = s.epoch;
  j["train_loss"] = s.train_loss ? Json(*s.train_loss) : Json(nullptr);
  j["val_loss"] = s.val_loss;
  j["expert_selections"] = selections_json(s.expert_selections);
  return j;
}

void run_gen_synthetic(CLI::App& app, std::ostream& out, const Register& on) {
  struct Flags {
    SyntheticSpec spec;
    std::string spec_json;
    std::string out_prefix;
    bool identity = false;
  };
  auto f = std::make_shared<Flags>();
  auto* sub = app.add_subcommand("gen-synthetic", "Generate a synthetic multi-domain rotation task");
  auto* dim = sub->add_option("--dim", f->spec.dim, "Embedding dimension (required unless --spec-json)");
  auto* domains = sub->add_option("--domains", f->spec.n_domains, "Number of domains")->capture_default_str();
  auto* docs = sub->add_option("--docs-per-domain", f->spec.docs_per_domain, "Documents per domain")
                   ->capture_default_str();
  auto* queries = sub->add_option("--queries-per-domain", f->spec.queries_per_domain, "Queries per domain")
                      ->capture_default_str();
  auto* noise = sub->add_option("--noise", f->spec.noise, "Query noise sigma")->capture_default_str();
  auto* seed = sub->add_option("--seed", f->spec.seed, "Random seed")->capture_default_str();
  sub->add_flag("--identity-rotation", f->identity, "Use the identity instead of random rotations");
  sub->add_option("--spec-json", f->spec_json, "JSON file with spec fields; explicit flags take precedence")
      ;
  sub->add_option("--out-prefix", f->out_prefix, "Output prefix")->required();
  on(sub, [=, &out] {
    SyntheticSpec spec = f->spec;
    if (!f->spec_json.empty()) {
      std::ifstream in(f->spec_json);
      Json j;
      try {
        j = Json::parse(in);
      } catch (const Json::exception& e) {
        throw FormatError("spec JSON '" + f->spec_json + "': " + e.what());
      }
      const auto take = [&](const char* key, CLI::Option* opt, auto& field) {
        if (j.contains(key) && opt->count() == 0) j.at(key).get_to(field);
      };
      take("dim", dim, spec.dim);
      take("domains", domains, spec.n_domains);
      take("docs_per_domain", docs, spec.docs_per_domain);
      take("queries_per_domain", queries, spec.queries_per_domain);
      take("noise", noise, spec.noise);
      take("seed", seed, spec.seed);
      if (j.contains("identity_rotation") && !f->identity) j.at("identity_rotation").get_to(spec.identity_rotation);
      if (!j.contains("dim") && dim->count() == 0) throw UsageError("--dim is required (flag or spec JSON)");
    } else if (dim->count() == 0) {
      throw UsageError("--dim is required");
    }
    if (f->identity) spec.identity_rotation = true;
    spec.validate();

    const SyntheticData data = generate_synthetic(spec);
    const std::string p = f->out_prefix;
    write_store(p + ".queries.sbmv", data.queries);
    write_store(p + ".docs.sbmv", data.docs);
    write_qrels(fs::path(p + ".qrels"), data.qrels);
    Json echo;
    echo["dim"] = spec.dim;
    echo["domains"] = spec.n_domains;
    echo["docs_per_domain"] = spec.docs_per_domain;
    echo["queries_per_domain"] = spec.queries_per_domain;
    echo["noise"] = spec.noise;
    echo["seed"] = spec.seed;
    echo["identity_rotation"] = spec.identity_rotation;
    std::ofstream(p + ".spec.json") << echo.dump(2) << '\n';

    Json result;
    result["queries"] = p + ".queries.sbmv";
    result["docs"] = p + ".docs.sbmv";
    result["qrels"] = p + ".qrels";
    result["spec"] = p + ".spec.json";
    result["query_count"] = data.queries.size();
    result["doc_count"] = data.docs.size();
    out << result.dump() << '\n';
  });
}

void run_split_qrels(CLI::App& app, std::ostream& out, const Register& on) {
  struct Flags {
    std::string qrels;
    double test_frac = 0.2;
    std::uint64_t seed = 42;
    std::string out_prefix;
  };
  auto f = std::make_shared<Flags>();
  auto* sub = app.add_subcommand("split-qrels", "Split qrels into train and held-out test queries");
  sub->add_option("--qrels", f->qrels, "Input qrels")->required();
  sub->add_option("--test-frac", f->test_frac, "Fraction of queries held out")->capture_default_str();
  sub->add_option("--seed", f->seed, "Random seed")->capture_default_str();
  sub->add_option("--out-prefix", f->out_prefix, "Writes <prefix>.train.qrels and <prefix>.test.qrels")->required();
  on(sub, [=, &out] {
    const QrelsSplit split = split_qrels(parse_qrels(fs::path(f->qrels)), f->test_frac, f->seed);
    write_qrels(fs::path(f->out_prefix + ".train.qrels"), split.train);
    write_qrels(fs::path(f->out_prefix + ".test.qrels"), split.test);
    Json j;
    j["train"] = f->out_prefix + ".train.qrels";
    j["test"] = f->out_prefix + ".test.qrels";
    j["train_queries"] = split.train.size();
    j["test_queries"] = split.test.size();
    out << j.dump() << '\n';
  });
}

void run_train(CLI::App& app, std::ostream& out, std::ostream& err,
               const Register& on) {
  struct Flags {
    TrainFlags train;
    std::string out_path;
  };
  auto f = std::make_shared<Flags>();
  auto* sub = app.add_subcommand("train", "Train an SB-MoE head on frozen embeddings");
  f->train.add_to(*sub);
  sub->add_option("--experts", f->train.cfg.n_experts, "Number of experts")->capture_default_str();
  sub->add_option("--out", f->out_path, "Model output path (meta JSON written alongside)")->required();
  on(sub, [=, &out, &err] {
    const TrainConfig cfg = f->train.resolve();
    const LoadedData data = load_training_data(f->train, err);
    const TrainResult result = train(pairs_from_qrels(data.qrels), cfg, data.queries, data.docs,
                                     [&](const EpochStats& s) { out << epoch_json(s).dump() << '\n'; });
    write_checkpoint(f->out_path, result);
    Json j;
    j["best_epoch"] = result.best.epoch;
    j["best_val_loss"] = result.best.val_loss;
    j["model"] = f->out_path;
    j["meta"] = meta_path_for(f->out_path).string();
    out << j.dump() << '\n';
  });
}

void run_sweep(CLI::App& app, std::ostream& out, std::ostream& err,
               const Register& on) {
  struct Flags {
    TrainFlags train;
    std::string experts_list = "3,6,9,12";
    std::string eval_qrels;
    std::string out_prefix;
  };
  auto f = std::make_shared<Flags>();
  auto* sub = app.add_subcommand("sweep", "Train and evaluate one head per expert count");
  f->train.add_to(*sub);
  sub->add_option("--experts-list", f->experts_list, "Comma-separated expert counts")->capture_default_str();
  sub->add_option("--eval-qrels", f->eval_qrels, "Qrels of the evaluation queries (default: --qrels)")
      ;
  sub->add_option("--out-prefix", f->out_prefix, "If set, writes <prefix>.experts<N>.sbmh per count");
  on(sub, [=, &out, &err] {
    TrainConfig cfg = f->train.resolve();
    std::vector<std::size_t> counts;
    for (const auto& item : split_list(f->experts_list)) {
      std::size_t pos = 0;
      unsigned long v = 0;
      try {
        v = std::stoul(item, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != item.size()) throw UsageError("bad expert count '" + item + "' in --experts-list");
      counts.push_back(v);
    }
    if (counts.empty()) throw UsageError("--experts-list is empty");
    for (std::size_t n : counts) {
      cfg.n_experts = n;
      cfg.validate();
    }
    const LoadedData data = load_training_data(f->train, err);
    const Qrels eval_qrels = f->eval_qrels.empty() ? data.qrels : parse_qrels(fs::path(f->eval_qrels));
    const EmbeddingStore eval_queries = judged_queries(data.queries, eval_qrels);
    const auto pairs = pairs_from_qrels(data.qrels);
    const std::size_t threads = thread_budget();

    const auto evaluate = [&](const HeadParams* head, Json& row) {
      const Run run = retrieve(eval_queries, data.docs, head, 100, cfg.similarity, threads);
      row["ndcg_cut_10"] = ndcg_at_k(run, eval_qrels, 10).mean;
      row["recall_100"] = recall_at_k(run, eval_qrels, 100).mean;
    };
    Json report;
    report["pooling"] = to_string(cfg.pooling);
    report["epochs"] = cfg.epochs;
    report["seed"] = cfg.seed;
    report["eval_queries"] = eval_queries.size();
    Json baseline;
    evaluate(nullptr, baseline);
    report["baseline"] = baseline;
    Json rows = Json::array();
    for (std::size_t n : counts) {
      cfg.n_experts = n;
      const TrainResult result = train(pairs, cfg, data.queries, data.docs);
      // Evaluate at file precision so a row matches train + search + eval.
      const HeadParams head = quantize_to_f32(result.best.head);
      Json row;
      row["experts"] = n;
      row["best_epoch"] = result.best.epoch;
      row["val_loss"] = result.best.val_loss;
      evaluate(&head, row);
      if (!f->out_prefix.empty()) {
        const std::string path = f->out_prefix + ".experts" + std::to_string(n) + ".sbmh";
        write_checkpoint(path, result);
        row["model"] = path;
      }
      rows.push_back(std::move(row));
    }
    report["rows"] = std::move(rows);
    out << report.dump(2) << '\n';
  });
}

void run_search(CLI::App& app, std::ostream& out, const Register& on) {
  struct Flags {
    std::string queries;
    std::string docs;
    std::string model;
    std::string qrels;
    std::size_t k = 100;
    std::string similarity = "cosine";
    std::string tag;
    std::string out_path;
  };
  auto f = std::make_shared<Flags>();
  auto* sub = app.add_subcommand("search", "Exhaustive dense retrieval, writes a TREC run");
  sub->add_option("--queries", f->queries, "Query embedding store")->required();
  sub->add_option("--docs", f->docs, "Document embedding store")->required();
  sub->add_option("--model", f->model, "Trained head; omitted = raw embeddings");
  sub->add_option("--qrels", f->qrels, "Only search queries judged in this qrels file");
  sub->add_option("--k", f->k, "Documents per query")->capture_default_str();
  sub->add_option("--similarity", f->similarity, "cosine or dot")->capture_default_str();
  sub->add_option("--tag", f->tag, "Run tag (default: sbmoe, or baseline without --model)");
  sub->add_option("--out", f->out_path, "Run output path")->required();
  on(sub, [=, &out] {
    const Similarity kind = parse_similarity(f->similarity);
    EmbeddingStore queries = read_store(f->queries);
    if (!f->qrels.empty()) queries = judged_queries(queries, parse_qrels(fs::path(f->qrels)));
    const EmbeddingStore docs = read_store(f->docs);
    std::optional<HeadParams> head;
    if (!f->model.empty()) head = read_model(f->model);
    const Run run = retrieve(queries, docs, head ? &*head : nullptr, f->k, kind, thread_budget());
    const std::string tag = !f->tag.empty() ? f->tag : (head ? "sbmoe" : "baseline");
    write_run(fs::path(f->out_path), run, tag);
    Json j;
    j["run"] = f->out_path;
    j["queries"] = run.size();
    j["k"] = f->k;
    j["tag"] = tag;
    out << j.dump() << '\n';
  });
}

void run_apply(CLI::App& app, std::ostream& out, const Register& on) {
  struct Flags {
    std::string model;
    std::string in;
    std::string out_path;
  };
  auto f = std::make_shared<Flags>();
  auto* sub = app.add_subcommand("apply", "Apply a trained head (noise off) to an embedding store");
  sub->add_option("--model", f->model, "Trained head")->required();
  sub->add_option("--in", f->in, "Input embedding store")->required();
  sub->add_option("--out", f->out_path, "Output embedding store")->required();
  on(sub, [=, &out] {
    const HeadParams head = read_model(f->model);
    const EmbeddingStore in = read_store(f->in);
    const Matrix y = apply_head(in, &head, thread_budget());
    EmbeddingStore result(in.dim());
    for (std::size_t i = 0; i < in.size(); ++i) result.add(in.id(i), y.row(i));
    write_store(f->out_path, result);
    Json j;
    j["store"] = f->out_path;
    j["entries"] = result.size();
    out << j.dump() << '\n';
  });
}

void run_eval(CLI::App& app, std::ostream& out, const Register& on) {
  struct Flags {
    std::string run;
    std::string qrels;
    std::string metrics = "ndcg_cut_10,recall_100";
    bool per_query = false;
  };
  auto f = std::make_shared<Flags>();
  auto* sub = app.add_subcommand("eval", "Compute NDCG@k / Recall@k for a run");
  sub->add_option("--run", f->run, "TREC run")->required();
  sub->add_option("--qrels", f->qrels, "TREC qrels")->required();
  sub->add_option("--metrics", f->metrics, "Comma-separated metrics (ndcg_cut_<k>, recall_<k>)")
      ->capture_default_str();
  sub->add_flag("--per-query", f->per_query, "Include per-query values");
  on(sub, [=, &out] {
    const Run run = parse_run(fs::path(f->run));
    const Qrels qrels = parse_qrels(fs::path(f->qrels));
    Json j;
    j["run"] = f->run;
    Json metrics = Json::array();
    for (const auto& m : split_list(f->metrics)) metrics.push_back(metric_json(evaluate_metric(run, qrels, m), f->per_query));
    j["metrics"] = std::move(metrics);
    out << j.dump(2) << '\n';
  });
}

void run_compare(CLI::App& app, std::ostream& out, const Register& on) {
  struct Flags {
    std::string run_a;
    std::string run_b;
    std::string qrels;
    std::string metrics = "ndcg_cut_10,recall_100";
    std::size_t comparisons = 1;
  };
  auto f = std::make_shared<Flags>();
  auto* sub = app.add_subcommand("compare", "Paired two-sided t-test between two runs, Bonferroni-corrected");
  sub->add_option("--run-a", f->run_a, "First run")->required();
  sub->add_option("--run-b", f->run_b, "Second run")->required();
  sub->add_option("--qrels", f->qrels, "TREC qrels")->required();
  sub->add_option("--metrics", f->metrics, "Comma-separated metrics")->capture_default_str();
  sub->add_option("--num-comparisons", f->comparisons, "Bonferroni family size m")->capture_default_str();
  on(sub, [=, &out] {
    const auto reports = compare_runs(parse_run(fs::path(f->run_a)), parse_run(fs::path(f->run_b)),
                                      parse_qrels(fs::path(f->qrels)), split_list(f->metrics), f->comparisons);
    Json j;
    j["alpha"] = kSignificanceLevel;
    j["comparisons"] = f->comparisons;
    Json list = Json::array();
    for (const auto& r : reports) {
      Json e;
      e["metric"] = r.metric;
      e["mean_a"] = r.mean_a;
      e["mean_b"] = r.mean_b;
      e["t"] = r.t;
      e["df"] = r.df;
      e["p_raw"] = r.p_raw;
      e["p_corrected"] = r.p_corrected;
      e["queries"] = r.queries;
      e["significant"] = r.significant;
      list.push_back(std::move(e));
    }
    j["results"] = std::move(list);
    out << j.dump(2) << '\n';
  });
}

void run_grad_check(CLI::App& app, std::ostream& out, const Register& on) {
  struct Flags {
    std::size_t dim = 8;
    std::string pooling = "top1";
    std::string similarity = "cosine";
    double step = 1e-5;
    TrainConfig cfg;
  };
  auto f = std::make_shared<Flags>();
  f->cfg.batch_size = 4;
  f->cfg.n_experts = 3;
  auto* sub = app.add_subcommand("grad-check", "Compare analytic gradients against central differences");
  sub->add_option("--dim", f->dim, "Embedding dimension")->capture_default_str();
  sub->add_option("--experts", f->cfg.n_experts, "Number of experts")->capture_default_str();
  sub->add_option("--batch-size", f->cfg.batch_size, "Batch size")->capture_default_str();
  sub->add_option("--pooling", f->pooling, "top1 or all")->capture_default_str();
  sub->add_option("--similarity", f->similarity, "cosine or dot")->capture_default_str();
  sub->add_option("--temperature", f->cfg.temperature, "Contrastive loss temperature")->capture_default_str();
  sub->add_option("--seed", f->cfg.seed, "Random seed")->capture_default_str();
  sub->add_option("--step", f->step, "Finite-difference step h")->capture_default_str();
  on(sub, [=, &out] {
    TrainConfig cfg = f->cfg;
    cfg.pooling = parse_pooling(f->pooling);
    cfg.similarity = parse_similarity(f->similarity);
    HeadConfig{f->dim, cfg.n_experts, cfg.pooling}.validate();
    const GradCheckReport report = grad_check(cfg, f->dim, f->step);
    constexpr double kTolerance = 1e-4;
    Json j;
    j["pooling"] = to_string(cfg.pooling);
    j["similarity"] = to_string(cfg.similarity);
    j["parameters"] = report.parameters;
    j["max_rel_error"] = report.max_rel_error;
    j["max_abs_error"] = report.max_abs_error;
    j["max_abs_gradient"] = report.max_abs_gradient;
    j["tolerance"] = kTolerance;
    Json groups = Json::object();
    for (const auto& g : report.groups) groups[g.name] = g.max_rel_error;
    j["groups"] = std::move(groups);
    out << j.dump(2) << '\n';
    if (!(report.max_rel_error <= kTolerance)) {
      throw NumericError("gradient check failed: max relative error " + std::to_string(report.max_rel_error) +
                         " exceeds " + std::to_string(kTolerance));
    }
  });
}

}  // namespace

std::size_t thread_budget() {
  if (const char* env = std::getenv("SBMOE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"SB-MoE retrieval head toolkit", "sbmoe"};
  app.require_subcommand(1);
  std::function<void()> action;
  const Register on = [&action](CLI::App* sub, std::function<void()> fn) {
    sub->callback([&action, fn] { action = fn; });
  };
  run_gen_synthetic(app, out, on);
  run_split_qrels(app, out, on);
  run_train(app, out, err, on);
  run_sweep(app, out, err, on);
  run_search(app, out, on);
  run_apply(app, out, on);
  run_eval(app, out, on);
  run_compare(app, out, on);
  run_grad_check(app, out, on);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  try {
    if (action) action();
    return kOk;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
}

}  // namespace sbmoe::cli
