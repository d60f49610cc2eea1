#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include "sbmoe/data_io.hpp"
#include "sbmoe/errors.hpp"

namespace sbmoe {

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) fields.push_back(line.substr(start, i - start));
  }
  return fields;
}

[[noreturn]] void parse_fail(std::string_view what, std::size_t line_no, const std::string& message) {
  throw FormatError(std::string(what) + " line " + std::to_string(line_no) + ": " + message);
}

template <class Number>
bool parse_number(std::string_view text, Number& out) {
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::ifstream open_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "' for reading");
  return in;
}

std::ofstream create_text(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  return out;
}

}  // namespace

Qrels parse_qrels(std::istream& in, ParseStats* stats) {
  Qrels qrels;
  ParseStats local;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto fields = split_fields(line);
    if (fields.empty()) continue;
    if (fields.size() != 4) {
      parse_fail("qrels", line_no, "expected 4 fields, found " + std::to_string(fields.size()));
    }
    int grade = 0;
    if (!parse_number(fields[3], grade)) parse_fail("qrels", line_no, "grade is not an integer");
    if (grade < 0) parse_fail("qrels", line_no, "negative grade");
    auto& judged = qrels[std::string(fields[0])];
    const auto [it, inserted] = judged.insert_or_assign(std::string(fields[2]), grade);
    if (!inserted) ++local.duplicates;
    ++local.lines;
  }
  if (stats != nullptr) *stats = local;
  return qrels;
}

Qrels parse_qrels(const std::filesystem::path& path, ParseStats* stats) {
  auto in = open_text(path);
  return parse_qrels(in, stats);
}

void write_qrels(std::ostream& out, const Qrels& qrels) {
  for (const auto& [qid, judged] : qrels) {
    for (const auto& [did, grade] : judged) out << qid << " 0 " << did << ' ' << grade << '\n';
  }
}

void write_qrels(const std::filesystem::path& path, const Qrels& qrels) {
  auto out = create_text(path);
  write_qrels(out, qrels);
}

Run parse_run(std::istream& in) {
  struct QueryState {
    long last_rank = 0;
    double last_score = 0.0;
    std::set<std::string, std::less<>> seen;
  };
  Run run;
  std::map<std::string, QueryState, std::less<>> state;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto fields = split_fields(line);
    if (fields.empty()) continue;
    if (fields.size() != 6) {
      parse_fail("run", line_no, "expected 6 fields, found " + std::to_string(fields.size()));
    }
    long rank = 0;
    double score = 0.0;
    if (!parse_number(fields[3], rank) || rank < 1) parse_fail("run", line_no, "rank must be a positive integer");
    if (!parse_number(fields[4], score) || !std::isfinite(score)) {
      parse_fail("run", line_no, "score is not a finite number");
    }
    const std::string qid(fields[0]);
    const std::string did(fields[2]);
    auto& st = state[qid];
    if (!st.seen.empty()) {
      if (rank <= st.last_rank) parse_fail("run", line_no, "ranks must increase within query " + qid);
      if (score > st.last_score) parse_fail("run", line_no, "score increases with rank within query " + qid);
    }
    if (!st.seen.insert(did).second) parse_fail("run", line_no, "duplicate document " + did + " for query " + qid);
    st.last_rank = rank;
    st.last_score = score;
    run[qid].push_back(ScoredDoc{did, score});
  }
  return run;
}

Run parse_run(const std::filesystem::path& path) {
  auto in = open_text(path);
  return parse_run(in);
}

void write_run(std::ostream& out, const Run& run, std::string_view tag) {
  char score[64];
  for (const auto& [qid, docs] : run) {
    for (std::size_t r = 0; r < docs.size(); ++r) {
      std::snprintf(score, sizeof(score), "%.6f", docs[r].score);
      out << qid << " Q0 " << docs[r].doc_id << ' ' << (r + 1) << ' ' << score << ' ' << tag << '\n';
    }
  }
}

void write_run(const std::filesystem::path& path, const Run& run, std::string_view tag) {
  auto out = create_text(path);
  write_run(out, run, tag);
}

std::vector<TrainingPair> pairs_from_qrels(const Qrels& qrels) {
  std::vector<TrainingPair> pairs;
  for (const auto& [qid, judged] : qrels) {
    for (const auto& [did, grade] : judged) {
      if (grade > 0) pairs.push_back(TrainingPair{qid, did});
    }
  }
  return pairs;
}

QrelsSplit split_qrels(const Qrels& qrels, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test fraction must be in (0, 1)");
  }
  std::vector<std::string> ids;
  for (const auto& [qid, judged] : qrels) ids.push_back(qid);
  SeededRng rng(seed, 3);
  shuffle(ids, rng);
  const auto n_test = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(ids.size())));
  QrelsSplit split;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto& target = i + n_test >= ids.size() ? split.test : split.train;
    target.emplace(ids[i], qrels.at(ids[i]));
  }
  return split;
}

}  // namespace sbmoe
