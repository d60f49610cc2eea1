#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sbmoe/numerics.hpp"

namespace sbmoe {

// Id-addressed collection of fixed-dimension embeddings. Values are held at
// 32-bit float precision (the on-disk precision) but exposed as doubles.
class EmbeddingStore {
 public:
  explicit EmbeddingStore(std::size_t dim = 0) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }

  // Rounds `vector` to float precision. Throws DataError on a duplicate id
  // and ShapeError on a dimension mismatch.
  void add(std::string id, std::span<const double> vector);

  const std::string& id(std::size_t i) const { return ids_[i]; }
  const std::vector<std::string>& ids() const { return ids_; }
  std::span<const double> vector(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }

  std::optional<std::size_t> find(std::string_view id) const;
  // Throws DataError naming the id when it is absent.
  std::span<const double> at(std::string_view id) const;

  // Entries whose id satisfies `keep`, in store order.
  template <class Pred>
  EmbeddingStore filter(Pred keep) const {
    EmbeddingStore out(dim_);
    for (std::size_t i = 0; i < size(); ++i) {
      if (keep(ids_[i])) out.add(ids_[i], vector(i));
    }
    return out;
  }

  bool operator==(const EmbeddingStore& other) const {
    return dim_ == other.dim_ && ids_ == other.ids_ && data_ == other.data_;
  }

 private:
  std::size_t dim_;
  std::vector<std::string> ids_;
  std::vector<double> data_;
  std::unordered_map<std::string, std::size_t> index_;
};

// "SBMV" store: magic | u32 version=1 | u32 dim | u64 count | per entry
// (u32 id length, id bytes, dim little-endian f32).
std::string encode_store(const EmbeddingStore& store);
EmbeddingStore decode_store(std::string_view bytes);
void write_store(const std::filesystem::path& path, const EmbeddingStore& store);
EmbeddingStore read_store(const std::filesystem::path& path);

// query-id -> doc-id -> grade (>= 0)
using Qrels = std::map<std::string, std::map<std::string, int>>;

struct ScoredDoc {
  std::string doc_id;
  double score = 0.0;

  bool operator==(const ScoredDoc&) const = default;
};

// query-id -> ranked documents, best first.
using Run = std::map<std::string, std::vector<ScoredDoc>>;

struct ParseStats {
  std::size_t lines = 0;
  std::size_t duplicates = 0;  // qrels lines overriding an earlier judgment
};

// TREC qrels "query-id 0 doc-id grade". A repeated (query, doc) pair keeps
// the last grade and is counted in ParseStats::duplicates.
Qrels parse_qrels(std::istream& in, ParseStats* stats = nullptr);
Qrels parse_qrels(const std::filesystem::path& path, ParseStats* stats = nullptr);
void write_qrels(std::ostream& out, const Qrels& qrels);
void write_qrels(const std::filesystem::path& path, const Qrels& qrels);

// TREC run "query-id Q0 doc-id rank score tag". Within a query, lines must
// appear in increasing rank with non-increasing score and unique doc ids.
Run parse_run(std::istream& in);
Run parse_run(const std::filesystem::path& path);
void write_run(std::ostream& out, const Run& run, std::string_view tag);
void write_run(const std::filesystem::path& path, const Run& run, std::string_view tag);

struct TrainingPair {
  std::string query_id;
  std::string doc_id;

  bool operator==(const TrainingPair&) const = default;
};

// One pair per judgment with grade > 0, sorted by query id then doc id.
std::vector<TrainingPair> pairs_from_qrels(const Qrels& qrels);

struct QrelsSplit {
  Qrels train;
  Qrels test;
};

// Seeded query-level split: the last ceil(test_fraction * #queries) queries
// of a shuffled id list go to `test`.
QrelsSplit split_qrels(const Qrels& qrels, double test_fraction, std::uint64_t seed);

struct SyntheticSpec {
  std::size_t dim = 32;
  std::size_t n_domains = 4;
  std::size_t docs_per_domain = 1250;
  std::size_t queries_per_domain = 625;
  double noise = 0.05;
  std::uint64_t seed = 42;
  // Replaces every domain rotation by the identity.
  bool identity_rotation = false;

  void validate() const;
};

struct SyntheticData {
  EmbeddingStore queries;
  EmbeddingStore docs;
  Qrels qrels;
};

// Per domain j: a random rotation R_j, unit Gaussian documents "d<j>-<i>",
// and queries "q<j>-<i>" = normalize(R_j e + noise * g) for a source
// document e, judged relevant with grade 1.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

// Haar-distributed rotation: Gram-Schmidt of a Gaussian matrix with a
// positive R diagonal, first column negated if needed so that det = +1.
Matrix random_rotation(std::size_t dim, SeededRng& rng);
double determinant(const Matrix& m);

// FNV-1a 64-bit digest, used to fingerprint training inputs.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);

}  // namespace sbmoe
