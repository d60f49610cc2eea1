#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>

#include "sbmoe/data_io.hpp"
#include "sbmoe/errors.hpp"

namespace sbmoe {

namespace {

Vector gaussian_vector(std::size_t dim, SeededRng& rng) {
  Vector v(dim);
  for (double& x : v) x = gaussian(rng);
  return v;
}

void normalize(Vector& v) {
  const double n = norm(v);
  if (!(n > 0.0)) throw NumericError("cannot normalize a zero vector");
  for (double& x : v) x /= n;
}

std::string make_id(char kind, std::size_t domain, std::size_t index) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%c%zu-%06zu", kind, domain, index);
  return buf;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (dim < 2) throw ConfigError("synthetic dim must be at least 2");
  if (n_domains < 1) throw ConfigError("synthetic spec needs at least one domain");
  if (docs_per_domain < 1) throw ConfigError("synthetic spec needs at least one doc per domain");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("synthetic noise must be finite and >= 0");
}

double determinant(const Matrix& m) {
  if (m.rows() != m.cols()) throw ShapeError("determinant: matrix is not square");
  Matrix a = m;
  const std::size_t n = a.rows();
  double det = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t pivot = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(a(r, c)) > std::abs(a(pivot, c))) pivot = r;
    }
    if (a(pivot, c) == 0.0) return 0.0;
    if (pivot != c) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a(pivot, k), a(c, k));
      det = -det;
    }
    det *= a(c, c);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a(r, c) / a(c, c);
      for (std::size_t k = c; k < n; ++k) a(r, k) -= f * a(c, k);
    }
  }
  return det;
}

Matrix random_rotation(std::size_t dim, SeededRng& rng) {
  Matrix g(dim, dim);
  for (double& x : g.data()) x = gaussian(rng);
  // Modified Gram-Schmidt over columns; dividing by the positive norm keeps
  // diag(R) > 0, which makes Q Haar-distributed on O(d).
  Matrix q(dim, dim);
  for (std::size_t c = 0; c < dim; ++c) {
    Vector col(dim);
    for (std::size_t r = 0; r < dim; ++r) col[r] = g(r, c);
    for (std::size_t p = 0; p < c; ++p) {
      double proj = 0.0;
      for (std::size_t r = 0; r < dim; ++r) proj += q(r, p) * col[r];
      for (std::size_t r = 0; r < dim; ++r) col[r] -= proj * q(r, p);
    }
    normalize(col);
    for (std::size_t r = 0; r < dim; ++r) q(r, c) = col[r];
  }
  if (determinant(q) < 0.0) {
    for (std::size_t r = 0; r < dim; ++r) q(r, 0) = -q(r, 0);
  }
  return q;
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SeededRng rng(spec.seed, 4);
  SyntheticData data{EmbeddingStore(spec.dim), EmbeddingStore(spec.dim), {}};
  for (std::size_t j = 0; j < spec.n_domains; ++j) {
    const Matrix rotation = spec.identity_rotation ? Matrix::identity(spec.dim) : random_rotation(spec.dim, rng);

    std::vector<Vector> docs;
    docs.reserve(spec.docs_per_domain);
    for (std::size_t i = 0; i < spec.docs_per_domain; ++i) {
      Vector e = gaussian_vector(spec.dim, rng);
      normalize(e);
      data.docs.add(make_id('d', j, i), e);
      // Queries are built from the stored (float-rounded) vector.
      const auto stored = data.docs.vector(data.docs.size() - 1);
      docs.emplace_back(stored.begin(), stored.end());
    }

    // Source documents: a seeded permutation, cycled when there are more
    // queries than documents.
    std::vector<std::size_t> order(spec.docs_per_domain);
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    for (std::size_t i = 0; i < spec.queries_per_domain; ++i) {
      const std::size_t src = order[i % order.size()];
      Vector q = matvec(rotation, docs[src]);
      for (double& x : q) x += spec.noise * gaussian(rng);
      normalize(q);
      const std::string qid = make_id('q', j, i);
      data.queries.add(qid, q);
      data.qrels[qid][make_id('d', j, src)] = 1;
    }
  }
  return data;
}

}  // namespace sbmoe
