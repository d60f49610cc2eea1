#include <cmath>
#include <string>

#include "sbmoe/data_io.hpp"
#include "sbmoe/detail/binary_io.hpp"
#include "sbmoe/errors.hpp"

namespace sbmoe {

namespace {

constexpr std::string_view kStoreMagic = "SBMV";
constexpr std::uint32_t kStoreVersion = 1;

}  // namespace

void EmbeddingStore::add(std::string id, std::span<const double> vector) {
  if (vector.size() != dim_) {
    throw ShapeError("embedding '" + id + "' has " + std::to_string(vector.size()) +
                     " entries, store dimension is " + std::to_string(dim_));
  }
  if (index_.contains(id)) throw DataError("duplicate embedding id '" + id + "'");
  index_.emplace(id, ids_.size());
  ids_.push_back(std::move(id));
  for (double v : vector) data_.push_back(static_cast<double>(static_cast<float>(v)));
}

std::optional<std::size_t> EmbeddingStore::find(std::string_view id) const {
  const auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::span<const double> EmbeddingStore::at(std::string_view id) const {
  const auto i = find(id);
  if (!i) throw DataError("unknown embedding id '" + std::string(id) + "'");
  return vector(*i);
}

std::string encode_store(const EmbeddingStore& store) {
  std::string out;
  out.append(kStoreMagic);
  detail::put_le<std::uint32_t>(out, kStoreVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.dim()));
  detail::put_le<std::uint64_t>(out, store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string& id = store.id(i);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
    out.append(id);
    for (double v : store.vector(i)) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

EmbeddingStore decode_store(std::string_view bytes) {
  detail::ByteReader in(bytes, "embedding store");
  if (in.get_bytes(4) != kStoreMagic) in.fail("bad magic (expected SBMV)");
  if (const auto version = in.get_le<std::uint32_t>(); version != kStoreVersion) {
    in.fail("unsupported version " + std::to_string(version));
  }
  const auto dim = in.get_le<std::uint32_t>();
  const auto count = in.get_le<std::uint64_t>();
  EmbeddingStore store(dim);
  std::vector<double> v(dim);
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto id_len = in.get_le<std::uint32_t>();
    std::string id(in.get_bytes(id_len));
    for (auto& x : v) {
      const float f = in.get_f32();
      if (!std::isfinite(f)) in.fail("non-finite value in entry '" + id + "'");
      x = static_cast<double>(f);
    }
    if (store.find(id)) in.fail("duplicate id '" + id + "'");
    store.add(std::move(id), v);
  }
  if (in.remaining() != 0) in.fail(std::to_string(in.remaining()) + " trailing bytes after last entry");
  return store;
}

void write_store(const std::filesystem::path& path, const EmbeddingStore& store) {
  detail::write_file(path, encode_store(store));
}

EmbeddingStore read_store(const std::filesystem::path& path) {
  return decode_store(detail::read_file(path));
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

}  // namespace sbmoe
