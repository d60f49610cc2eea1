#include <cmath>
#include <string>

#include "sbmoe/detail/binary_io.hpp"
#include "sbmoe/errors.hpp"
#include "sbmoe/moe_head.hpp"

namespace sbmoe {

namespace {

constexpr std::string_view kModelMagic = "SBMH";
constexpr std::uint32_t kModelVersion = 1;

}  // namespace

std::string encode_model(const HeadParams& params) {
  params.config.validate();
  std::string out;
  out.reserve(17 + 4 * allocated_parameter_count(params));
  out.append(kModelMagic);
  detail::put_le<std::uint32_t>(out, kModelVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.config.dim));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.config.n_experts));
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(params.config.pooling));
  for_each_tensor(params, [&](std::string_view, int, std::span<const double> t) {
    for (double v : t) detail::put_f32(out, static_cast<float>(v));
  });
  return out;
}

HeadParams decode_model(std::string_view bytes) {
  detail::ByteReader in(bytes, "model file");
  if (in.get_bytes(4) != kModelMagic) in.fail("bad magic (expected SBMH)");
  if (const auto version = in.get_le<std::uint32_t>(); version != kModelVersion) {
    in.fail("unsupported version " + std::to_string(version));
  }
  HeadConfig config;
  config.dim = in.get_le<std::uint32_t>();
  config.n_experts = in.get_le<std::uint32_t>();
  const auto pooling = in.get_le<std::uint8_t>();
  if (pooling > 1) in.fail("bad pooling byte " + std::to_string(pooling));
  config.pooling = static_cast<Pooling>(pooling);
  try {
    config.validate();
  } catch (const ConfigError& e) {
    in.fail(e.what());
  }
  HeadParams params = HeadParams::zeros(config);
  const std::size_t expected = 4 * allocated_parameter_count(params);
  if (in.remaining() != expected) {
    in.fail("parameter payload is " + std::to_string(in.remaining()) + " bytes, expected " +
            std::to_string(expected));
  }
  for_each_tensor(params, [&](std::string_view, int, std::span<double> t) {
    for (double& v : t) {
      const float f = in.get_f32();
      if (!std::isfinite(f)) in.fail("non-finite parameter");
      v = static_cast<double>(f);
    }
  });
  return params;
}

void write_model(const std::filesystem::path& path, const HeadParams& params) {
  detail::write_file(path, encode_model(params));
}

HeadParams read_model(const std::filesystem::path& path) { return decode_model(detail::read_file(path)); }

}  // namespace sbmoe
