// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "seqlidar/tensor.hpp"

namespace seqlidar {

namespace {

constexpr std::uint8_t kMagic[4] = {0x4C, 0x34, 0x44, 0x54};
constexpr std::uint8_t kVersion = 0x01;

static_assert(std::endian::native == std::endian::little, "L4DT writer assumes a little-endian host");

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  std::uint8_t buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.insert(out.end(), buf, buf + sizeof(U));
}

template <typename U>
U get_le(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(U) > bytes.size()) throw IoError("L4DT: truncated stream");
  U v;
  std::memcpy(&v, bytes.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<std::uint8_t> encode_l4dt(const AnyTensor& tensor) {
  std::vector<std::uint8_t> out;
  std::visit(
      [&](const auto& t) {
        using T = typename std::decay_t<decltype(t)>::value_type;
        if (t.rank() > 255) throw IoError("L4DT: rank exceeds 255");
        out.reserve(8 + 8 * t.rank() + sizeof(T) * t.numel());
        out.insert(out.end(), kMagic, kMagic + 4);
        out.push_back(kVersion);
        out.push_back(static_cast<std::uint8_t>(dtype_of<T>()));
        out.push_back(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t e : t.shape()) put_le<std::uint64_t>(out, e);
        const auto* raw = reinterpret_cast<const std::uint8_t*>(t.ptr());
        out.insert(out.end(), raw, raw + sizeof(T) * t.numel());
      },
      tensor);
  return out;
}

AnyTensor decode_l4dt(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 7 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw IoError("L4DT: bad magic");
  if (bytes[4] != kVersion) throw IoError("L4DT: unsupported version " + std::to_string(bytes[4]));
  const std::uint8_t dtype = bytes[5];
  const std::uint8_t ndim = bytes[6];
  std::size_t pos = 7;
  Shape shape(ndim);
  for (auto& e : shape) e = static_cast<std::size_t>(get_le<std::uint64_t>(bytes, pos));
  const std::size_t n = shape_numel(shape);
  auto read_body = [&](auto tag) -> AnyTensor {
    using T = decltype(tag);
    if (bytes.size() - pos != n * sizeof(T)) throw IoError("L4DT: payload size does not match shape " + shape_str(shape));
    std::vector<T> data(n);
    std::memcpy(data.data(), bytes.data() + pos, n * sizeof(T));
    return Tensor<T>(shape, std::move(data));
  };
  switch (dtype) {
    case 0:
      return read_body(float{});
    case 1:
      return read_body(double{});
    default:
      throw IoError("L4DT: unknown dtype byte " + std::to_string(dtype));
  }
}

void write_l4dt(const std::filesystem::path& path, const AnyTensor& tensor) {
  const auto bytes = encode_l4dt(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

AnyTensor read_l4dt_any(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_l4dt(bytes);
  } catch (const IoError& e) {
    throw IoError(std::string(e.what()) + " (" + path.string() + ")");
  }
}

}  // namespace seqlidar
