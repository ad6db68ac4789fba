#include "viewlab/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <system_error>

#include <unistd.h>
#include <zlib.h>

namespace viewlab::io {
namespace {

template <class T>
void put_le(std::ostream& os, T v) {
  char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw FormatError("unexpected end of file");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
void write_i32(std::ostream& os, std::int32_t v) { put_le(os, static_cast<std::uint32_t>(v)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void append_f32(std::string& buf, std::span<const double> values) {
  const std::size_t start = buf.size();
  buf.resize(start + 4 * values.size());
  char* p = buf.data() + start;
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int i = 0; i < 4; ++i) *p++ = static_cast<char>((bits >> (8 * i)) & 0xff);
  }
}

void decode_f32(const char* bytes, std::span<double> out) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes);
  for (auto& v : out) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    v = static_cast<double>(std::bit_cast<float>(bits));
    p += 4;
  }
}

void write_f32(std::ostream& os, std::span<const double> values) {
  std::string buf;
  append_f32(buf, values);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

std::uint32_t read_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get_le<std::uint64_t>(is); }
std::int32_t read_i32(std::istream& is) { return static_cast<std::int32_t>(get_le<std::uint32_t>(is)); }

std::string read_string(std::istream& is, std::size_t max_len) {
  const auto n = read_u64(is);
  if (n > max_len) throw FormatError("string field too long: " + std::to_string(n));
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("unexpected end of file");
  return s;
}

void read_f32(std::istream& is, std::span<double> out) {
  std::string buf(4 * out.size(), '\0');
  if (!is.read(buf.data(), static_cast<std::streamsize>(buf.size())))
    throw FormatError("unexpected end of file");
  decode_f32(buf.data(), out);
}

void atomic_write(const std::filesystem::path& path,
                  const std::function<void(std::ostream&)>& writer) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  try {
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      if (!os) throw std::system_error(errno, std::generic_category(), "cannot open " + tmp.string());
      writer(os);
      os.flush();
      if (!os) throw std::system_error(errno, std::generic_category(), "write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

std::uint32_t crc32(std::uint32_t crc, const void* data, std::size_t len) {
  const auto* p = static_cast<const Bytef*>(data);
  uLong c = crc;
  while (len > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(len, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    len -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace viewlab::io
