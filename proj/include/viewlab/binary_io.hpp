#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>

#include "viewlab/core.hpp"

// Little-endian primitives shared by the checkpoint, dataset and view-cache
// formats.
namespace viewlab::io {

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_i32(std::ostream& os, std::int32_t v);
void write_string(std::ostream& os, const std::string& s);
/// Converts to float32 and writes little-endian.
void write_f32(std::ostream& os, std::span<const double> values);

std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
std::int32_t read_i32(std::istream& is);
std::string read_string(std::istream& is, std::size_t max_len = 1u << 24);
void read_f32(std::istream& is, std::span<double> out);

/// Appends float32 little-endian bytes of values to buf.
void append_f32(std::string& buf, std::span<const double> values);
void decode_f32(const char* bytes, std::span<double> out);

/// Writes through a temporary sibling file and renames it over path. On any
/// exception the temporary is removed and nothing is left at path.
void atomic_write(const std::filesystem::path& path,
                  const std::function<void(std::ostream&)>& writer);

/// CRC-32 (zlib polynomial), incremental.
std::uint32_t crc32(std::uint32_t crc, const void* data, std::size_t len);

}  // namespace viewlab::io
