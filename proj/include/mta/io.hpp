#pragma once

// File helpers shared by the persistence code.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace mta::io {

/// Whole file as bytes; NotFoundError when missing. Transparently inflates
/// gzip content when the path ends in ".gz".
std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`, creating
/// parent directories as needed.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::uint64_t fnv1a64(std::string_view bytes);
/// 16 lowercase hex digits.
std::string hex64(std::uint64_t value);

}  // namespace mta::io

namespace mta {
class Tensor;
}

namespace mta::io {

/// NumPy .npy (format 1.0) encoding of a float64 tensor in C order.
std::string encode_npy(const Tensor& t);
/// FormatError unless the bytes hold a little-endian float64 C-order array.
Tensor decode_npy(std::string_view bytes, const std::string& source = "<memory>");

}  // namespace mta::io
