#include <array>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "mta/errors.hpp"
#include "mta/io.hpp"

namespace mta::io {

namespace fs = std::filesystem;

namespace {

std::string read_gzip(const fs::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::string out;
  std::array<char, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.append(buf.data(), n);
  int errnum = 0;
  const char* msg = gzerror(f, &errnum);
  const bool failed = n < 0 || (errnum != Z_OK && errnum != Z_STREAM_END);
  const std::string detail = failed ? std::string(msg) : std::string();
  gzclose(f);
  if (failed) throw FormatError("corrupt gzip stream in " + path.string() + ": " + detail);
  return out;
}

}  // namespace

std::string read_file(const fs::path& path) {
  if (!fs::exists(path)) throw NotFoundError("file not found: " + path.string());
  if (path.extension() == ".gz") return read_gzip(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, value >>= 4) s[i] = digits[value & 0xF];
  return s;
}

}  // namespace mta::io
