#include <bit>
#include <cstring>
#include <regex>

#include "mta/errors.hpp"
#include "mta/io.hpp"
#include "mta/tensor.hpp"

namespace mta::io {

static_assert(std::endian::native == std::endian::little, "npy codec assumes a little-endian host");

namespace {
constexpr char kMagic[] = "\x93NUMPY";
}

std::string encode_npy(const Tensor& t) {
  std::string shape;
  for (std::size_t d : t.shape()) shape += (shape.empty() ? "" : ", ") + std::to_string(d);
  shape = "(" + shape + (t.shape().size() == 1 ? ",)" : ")");
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': " + shape + ", }";
  // Magic (6) + version (2) + length (2) + header, padded to 64 bytes with a trailing newline.
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header += '\n';
  std::string out(kMagic, 6);
  out += '\x01';
  out += '\x00';
  out += static_cast<char>(header.size() & 0xff);
  out += static_cast<char>(header.size() >> 8);
  out += header;
  const std::size_t at = out.size();
  out.resize(at + t.size() * sizeof(double));
  if (t.size() > 0) std::memcpy(out.data() + at, t.ptr(), t.size() * sizeof(double));
  return out;
}

Tensor decode_npy(std::string_view bytes, const std::string& source) {
  if (bytes.size() < 10 || bytes.substr(0, 6) != std::string_view(kMagic, 6) || bytes[6] != '\x01') {
    throw FormatError("not a version 1.0 .npy file: " + source);
  }
  const std::size_t len = static_cast<unsigned char>(bytes[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
  if (bytes.size() < 10 + len) throw FormatError("truncated .npy header: " + source);
  const std::string header(bytes.substr(10, len));
  if (header.find("'descr': '<f8'") == std::string::npos || header.find("'fortran_order': False") == std::string::npos) {
    throw FormatError(".npy file is not float64 in C order: " + source);
  }
  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('shape': \(([0-9, ]*)\))"))) {
    throw FormatError(".npy header has no shape: " + source);
  }
  Shape shape;
  const std::string dims = m[1];
  const std::regex number("[0-9]+");
  for (std::sregex_iterator it(dims.begin(), dims.end(), number), end; it != end; ++it) {
    shape.push_back(std::stoull(it->str()));
  }
  Tensor t(shape);
  if (bytes.size() != 10 + len + t.size() * sizeof(double)) throw FormatError(".npy payload size mismatch: " + source);
  if (t.size() > 0) std::memcpy(t.ptr(), bytes.data() + 10 + len, t.size() * sizeof(double));
  return t;
}

}  // namespace mta::io
