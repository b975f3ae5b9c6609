#include "mos/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mos/errors.hpp"

namespace mos {

void append_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void append_u64(std::vector<char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void append_f64(std::vector<char>& out, double v) { append_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint32_t ByteReader::u32() {
  if (pos_ + 4 > bytes_.size()) throw ParseError("truncated binary file (u32)");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
  }
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  if (pos_ + 8 > bytes_.size()) throw ParseError("truncated binary file (u64)");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
  }
  pos_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::bytes(std::size_t n) {
  if (pos_ + n > bytes_.size()) throw ParseError("truncated binary file (bytes)");
  std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
  pos_ += n;
  return s;
}

std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<char> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  append_u32(out, kCheckpointVersion);
  append_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    std::uint64_t count = 1;
    for (std::uint64_t d : t.shape) count *= d;
    if (count != t.values.size()) {
      throw ArgumentError("checkpoint tensor '" + t.name + "' shape does not match its values");
    }
    append_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    append_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::uint64_t d : t.shape) append_u64(out, d);
    for (double v : t.values) append_f64(out, v);
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<char>& bytes) {
  ByteReader in(bytes);
  const std::string magic = in.bytes(sizeof(kCheckpointMagic));
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw ParseError("not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = in.u32();
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = in.bytes(in.u32());
    const std::uint32_t rank = in.u32();
    std::uint64_t elements = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(in.u64());
      elements *= t.shape.back();
    }
    if (elements > bytes.size()) throw ParseError("checkpoint tensor '" + t.name + "' is truncated");
    t.values.resize(elements);
    for (double& v : t.values) v = in.f64();
    tensors.push_back(std::move(t));
  }
  if (!in.done()) throw ParseError("trailing bytes after checkpoint tensors");
  return tensors;
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file_bytes(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace mos
