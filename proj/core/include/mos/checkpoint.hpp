#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mos {

// On-disk layout (all integers little-endian):
//   magic "MOSCKPT\0" (8 bytes), u32 format version, u32 tensor count, then per
//   tensor: u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values.
inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'S', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

std::vector<char> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<char>& bytes);

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

// Little-endian helpers shared with the embedding file format.
void append_u32(std::vector<char>& out, std::uint32_t v);
void append_u64(std::vector<char>& out, std::uint64_t v);
void append_f64(std::vector<char>& out, double v);

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& bytes) : bytes_(bytes) {}
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string bytes(std::size_t n);
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

std::vector<char> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<char>& bytes);

}  // namespace mos
