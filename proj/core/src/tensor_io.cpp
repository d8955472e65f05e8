#include "attnwave/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace attnwave {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts are unsupported");
static_assert(sizeof(double) == 8);

namespace {

constexpr char kMagic[4] = {'A', 'T', 'N', 'W'};
constexpr uint8_t kVersion = 1;

void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_tensor: cannot open " + path.string());
  os.write(kMagic, sizeof(kMagic));
  os.put(static_cast<char>(kVersion));
  write_u64(os, static_cast<uint64_t>(t.rank()));
  for (int64_t i = 0; i < t.rank(); ++i) write_u64(os, static_cast<uint64_t>(t.dim(i)));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * static_cast<int64_t>(sizeof(double))));
  if (!os) throw std::runtime_error("save_tensor: write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_tensor: cannot open " + path.string());
  char magic[4];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("load_tensor: bad magic in " + path.string());
  const int version = is.get();
  if (version != kVersion)
    throw std::runtime_error("load_tensor: unsupported version " + std::to_string(version) +
                             " in " + path.string());
  const uint64_t rank = read_u64(is);
  if (rank > 8) throw std::runtime_error("load_tensor: implausible rank in " + path.string());
  std::vector<int64_t> shape(rank);
  int64_t numel = 1;
  for (auto& e : shape) {
    e = static_cast<int64_t>(read_u64(is));
    numel *= e;
  }
  std::vector<double> values(static_cast<size_t>(numel));
  is.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(numel * static_cast<int64_t>(sizeof(double))));
  if (!is) throw std::runtime_error("load_tensor: truncated payload in " + path.string());
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace attnwave
