#include "phydra/weights_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace phydra {

namespace {

constexpr char kMagic[4] = {'P', 'H', 'Y', 'W'};
constexpr std::uint8_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw corruption_error(std::string("weight file truncated at ") + what);
  return v;
}

}  // namespace

void save_weights(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& items) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open " + path + " for writing");
  os.write(kMagic, 4);
  put<std::uint8_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(items.size()));
  for (const auto& [name, t] : items) {
    put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw io_error("write failed on " + path);
}

std::vector<std::pair<std::string, Tensor>> load_weights(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw corruption_error(path + ": not a weight file (bad magic)");
  auto version = get<std::uint8_t>(is, "version");
  if (version != kVersion)
    throw corruption_error(path + ": unsupported weight file version " +
                           std::to_string(version));
  auto count = get<std::uint32_t>(is, "count");
  std::vector<std::pair<std::string, Tensor>> items;
  items.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name_len = get<std::uint16_t>(is, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw corruption_error(path + ": truncated name");
    auto rank = get<std::uint8_t>(is, "rank");
    Shape shape(rank);
    for (int d = 0; d < rank; ++d)
      shape[static_cast<size_t>(d)] = get<std::uint32_t>(is, "dimension");
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw corruption_error(path + ": truncated tensor data");
    items.emplace_back(std::move(name),
                       Tensor::from_data(std::move(shape), std::move(data)));
  }
  return items;
}

}  // namespace phydra
