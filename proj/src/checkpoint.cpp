#include "saccader/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "saccader/config.hpp"
#include "saccader/errors.hpp"
#include "saccader/wire.hpp"

namespace saccader {

namespace {
constexpr char kMagic[8] = {'S', 'A', 'C', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;
}  // namespace

void save_checkpoint(const std::string& path, const ParameterSet<float>& ps) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DependencyError("save_checkpoint: cannot open " + path);
  os.write(kMagic, sizeof(kMagic));
  wire::write_u32(os, kVersion);
  wire::write_u32(os, static_cast<uint32_t>(ps.entries().size()));
  for (const auto& e : ps.entries()) {
    wire::write_u32(os, static_cast<uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    os.put(static_cast<char>(kDtypeF32));
    os.put(static_cast<char>(e.value.rank()));
    for (int64_t d : e.value.shape) wire::write_u32(os, static_cast<uint32_t>(d));
    for (float v : e.value.data) wire::write_f32(os, v);
  }
  if (!os) throw DependencyError("save_checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, ParameterSet<float>& ps) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DependencyError("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw DependencyError("load_checkpoint: bad magic in " + path);
  }
  if (wire::read_u32(is) != kVersion) {
    throw DependencyError("load_checkpoint: unsupported version in " + path);
  }
  const uint32_t count = wire::read_u32(is);
  std::map<std::string, Tensor<float>> loaded;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = wire::read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const int dtype = is.get();
    if (dtype != kDtypeF32) {
      throw DependencyError("load_checkpoint: unsupported dtype tag in " + path);
    }
    const int rank = is.get();
    Shape shape;
    for (int r = 0; r < rank; ++r) shape.push_back(wire::read_u32(is));
    Tensor<float> t(shape);
    for (auto& v : t.data) v = wire::read_f32(is);
    if (!is) throw DependencyError("load_checkpoint: truncated file " + path);
    loaded.emplace(std::move(name), std::move(t));
  }
  for (auto& e : ps.entries()) {
    auto it = loaded.find(e.name);
    if (it == loaded.end()) {
      throw DependencyError("load_checkpoint: " + path + " is missing tensor '" + e.name +
                            "' (checkpoint does not match this configuration)");
    }
    if (it->second.shape != e.value.shape) {
      throw DependencyError("load_checkpoint: shape mismatch for '" + e.name + "' in " + path +
                            ": file has " + shape_str(it->second.shape) + ", model expects " +
                            shape_str(e.value.shape));
    }
    e.value = std::move(it->second);
    loaded.erase(it);
  }
  if (!loaded.empty()) {
    throw DependencyError("load_checkpoint: " + path + " contains unexpected tensor '" +
                          loaded.begin()->first + "'");
  }
}

bool file_exists(const std::string& path) {
  std::error_code ec;
  return std::filesystem::exists(path, ec);
}

std::string file_content_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DependencyError("file_content_hash: cannot open " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  const std::string bytes = buf.str();
  return fnv1a64_hex(bytes.data(), bytes.size());
}

}  // namespace saccader
