#pragma once

// Checkpoint container: manifest.json (format version, model config, dtype,
// parameter names and shapes in storage order) plus params.bin holding the
// raw little-endian arrays back to back in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "mnmt/model.hpp"

namespace mnmt {

inline constexpr int kCheckpointFormatVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

struct IncompatibleCheckpoint : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "float32";
  else return "float64";
}

struct StoredArray {
  Shape shape;
  std::vector<double> values;  // widened on load; narrowed back exactly
};

struct Checkpoint {
  ModelConfig config;
  std::string dtype;
  std::vector<std::string> names;
  std::map<std::string, StoredArray> arrays;
};

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["config"] = model.config();
  manifest["dtype"] = dtype_name<T>();
  nlohmann::json params = nlohmann::json::array();
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + (dir / "params.bin").string());
  const auto& ps = model.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& t = ps.tensors()[i];
    params.push_back({{"name", ps.names()[i]}, {"shape", t.shape()}});
    bin.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(T)));
  }
  manifest["parameters"] = params;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("no checkpoint manifest in " + dir.string());
  const nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw IncompatibleCheckpoint("unsupported checkpoint format version");
  Checkpoint ck;
  ck.config = manifest.at("config").get<ModelConfig>();
  ck.dtype = manifest.at("dtype").get<std::string>();
  if (ck.dtype != "float32" && ck.dtype != "float64")
    throw IncompatibleCheckpoint("unsupported dtype " + ck.dtype);
  const std::size_t width = ck.dtype == "float32" ? 4 : 8;
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("missing params.bin in " + dir.string());
  for (const auto& p : manifest.at("parameters")) {
    StoredArray a;
    a.shape = p.at("shape").get<Shape>();
    const std::size_t n = shape_size(a.shape);
    a.values.resize(n);
    std::vector<char> raw(n * width);
    if (!bin.read(raw.data(), static_cast<std::streamsize>(raw.size())))
      throw IncompatibleCheckpoint("params.bin is shorter than the manifest");
    for (std::size_t i = 0; i < n; ++i) {
      if (width == 4) {
        float f;
        std::memcpy(&f, raw.data() + i * 4, 4);
        a.values[i] = f;
      } else {
        std::memcpy(&a.values[i], raw.data() + i * 8, 8);
      }
    }
    const auto name = p.at("name").get<std::string>();
    ck.names.push_back(name);
    ck.arrays.emplace(name, std::move(a));
  }
  if (bin.peek() != std::char_traits<char>::eof())
    throw IncompatibleCheckpoint("params.bin is longer than the manifest");
  return ck;
}

struct WarmStartReport {
  std::vector<std::string> copied;
  std::vector<std::string> fresh;    // present in the model, absent from the checkpoint
  std::vector<std::string> ignored;  // present in the checkpoint only
};

// Copies every array the checkpoint shares with the model; the rest keep
// their fresh initialization.
template <class T>
WarmStartReport warm_start(Model<T>& model, const Checkpoint& ck) {
  if (!model.config().shares_shapes_with(ck.config))
    throw IncompatibleCheckpoint("checkpoint dimensions differ from the model configuration");
  WarmStartReport report;
  auto& ps = model.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& name = ps.names()[i];
    auto it = ck.arrays.find(name);
    if (it == ck.arrays.end()) {
      report.fresh.push_back(name);
      continue;
    }
    auto& t = ps.tensors()[i];
    if (it->second.shape != t.shape())
      throw IncompatibleCheckpoint("shape mismatch for " + name + ": checkpoint " +
                                   shape_str(it->second.shape) + ", model " + shape_str(t.shape()));
    auto dst = t.mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(it->second.values[j]);
    report.copied.push_back(name);
  }
  for (const auto& name : ck.names)
    if (!ps.contains(name)) report.ignored.push_back(name);
  return report;
}

// Builds a model of the checkpoint's own architecture and loads it fully.
template <class T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
  Model<T> model(ck.config, 0);
  const auto report = warm_start(model, ck);
  if (!report.fresh.empty())
    throw IncompatibleCheckpoint("checkpoint lacks array " + report.fresh.front());
  return model;
}

}  // namespace mnmt
