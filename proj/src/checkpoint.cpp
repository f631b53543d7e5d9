#include "teata/checkpoint.hpp"

#include "teata/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace teata {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "tensors.bin is written in native little-endian order");

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

Matrix round_to_float(const Matrix& m) { return m.cast<float>().cast<double>(); }

void save_checkpoint(const fs::path& dir, const Checkpoint& ck) {
  fs::create_directories(dir);
  std::vector<float> data;
  json index = json::object();
  for (const auto& t : ck.tensors) {
    json entry;
    entry["shape"] = {t.value.rows(), t.value.cols()};
    entry["dtype"] = "float32";
    entry["file"] = "tensors.bin";
    entry["offset"] = data.size() * sizeof(float);
    index[t.name] = entry;
    for (Eigen::Index i = 0; i < t.value.size(); ++i) data.push_back(static_cast<float>(t.value.data()[i]));
  }
  const auto bytes = std::as_bytes(std::span<const float>(data));
  {
    std::ofstream out(dir / "tensors.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IOError("cannot write " + (dir / "tensors.bin").string());
  }
  json meta;
  meta["schema_version"] = ck.schema_version;
  meta["config_hash"] = ck.config_hash;
  meta["step"] = ck.step;
  meta["method"] = ck.method;
  meta["model"] = ck.model;
  meta["tensors_bytes"] = bytes.size();
  meta["tensors_fnv1a"] = hex64(fnv1a(bytes));
  meta["parameters"] = index;
  std::ofstream out(dir / "checkpoint.json", std::ios::binary);
  out << meta.dump(2) << "\n";
  if (!out) throw IOError("cannot write " + (dir / "checkpoint.json").string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path meta_path = dir / "checkpoint.json";
  const fs::path bin_path = dir / "tensors.bin";
  if (!fs::exists(meta_path)) throw MissingFile(meta_path.string());
  if (!fs::exists(bin_path)) throw MissingFile(bin_path.string());

  json meta;
  try {
    std::ifstream in(meta_path);
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw IntegrityError(meta_path.string() + ": " + e.what());
  }
  Checkpoint ck;
  try {
    ck.schema_version = meta.at("schema_version").get<int>();
    if (ck.schema_version != kCheckpointSchemaVersion)
      throw VersionMismatch("checkpoint schema " + std::to_string(ck.schema_version) + ", expected " +
                            std::to_string(kCheckpointSchemaVersion));
    ck.config_hash = meta.at("config_hash").get<std::string>();
    ck.step = meta.at("step").get<int>();
    ck.method = meta.at("method").get<std::string>();
    ck.model = meta.at("model");
  } catch (const json::exception& e) {
    throw IntegrityError(meta_path.string() + ": " + e.what());
  }

  std::ifstream in(bin_path, std::ios::binary);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto bytes = std::as_bytes(std::span<const char>(raw));
  try {
    if (meta.at("tensors_bytes").get<std::size_t>() != raw.size())
      throw IntegrityError("tensors.bin has " + std::to_string(raw.size()) + " bytes, index expects " +
                           meta.at("tensors_bytes").dump());
    if (meta.at("tensors_fnv1a").get<std::string>() != hex64(fnv1a(bytes)))
      throw IntegrityError("tensors.bin checksum mismatch");
    for (const auto& [name, entry] : meta.at("parameters").items()) {
      if (entry.at("dtype").get<std::string>() != "float32") throw VersionMismatch(name + ": unsupported dtype");
      const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
      const auto offset = entry.at("offset").get<std::size_t>();
      if (shape.size() != 2) throw IntegrityError(name + ": expected a 2-d shape");
      const std::size_t count = static_cast<std::size_t>(shape[0] * shape[1]);
      if (offset + count * sizeof(float) > raw.size()) throw IntegrityError(name + ": extends past tensors.bin");
      std::vector<float> values(count);
      std::memcpy(values.data(), raw.data() + offset, count * sizeof(float));
      Matrix m(shape[0], shape[1]);
      for (std::size_t i = 0; i < count; ++i) m.data()[i] = values[i];
      ck.tensors.push_back({name, std::move(m)});
    }
  } catch (const json::exception& e) {
    throw IntegrityError(meta_path.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace teata
