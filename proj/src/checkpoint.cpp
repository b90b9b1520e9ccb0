#include "microbert/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace microbert {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

// the blob is little-endian on disk regardless of host order
void store_le(float v, char* out) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  std::memcpy(out, &bits, 4);
}

float load_le(const char* in) {
  uint32_t bits;
  std::memcpy(&bits, in, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

ordered_json config_json(const EncoderConfig& c) {
  ordered_json j;
  j["layers"] = c.layers;
  j["hidden"] = c.hidden;
  j["heads"] = c.heads;
  j["ffn"] = c.ffn;
  j["max_positions"] = c.max_positions;
  j["vocab_size"] = c.vocab_size;
  j["dropout"] = c.dropout;
  return j;
}

EncoderConfig config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.layers = j.at("layers").get<int64_t>();
  c.hidden = j.at("hidden").get<int64_t>();
  c.heads = j.at("heads").get<int64_t>();
  c.ffn = j.at("ffn").get<int64_t>();
  c.max_positions = j.at("max_positions").get<int64_t>();
  c.vocab_size = j.at("vocab_size").get<int64_t>();
  c.dropout = j.at("dropout").get<float>();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& dir, const CheckpointData& data) {
  fs::create_directories(dir);

  ordered_json manifest;
  manifest["format"] = "microbert-checkpoint-v1";
  manifest["config"] = config_json(data.config);
  ordered_json scalars = ordered_json::object();
  for (const auto& [k, v] : data.scalars) {
    if (!std::isfinite(v))
      throw std::runtime_error("checkpoint: scalar '" + k + "' is not finite");
    scalars[k] = v;
  }
  manifest["scalars"] = scalars;
  manifest["vocab"] = "vocab.txt";
  manifest["blob"] = "weights.bin";

  int64_t offset = 0;
  ordered_json table = ordered_json::object();
  for (const auto& [name, tensor] : data.tensors) {
    ordered_json entry;
    entry["shape"] = tensor.shape();
    entry["offset"] = offset;
    table[name] = entry;
    offset += tensor.size();
  }
  manifest["tensors"] = table;

  std::string blob(static_cast<size_t>(offset) * 4, '\0');
  int64_t at = 0;
  for (const auto& [name, tensor] : data.tensors) {
    for (float v : tensor.data()) {
      store_le(v, blob.data() + at * 4);
      ++at;
    }
  }

  write_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
  write_file(fs::path(dir) / "weights.bin", blob);
  write_file(fs::path(dir) / "vocab.txt", data.vocab_text);
  if (!data.config_text.empty()) write_file(fs::path(dir) / "config.cfg", data.config_text);
}

CheckpointData load_checkpoint(const std::string& dir) {
  const fs::path root(dir);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(root / "manifest.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("checkpoint: malformed manifest in " + dir + ": " + e.what());
  }
  if (manifest.value("format", "") != "microbert-checkpoint-v1")
    throw std::runtime_error("checkpoint: unrecognized format in " + dir);

  CheckpointData data;
  data.config = config_from_json(manifest.at("config"));
  for (const auto& [k, v] : manifest.at("scalars").items()) data.scalars[k] = v.get<double>();
  data.vocab_text = read_file(root / manifest.at("vocab").get<std::string>());
  if (fs::exists(root / "config.cfg")) data.config_text = read_file(root / "config.cfg");

  const std::string blob = read_file(root / manifest.at("blob").get<std::string>());
  if (blob.size() % 4 != 0)
    throw std::runtime_error("checkpoint: blob size is not a multiple of 4 in " + dir);
  const int64_t total = static_cast<int64_t>(blob.size() / 4);

  for (const auto& [name, entry] : manifest.at("tensors").items()) {
    Shape shape = entry.at("shape").get<std::vector<int64_t>>();
    const int64_t offset = entry.at("offset").get<int64_t>();
    const int64_t count = numel(shape);
    if (offset < 0 || offset + count > total)
      throw std::runtime_error("checkpoint: tensor '" + name + "' overruns the blob in " + dir);
    std::vector<float> values(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) values[i] = load_le(blob.data() + (offset + i) * 4);
    data.tensors.emplace(name, Tensor::from(std::move(shape), std::move(values)));
  }
  return data;
}

}  // namespace microbert
