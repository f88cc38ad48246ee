#pragma once

// Checkpoint archive:
//   "CMN-CKPT-v1\n"
//   u64 little-endian byte length of the JSON header
//   JSON header {config, vocabulary, parameters: [{name, rows, cols}], metadata}
//   float64 little-endian payload for each parameter in header order (row-major)

#include "cmn/model.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

namespace cmn {

inline constexpr char kCheckpointMagic[] = "CMN-CKPT-v1\n";

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Checkpoint {
  Model model;
  Vocabulary vocabulary;
  nlohmann::json metadata;
};

inline void save_checkpoint(const std::string& path, const Model& model, const Vocabulary& vocab,
                            const nlohmann::json& metadata = nlohmann::json::object()) {
  const auto& params = model.parameters();
  nlohmann::json header;
  header["config"] = model.config();
  header["vocabulary"] = vocab.tokens();
  header["metadata"] = metadata;
  header["parameters"] = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i)
    header["parameters"].push_back(
        {{"name", params[i].name}, {"rows", params[i].value.rows()}, {"cols", params[i].value.cols()}});
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params[i].value;
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw Error("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  char magic[sizeof(kCheckpointMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw Error(path + ": not a CMN-CKPT-v1 checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1ull << 30)) throw Error(path + ": corrupt checkpoint header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error(path + ": truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": corrupt checkpoint header: " + e.what());
  }
  Vocabulary vocab(header.at("vocabulary").get<std::vector<std::string>>());
  Model model(header.at("config").get<ModelConfig>());
  if (model.config().vocab_size != vocab.size()) throw Error(path + ": vocabulary size disagrees with config");

  auto& params = model.parameters();
  const auto& manifest = header.at("parameters");
  if (manifest.size() != params.size()) throw Error(path + ": parameter count disagrees with config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    auto& p = params[i];
    if (entry.at("name").get<std::string>() != p.name || entry.at("rows").get<Eigen::Index>() != p.value.rows() ||
        entry.at("cols").get<Eigen::Index>() != p.value.cols())
      throw Error(path + ": parameter '" + p.name + "' does not match the configured architecture");
    in.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!in) throw Error(path + ": truncated parameter payload");
  }
  return Checkpoint{std::move(model), std::move(vocab), header.value("metadata", nlohmann::json::object())};
}

}  // namespace cmn
