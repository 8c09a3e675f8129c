#pragma once

// Checkpoint files:
//
//   8 bytes   magic "DUMOCKPT"
//   8 bytes   header length L, little-endian uint64
//   L bytes   JSON header
//   ...       arrays, each `count` little-endian f64 values, in header order
//
// The header carries the model config, the named slice map, the step counter,
// RNG stream states and any caller-supplied metadata. Writes go to a sibling
// temp file and are renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dumo/errors.hpp"
#include "dumo/network.hpp"

namespace dumo {

inline constexpr char kCheckpointMagic[8] = {'D', 'U', 'M', 'O', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointFormat = 1;

inline nlohmann::json to_json(const MlpConfig& c) {
  return {{"input_dim", c.input_dim},         {"hidden_dim", c.hidden_dim},
          {"depth", c.depth},                 {"time_embed_dim", c.time_embed_dim},
          {"num_classes", c.num_classes},     {"num_heads", c.num_heads},
          {"num_time_inputs", c.num_time_inputs}, {"max_frequency", c.max_frequency}};
}

inline MlpConfig mlp_config_from_json(const nlohmann::json& j) {
  MlpConfig c;
  c.input_dim = j.at("input_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.time_embed_dim = j.at("time_embed_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.num_time_inputs = j.at("num_time_inputs").get<int>();
  c.max_frequency = j.at("max_frequency").get<double>();
  c.validate();
  return c;
}

inline nlohmann::json layout_json(const ParamLayout& layout) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : layout.slices()) {
    out.push_back({{"name", s.name}, {"offset", s.offset}, {"rows", s.rows}, {"cols", s.cols}});
  }
  return out;
}

struct Checkpoint {
  MlpConfig config;
  long step = 0;
  std::map<std::string, std::vector<double>> arrays;  // "params", "ema", ...
  nlohmann::json rng_states = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();  // train config, normalization, ...

  template <typename Real>
  ModelParams<Real> params(const std::string& name) const {
    const auto it = arrays.find(name);
    if (it == arrays.end()) throw DataError("checkpoint has no array '" + name + "'");
    ModelParams<Real> p(config);
    if (it->second.size() != p.size()) throw DataError("checkpoint array '" + name + "' has wrong length");
    for (std::size_t i = 0; i < p.size(); ++i) p.values[i] = static_cast<Real>(it->second[i]);
    return p;
  }

  template <typename Real>
  void set(const std::string& name, const ModelParams<Real>& p) {
    if (!(p.config == config)) throw StructuralError("checkpoint: parameter config differs");
    arrays[name].assign(p.values.begin(), p.values.end());
  }
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw DataError("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  ParamLayout layout(ck.config);
  nlohmann::json header = {{"format", kCheckpointFormat},
                           {"config", to_json(ck.config)},
                           {"index_map", layout_json(layout)},
                           {"count", layout.total()},
                           {"step", ck.step},
                           {"rng", ck.rng_states},
                           {"meta", ck.meta}};
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, values] : ck.arrays) {
    if (values.size() != layout.total()) throw StructuralError("checkpoint: array '" + name + "' has wrong length");
    names.push_back(name);
  }
  header["arrays"] = names;
  const std::string text = header.dump();

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(kCheckpointMagic, 8);
    detail::put_u64(out, text.size());
    out.write(text.data(), std::streamsize(text.size()));
    for (const auto& [name, values] : ck.arrays) {
      for (double v : values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw DataError(path.string() + ": not a checkpoint file");
  }
  const std::uint64_t len = detail::get_u64(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), std::streamsize(len))) throw DataError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw DataError("checkpoint: malformed header: " + std::string(e.what()));
  }
  if (header.at("format").get<int>() != kCheckpointFormat) throw DataError("checkpoint: unsupported format");
  Checkpoint ck;
  ck.config = mlp_config_from_json(header.at("config"));
  if (header.at("index_map") != layout_json(ParamLayout(ck.config))) {
    throw DataError("checkpoint: index map does not match the model config");
  }
  const auto count = header.at("count").get<std::size_t>();
  ck.step = header.at("step").get<long>();
  ck.rng_states = header.at("rng");
  ck.meta = header.at("meta");
  for (const auto& name : header.at("arrays")) {
    std::vector<double> values(count);
    for (auto& v : values) v = std::bit_cast<double>(detail::get_u64(in));
    ck.arrays[name.get<std::string>()] = std::move(values);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError("checkpoint: trailing bytes");
  return ck;
}

}  // namespace dumo
