#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rescan/scan_model.hpp"

namespace rescan {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'R', 'S', 'C', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  bool operator==(const CheckpointTensor&) const = default;
};

/// Named float32 tensors in model parameter order.
struct Checkpoint {
  std::vector<CheckpointTensor> tensors;

  bool operator==(const Checkpoint&) const = default;
};

template <typename T>
Checkpoint make_checkpoint(const RescanModel<T>& model) {
  Checkpoint ckpt;
  for (const auto& [name, p] : model.parameters()) {
    const Shape& s = p.shape();
    CheckpointTensor t;
    t.name = name;
    t.dims = {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
              static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
    t.values.reserve(p.numel());
    for (T v : p.data()) t.values.push_back(static_cast<float>(v));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

/// Copies checkpoint values into `model`; names and shapes must match exactly.
template <typename T>
void load_into(RescanModel<T>& model, const Checkpoint& ckpt) {
  auto params = model.parameters();
  if (params.size() != ckpt.tensors.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& [name, p] = params[k];
    const auto& t = ckpt.tensors[k];
    if (t.name != name) {
      throw ConfigError("checkpoint tensor " + std::to_string(k) + " is '" + t.name +
                        "', model expects '" + name + "'");
    }
    if (t.values.size() != p.numel()) {
      throw ConfigError("checkpoint tensor '" + name + "' has " + std::to_string(t.values.size()) +
                        " values, model expects " + std::to_string(p.numel()));
    }
    auto dst = p.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(t.values[i]);
  }
}

namespace detail {

template <typename U>
void put(std::ostream& os, U value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
U get(std::istream& is, const std::string& path) {
  U value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(U));
  if (!is) throw IoError("truncated checkpoint: " + path);
  return value;
}

}  // namespace detail

inline void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 0xFFFF) throw ConfigError("tensor name too long: " + t.name);
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) detail::put<std::uint32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.values.data()),
             static_cast<std::streamsize>(t.values.size() * sizeof(float)));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + where);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("not a checkpoint (bad magic): " + where);
  }
  const auto version = detail::get<std::uint32_t>(is, where);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + where);
  }
  const auto count = detail::get<std::uint32_t>(is, where);
  Checkpoint ckpt;
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointTensor t;
    const auto len = detail::get<std::uint16_t>(is, where);
    t.name.resize(len);
    is.read(t.name.data(), len);
    const auto rank = detail::get<std::uint8_t>(is, where);
    std::size_t numel = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      t.dims.push_back(detail::get<std::uint32_t>(is, where));
      numel *= t.dims.back();
    }
    t.values.resize(numel);
    is.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (!is) throw IoError("truncated checkpoint: " + where);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// key = value text files

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::istream& is, const std::string& where) {
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + ":" + std::to_string(lineno) + ": expected key = value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path.string());
  return parse_key_values(is, path.string());
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline KeyValues to_key_values(const RescanConfig& c) {
  KeyValues kv;
  kv["depth"] = std::to_string(c.scan.depth);
  kv["width"] = std::to_string(c.scan.width);
  kv["in_channels"] = std::to_string(c.scan.in_channels);
  kv["out_channels"] = std::to_string(c.scan.out_channels);
  kv["use_se"] = c.scan.use_se ? "true" : "false";
  kv["all_dilation_one"] = c.scan.all_dilation_one ? "true" : "false";
  kv["leaky_slope"] = format_double(c.scan.leaky_slope);
  kv["se_ratio"] = std::to_string(c.scan.se_ratio);
  kv["stages"] = std::to_string(c.stages);
  kv["unit"] = unit_name(c.unit);
  kv["framework"] = framework_name(c.framework);
  std::string recurrent;
  if (c.unit != UnitKind::kNone) {
    for (int j = 0; j + 1 < c.scan.depth; ++j) {
      recurrent += (recurrent.empty() ? "" : ",") + std::to_string(j);
    }
  }
  kv["state_layers"] = recurrent.empty() ? "none" : recurrent;
  return kv;
}

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true|false, got '" + v + "'");
}

inline int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

}  // namespace detail

inline RescanConfig rescan_config_from(const KeyValues& kv) {
  RescanConfig c;
  for (const auto& [key, value] : kv) {
    if (key == "depth") c.scan.depth = detail::parse_int(key, value);
    else if (key == "width") c.scan.width = detail::parse_int(key, value);
    else if (key == "in_channels") c.scan.in_channels = detail::parse_int(key, value);
    else if (key == "out_channels") c.scan.out_channels = detail::parse_int(key, value);
    else if (key == "use_se") c.scan.use_se = detail::parse_bool(key, value);
    else if (key == "all_dilation_one") c.scan.all_dilation_one = detail::parse_bool(key, value);
    else if (key == "leaky_slope") c.scan.leaky_slope = detail::parse_double(key, value);
    else if (key == "se_ratio") c.scan.se_ratio = detail::parse_int(key, value);
    else if (key == "stages") c.stages = detail::parse_int(key, value);
    else if (key == "unit") c.unit = parse_unit(value);
    else if (key == "framework") c.framework = parse_framework(value);
  }
  validate(c);
  return c;
}

inline void write_key_values(const KeyValues& kv, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write config: " + path.string());
  for (const auto& [key, value] : kv) os << key << " = " << value << "\n";
  if (!os) throw IoError("failed writing config: " + path.string());
}

/// Sidecar config path for a checkpoint: "<checkpoint>.cfg".
inline std::filesystem::path config_path_for(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".cfg");
}

template <typename T>
void save_model(const RescanModel<T>& model, const std::filesystem::path& path) {
  write_checkpoint(make_checkpoint(model), path);
  write_key_values(to_key_values(model.config()), config_path_for(path));
}

template <typename T>
RescanModel<T> load_model(const std::filesystem::path& path) {
  const auto config = rescan_config_from(read_key_values(config_path_for(path)));
  RescanModel<T> model(config, 0);
  load_into(model, read_checkpoint(path));
  return model;
}

}  // namespace rescan
