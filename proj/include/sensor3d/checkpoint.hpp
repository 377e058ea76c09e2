#pragma once

// Checkpoint layout:
//
//   SENSOR3D-CHECKPOINT 1
//   config sequence_length=3 resolution=128 base_features=64 capacity_divisor=1 variant=full classes=1
//   tensor <name> <f32|f64> <d0,d1,...> <byte offset> <byte length>
//   ...
//   end
//   <payload: raw little-endian tensors, offsets relative to the first payload byte>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sensor3d/network.hpp"

namespace sensor3d {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

namespace detail {

inline std::map<std::string, std::string> parse_key_values(std::istringstream& in) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw MalformedFile("checkpoint: bad config token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

inline std::size_t parse_size(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw MalformedFile(std::string("checkpoint: bad ") + what + " '" + s + "'");
  }
}

inline Shape parse_dims(const std::string& s) {
  Shape out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(parse_size(part, "dimension"));
  return out;
}

template <typename T>
constexpr const char* dtype_tag() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

}  // namespace detail

template <typename T>
void save_checkpoint(const Network<T>& net, const std::string& path) {
  std::ostringstream header;
  header << "SENSOR3D-CHECKPOINT 1\n";
  header << "config " << describe(net.config) << "\n";
  std::size_t offset = 0;
  for (const auto& e : net.params) {
    const std::size_t bytes = e.value.size() * sizeof(T);
    std::string dims;
    for (std::size_t d : e.value.shape()) dims += (dims.empty() ? "" : ",") + std::to_string(d);
    header << "tensor " << e.name << ' ' << detail::dtype_tag<T>() << ' ' << dims << ' ' << offset << ' ' << bytes
           << "\n";
    offset += bytes;
  }
  header << "end\n";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path);
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& e : net.params)
    out.write(reinterpret_cast<const char*>(e.value.data()), static_cast<std::streamsize>(e.value.size() * sizeof(T)));
  if (!out) throw IoError("short write to " + path);
}

struct CheckpointEntry {
  std::string name;
  std::string dtype;
  Shape shape;
  std::size_t offset = 0;
  std::size_t bytes = 0;
};

struct CheckpointHeader {
  NetworkConfig config;
  std::vector<CheckpointEntry> entries;
  std::size_t payload_start = 0;
};

inline CheckpointHeader read_checkpoint_header(std::istream& in) {
  CheckpointHeader h;
  std::string line;
  if (!std::getline(in, line) || line != "SENSOR3D-CHECKPOINT 1") throw MalformedFile("checkpoint: missing magic line");
  if (!std::getline(in, line) || line.rfind("config ", 0) != 0) throw MalformedFile("checkpoint: missing config line");
  {
    std::istringstream ls(line.substr(7));
    auto kv = detail::parse_key_values(ls);
    const char* keys[] = {"sequence_length", "resolution", "base_features", "capacity_divisor", "variant", "classes"};
    for (const char* k : keys)
      if (!kv.count(k)) throw MalformedFile(std::string("checkpoint: config lacks ") + k);
    h.config.sequence_length = detail::parse_size(kv["sequence_length"], "sequence_length");
    h.config.resolution = detail::parse_size(kv["resolution"], "resolution");
    h.config.base_features = detail::parse_size(kv["base_features"], "base_features");
    h.config.capacity_divisor = detail::parse_size(kv["capacity_divisor"], "capacity_divisor");
    h.config.classes = detail::parse_size(kv["classes"], "classes");
    try {
      h.config.variant = parse_variant(kv["variant"]);
    } catch (const InvalidArgument& e) {
      throw MalformedFile(std::string("checkpoint: ") + e.what());
    }
  }
  while (true) {
    if (!std::getline(in, line)) throw MalformedFile("checkpoint: header not terminated by 'end'");
    if (line == "end") break;
    std::istringstream ls(line);
    std::string kw, offset, bytes, dims;
    CheckpointEntry e;
    if (!(ls >> kw >> e.name >> e.dtype >> dims >> offset >> bytes) || kw != "tensor")
      throw MalformedFile("checkpoint: bad tensor line '" + line + "'");
    if (e.dtype != "f32" && e.dtype != "f64") throw MalformedFile("checkpoint: unknown dtype " + e.dtype);
    e.shape = detail::parse_dims(dims);
    e.offset = detail::parse_size(offset, "offset");
    e.bytes = detail::parse_size(bytes, "byte length");
    if (e.bytes != shape_numel(e.shape) * (e.dtype == "f32" ? 4 : 8))
      throw MalformedFile("checkpoint: byte length of " + e.name + " disagrees with its shape");
    h.entries.push_back(std::move(e));
  }
  h.payload_start = static_cast<std::size_t>(in.tellg());
  return h;
}

/// Loads a checkpoint, converting stored values to T. With `expected` set,
/// any difference in network configuration raises ConfigMismatch.
template <typename T>
Network<T> load_checkpoint(const std::string& path, const std::optional<NetworkConfig>& expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  CheckpointHeader h = read_checkpoint_header(in);
  if (expected && !(expected->normalized() == h.config))
    throw ConfigMismatch("checkpoint " + path + " was trained with " + describe(h.config) + " but " +
                         describe(expected->normalized()) + " was requested");
  Network<T> net;
  try {
    net = build<T>(h.config);
  } catch (const InvalidArgument& e) {
    throw MalformedFile(std::string("checkpoint: invalid stored config: ") + e.what());
  }
  if (h.entries.size() != net.params.size()) throw MalformedFile("checkpoint: parameter count mismatch in " + path);
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (std::size_t i = 0; i < h.entries.size(); ++i) {
    const CheckpointEntry& e = h.entries[i];
    NamedTensor<T>& dst = net.params[i];
    if (e.name != dst.name || e.shape != dst.value.shape())
      throw MalformedFile("checkpoint: entry " + e.name + " " + shape_str(e.shape) + " does not match expected " +
                          dst.name + " " + shape_str(dst.value.shape()));
    if (e.offset + e.bytes > payload.size())
      throw TruncatedFile("checkpoint: payload of " + e.name + " extends past end of " + path);
    const char* src = payload.data() + e.offset;
    if (e.dtype == "f32") {
      for (std::size_t k = 0; k < dst.value.size(); ++k) {
        float v;
        std::memcpy(&v, src + 4 * k, 4);
        dst.value[k] = static_cast<T>(v);
      }
    } else {
      for (std::size_t k = 0; k < dst.value.size(); ++k) {
        double v;
        std::memcpy(&v, src + 8 * k, 8);
        dst.value[k] = static_cast<T>(v);
      }
    }
  }
  return net;
}

}  // namespace sensor3d
