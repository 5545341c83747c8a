#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "textsep/rng.hpp"
#include "textsep/tensor.hpp"

namespace textsep::diff {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

// Flat, ordered collection of trainable tensors. Order of registration is the
// order parameters are saved and stepped in, so runs are reproducible.
template <typename T>
class ParameterStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back(Parameter<T>{name, std::move(t)});
    return params_.back().tensor;
  }

  Tensor<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second].tensor;
  }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }

  void zero_grads() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Checkpoint container: a fixed magic, a JSON header describing the tensor
// table, then raw float32 little-endian payload.
//
//   bytes 0..7    "TSCKPT01"
//   bytes 8..15   u64 header byte count (little endian)
//   header        UTF-8 JSON: {format_version, model_kind, config_hash,
//                 meta, tensors: [{name, shape, offset, count}]}
//   payload       float32 data, offsets are element indices into it

inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  int format_version = 0;
  std::string model_kind;
  std::string config_hash;
  nlohmann::json meta;
  std::vector<NamedArray> tensors;

  const NamedArray* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

inline std::string hash_hex(std::string_view s) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(hash_str(s)));
  return std::string(buf);
}

inline void save_checkpoint(const std::string& path, const std::string& model_kind,
                            const std::string& config_hash,
                            const std::vector<NamedArray>& tensors,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["model_kind"] = model_kind;
  header["config_hash"] = config_hash;
  header["meta"] = meta;
  auto table = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& t : tensors) {
    if (numel(t.shape) != static_cast<std::int64_t>(t.data.size())) {
      throw ShapeError("save_checkpoint: '" + t.name + "' data does not match shape");
    }
    table.push_back({{"name", t.name},
                     {"shape", t.shape},
                     {"offset", offset},
                     {"count", static_cast<std::int64_t>(t.data.size())}});
    offset += static_cast<std::int64_t>(t.data.size());
  }
  header["tensors"] = std::move(table);
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FileError("save_checkpoint: cannot open '" + path + "'");
  f.write(kCheckpointMagic, 8);
  const std::uint64_t hlen = hs.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
  f.write(lenbuf, 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& t : tensors) {
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!f) throw FileError("save_checkpoint: short write to '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileError("load_checkpoint: cannot open '" + path + "'");
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw FormatError("load_checkpoint: '" + path + "' is not a checkpoint file");
  }
  char lenbuf[8];
  f.read(lenbuf, 8);
  if (!f) throw FormatError("load_checkpoint: truncated header in '" + path + "'");
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) {
    hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
  }
  if (hlen > (1ull << 30)) throw FormatError("load_checkpoint: absurd header size");
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw FormatError("load_checkpoint: truncated header in '" + path + "'");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_checkpoint: bad header JSON: " + std::string(e.what()));
  }

  Checkpoint ck;
  try {
    ck.format_version = header.at("format_version").get<int>();
    ck.model_kind = header.at("model_kind").get<std::string>();
    ck.config_hash = header.at("config_hash").get<std::string>();
    ck.meta = header.value("meta", nlohmann::json::object());
    for (const auto& e : header.at("tensors")) {
      NamedArray t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<Shape>();
      const auto count = e.at("count").get<std::int64_t>();
      if (count != numel(t.shape)) {
        throw FormatError("load_checkpoint: '" + t.name + "' count does not match shape");
      }
      t.data.resize(static_cast<std::size_t>(count));
      ck.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_checkpoint: malformed header: " + std::string(e.what()));
  }
  if (ck.format_version != kCheckpointVersion) {
    throw FormatError("load_checkpoint: unsupported format_version " +
                      std::to_string(ck.format_version));
  }
  for (auto& t : ck.tensors) {
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!f) throw FormatError("load_checkpoint: truncated payload in '" + path + "'");
  }
  return ck;
}

template <typename T>
std::vector<NamedArray> store_arrays(const ParameterStore<T>& store) {
  std::vector<NamedArray> out;
  out.reserve(store.all().size());
  for (const auto& p : store.all()) {
    NamedArray a;
    a.name = p.name;
    a.shape = p.tensor.shape();
    a.data.reserve(p.tensor.values().size());
    for (const T& v : p.tensor.values()) a.data.push_back(static_cast<float>(v));
    out.push_back(std::move(a));
  }
  return out;
}

// Strict restore: every parameter in the store must be present with an
// identical shape. Extra arrays in the checkpoint (optimizer state) are left
// for the caller.
template <typename T>
void load_into_store(const Checkpoint& ck, ParameterStore<T>& store) {
  for (auto& p : store.all()) {
    const NamedArray* src = ck.find(p.name);
    if (!src) throw FormatError("checkpoint is missing parameter '" + p.name + "'");
    if (src->shape != p.tensor.shape()) {
      throw FormatError("checkpoint parameter '" + p.name + "' has shape " +
                        shape_str(src->shape) + ", model expects " + shape_str(p.tensor.shape()));
    }
    auto& dst = p.tensor.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src->data[i]);
  }
}

}  // namespace textsep::diff
