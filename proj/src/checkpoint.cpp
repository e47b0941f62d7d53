#include "effnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "effnet/digest.hpp"
#include "effnet/errors.hpp"

namespace effnet {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'E', 'F', 'N', 'M'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(std::string_view bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  template <typename T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what).data(), sizeof(T));
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw DataError(origin_ + ": truncated while reading " + what + " at byte " +
                      std::to_string(pos_));
    }
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

json to_json(const ModelConfig& cfg) {
  json stages = json::array();
  for (const auto& s : cfg.stages) {
    stages.push_back({{"blocks", s.blocks},
                      {"channels", s.channels},
                      {"stride", s.stride},
                      {"expansion", s.expansion},
                      {"kernel", s.kernel}});
  }
  return {{"rcc", cfg.rcc},
          {"rds", cfg.rds},
          {"ff", cfg.ff},
          {"attention", cfg.attention},
          {"stem_channels", cfg.stem_channels},
          {"stages", stages},
          {"tap_blocks", cfg.tap_blocks},
          {"se_reduction", cfg.se_reduction},
          {"block_se", cfg.block_se},
          {"seed", cfg.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config: expected a JSON object");
  ModelConfig cfg;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "rcc") cfg.rcc = v.get<bool>();
      else if (key == "rds") cfg.rds = v.get<bool>();
      else if (key == "ff") cfg.ff = v.get<bool>();
      else if (key == "attention") cfg.attention = v.get<bool>();
      else if (key == "stem_channels") cfg.stem_channels = v.get<std::size_t>();
      else if (key == "tap_blocks") cfg.tap_blocks = v.get<std::vector<std::size_t>>();
      else if (key == "se_reduction") cfg.se_reduction = v.get<std::size_t>();
      else if (key == "block_se") cfg.block_se = v.get<bool>();
      else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
      else if (key == "stages") {
        cfg.stages.clear();
        for (const auto& s : v) {
          StageSpec st;
          st.blocks = s.at("blocks").get<std::size_t>();
          st.channels = s.at("channels").get<std::size_t>();
          st.stride = s.at("stride").get<int>();
          st.expansion = s.at("expansion").get<std::size_t>();
          st.kernel = s.at("kernel").get<std::size_t>();
          cfg.stages.push_back(st);
        }
      } else {
        throw ConfigError("model config: unknown key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return cfg;
}

std::string canonical_config(const ModelConfig& cfg) { return to_json(cfg).dump(); }

std::string config_digest(const ModelConfig& cfg) { return sha256(canonical_config(cfg)); }

const TensorRecord* Checkpoint::find(std::string_view name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put<std::uint16_t>(out, Checkpoint::kVersion);
  out += config_digest(ckpt.model);
  const std::string meta = json{{"model", to_json(ckpt.model)}, {"state", ckpt.state}}.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    if (r.name.size() > 0xFFFF) throw UsageError("checkpoint: record name too long");
    if (r.shape.size() > 0xFF) throw UsageError("checkpoint: rank too large");
    if (shape_numel(r.shape) != r.values.size()) {
      throw UsageError("checkpoint: record " + r.name + " has " +
                       std::to_string(r.values.size()) + " values for shape " +
                       shape_str(r.shape));
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    out += r.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(r.shape.size()));
    for (auto e : r.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    out.append(reinterpret_cast<const char*>(r.values.data()), r.values.size() * 4);
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes, const std::string& origin) {
  Reader in(bytes, origin);
  if (in.take(4, "magic") != std::string_view(kMagic, 4)) {
    throw DataError(origin + ": not a checkpoint (bad magic)");
  }
  const auto version = in.get<std::uint16_t>("version");
  if (version != Checkpoint::kVersion) {
    throw DataError(origin + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::string digest(in.take(32, "config digest"));
  const auto meta_len = in.get<std::uint32_t>("meta length");
  json meta;
  try {
    meta = json::parse(in.take(meta_len, "meta"));
  } catch (const json::exception& e) {
    throw DataError(origin + ": corrupt meta block: " + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.model = model_config_from_json(meta.at("model"));
    if (meta.contains("state")) ckpt.state = meta.at("state");
  } catch (const std::exception& e) {
    throw DataError(origin + ": bad model config: " + e.what());
  }
  if (config_digest(ckpt.model) != digest) {
    throw DataError(origin + ": config digest mismatch; header " + to_hex(digest) +
                    ", embedded config hashes to " + to_hex(config_digest(ckpt.model)));
  }
  const auto count = in.get<std::uint32_t>("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord r;
    const auto name_len = in.get<std::uint16_t>("record name length");
    r.name = std::string(in.take(name_len, "record name"));
    const auto rank = in.get<std::uint8_t>("record rank");
    for (std::uint8_t d = 0; d < rank; ++d) r.shape.push_back(in.get<std::uint32_t>("extent"));
    const std::size_t n = shape_numel(r.shape);
    auto raw = in.take(n * 4, "record values");
    r.values.resize(n);
    std::memcpy(r.values.data(), raw.data(), n * 4);
    ckpt.records.push_back(std::move(r));
  }
  if (!in.at_end()) throw DataError(origin + ": trailing bytes after the last record");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  f.close();
  if (!f) throw Error("checkpoint: failed to write " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_checkpoint(ss.str(), path.string());
}

std::vector<TensorRecord> tensor_records(const ParameterList& params,
                                         const std::string& prefix) {
  std::vector<TensorRecord> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    TensorRecord r;
    r.name = prefix + p.name;
    r.shape = p.tensor.shape();
    auto d = p.tensor.data();
    r.values.assign(d.begin(), d.end());
    out.push_back(std::move(r));
  }
  return out;
}

void load_tensors(const ParameterList& params, const Checkpoint& ckpt,
                  const std::string& prefix) {
  for (const auto& p : params) {
    const std::string name = prefix + p.name;
    const TensorRecord* r = ckpt.find(name);
    if (!r) throw DataError("checkpoint: missing record " + name);
    if (r->shape != p.tensor.shape()) {
      throw DataError("checkpoint: record " + name + " has shape " + shape_str(r->shape) +
                      ", model expects " + shape_str(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = r->values[i];
  }
}

void require_config(const Checkpoint& ckpt, const ModelConfig& expected) {
  if (config_digest(ckpt.model) != config_digest(expected)) {
    throw DataError("checkpoint: written for config " + canonical_config(ckpt.model) +
                    ", expected " + canonical_config(expected));
  }
}

EffNetMini restore_model(const Checkpoint& ckpt) {
  EffNetMini model(ckpt.model);
  load_tensors(model.parameters(), ckpt);
  return model;
}

}  // namespace effnet
