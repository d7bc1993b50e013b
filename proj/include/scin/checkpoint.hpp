#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "scin/error.hpp"
#include "scin/training.hpp"
#include "scin/unet.hpp"

namespace scin {

// Checkpoint container, version 1:
//   "SCINCKPT" | u32 version | u64 header_len | header (JSON text)
//   | per parameter: u32 id_len, id, u32 rank, u64 dims[rank], f64 data[]
//   | u8 has_optim [| u64 n | per entry: u32 id_len, id, u64 steps, u64 len, f64 m[], f64 v[]]
//   | u64 FNV-1a of every preceding byte
// All integers and floats are little-endian.
inline constexpr char kCheckpointMagic[8] = {'S', 'C', 'I', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace io {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    u64(v);
  }
  void f32(float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    u32(v);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n, std::string what) : p_(p), n_(n), what_(std::move(what)) {}
  void need(std::size_t k, const char* field) const {
    if (pos_ + k > n_) throw LoadError(what_ + ": truncated while reading " + field);
  }
  void bytes(void* out, std::size_t k, const char* field) {
    need(k, field);
    std::memcpy(out, p_ + pos_, k);
    pos_ += k;
  }
  std::uint8_t u8(const char* field) {
    need(1, field);
    return p_[pos_++];
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p_[pos_++]) << (8 * i);
    return v;
  }
  double f64(const char* field) {
    const std::uint64_t v = u64(field);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  float f32(const char* field) {
    const std::uint32_t v = u32(field);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string str(const char* field) {
    const std::uint32_t len = u32(field);
    need(len, field);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

// Writes to a sibling temp file and renames, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace io

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"in_channels", c.in_channels}, {"base_channels", c.base_channels}, {"depth", c.depth},
          {"dropout_p", c.dropout_p},     {"leaky_slope", c.leaky_slope},     {"norm_eps", c.norm_eps},
          {"sources", c.sources}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& where = "model",
                                          ModelConfig c = {}) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  auto get = [&](const char* key, auto& dst) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(dst);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where + "." + key + ": wrong type");
    }
  };
  get("in_channels", c.in_channels);
  get("base_channels", c.base_channels);
  get("depth", c.depth);
  get("dropout_p", c.dropout_p);
  get("leaky_slope", c.leaky_slope);
  get("norm_eps", c.norm_eps);
  get("sources", c.sources);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainingMeta& m) {
  return {{"mode", m.mode},
          {"seed", m.seed},
          {"epochs_run", m.epochs_run},
          {"best_epoch", m.best_epoch},
          {"best_val_dice", m.best_val_dice},
          {"best_operating_point", m.best_operating_point},
          {"loss_history", m.loss_history},
          {"val_dice_history", m.val_dice_history},
          {"cohort_to_source", m.cohort_to_source}};
}

inline TrainingMeta training_meta_from_json(const nlohmann::json& j) {
  TrainingMeta m;
  j.at("mode").get_to(m.mode);
  j.at("seed").get_to(m.seed);
  j.at("epochs_run").get_to(m.epochs_run);
  j.at("best_epoch").get_to(m.best_epoch);
  j.at("best_val_dice").get_to(m.best_val_dice);
  j.at("best_operating_point").get_to(m.best_operating_point);
  j.at("loss_history").get_to(m.loss_history);
  j.at("val_dice_history").get_to(m.val_dice_history);
  j.at("cohort_to_source").get_to(m.cohort_to_source);
  return m;
}

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint<T>& ck) {
  const auto params = ck.model.parameters();
  nlohmann::json header;
  header["format"] = "scin-checkpoint";
  header["config"] = to_json(ck.model.config());
  nlohmann::json reg = nlohmann::json::array();
  for (const auto& n : ck.model.registry().names()) reg.push_back({{"name", n}, {"index", ck.model.source(n).index}});
  header["registry"] = reg;
  header["meta"] = to_json(ck.meta);
  header["parameter_count"] = params.size();
  if (ck.optim) {
    header["optim"] = {{"lr", ck.optim->lr},
                       {"beta1", ck.optim->beta1},
                       {"beta2", ck.optim->beta2},
                       {"eps", ck.optim->eps},
                       {"step", ck.optim->step}};
  }
  const std::string text = header.dump();

  io::Writer w;
  w.bytes(kCheckpointMagic, 8);
  w.u32(kCheckpointVersion);
  w.u64(text.size());
  w.bytes(text.data(), text.size());
  for (const auto& p : params) {
    w.str(p.id);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.u64(d);
    for (T v : p.tensor.data()) w.f64(static_cast<double>(v));
  }
  w.u8(ck.optim ? 1 : 0);
  if (ck.optim) {
    w.u64(ck.optim->moments.size());
    for (const auto& [id, mom] : ck.optim->moments) {
      w.str(id);
      w.u64(mom.steps);
      w.u64(mom.m.size());
      for (double v : mom.m) w.f64(v);
      for (double v : mom.v) w.f64(v);
    }
  }
  const std::uint64_t h = io::fnv1a(w.buffer().data(), w.buffer().size());
  w.u64(h);
  return std::move(w.buffer());
}

template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_checkpoint(ck));
}

/// Parses a checkpoint. Any structural problem raises LoadError naming the
/// offending field; no partially built model escapes.
template <typename T>
Checkpoint<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 8 + 4 + 8 + 8) throw LoadError(what + ": file too short (truncated header)");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw LoadError(what + ": bad magic, not a checkpoint");
  const std::size_t body = bytes.size() - 8;
  io::Reader tail(bytes.data() + body, 8, what);
  const std::uint64_t stored = tail.u64("checksum");
  if (io::fnv1a(bytes.data(), body) != stored) {
    throw LoadError(what + ": checksum mismatch (truncated or corrupt payload)");
  }
  io::Reader r(bytes.data(), body, what);
  char magic[8];
  r.bytes(magic, 8, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw LoadError(what + ": version " + std::to_string(version) + " unsupported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t hlen = r.u64("header_len");
  r.need(hlen, "header");
  std::string text(hlen, '\0');
  r.bytes(text.data(), hlen, "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(what + ": header is not valid JSON: " + e.what());
  }

  ModelConfig cfg;
  TrainingMeta meta;
  std::vector<std::string> registry;
  try {
    cfg = model_config_from_json(header.at("config"), "config");
    for (const auto& e : header.at("registry")) {
      if (e.at("index").get<std::size_t>() != registry.size()) throw LoadError(what + ": registry indices out of order");
      registry.push_back(e.at("name").get<std::string>());
    }
    meta = training_meta_from_json(header.at("meta"));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(what + ": malformed header field: " + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(what + ": " + e.what());
  }
  if (registry != cfg.sources) throw LoadError(what + ": registry does not match config.sources");

  Model<T> model(cfg, 0);
  std::map<std::string, Parameter<T>> expected;
  for (auto& p : model.parameters()) expected.emplace(p.id, p);
  const std::size_t count = header.value("parameter_count", std::size_t{0});
  std::set<std::string> seen;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string id = r.str("parameter id");
    auto it = expected.find(id);
    if (it == expected.end()) throw LoadError(what + ": unknown parameter '" + id + "'");
    if (!seen.insert(id).second) throw LoadError(what + ": duplicate parameter '" + id + "'");
    const std::uint32_t rank = r.u32("parameter rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u64("parameter dims"));
    if (shape != it->second.tensor.shape()) {
      throw LoadError(what + ": parameter '" + id + "' has shape " + shape_str(shape) + ", expected " +
                      shape_str(it->second.tensor.shape()));
    }
    Tensor<T> t = it->second.tensor;
    for (auto& v : t.data()) v = static_cast<T>(r.f64("parameter data"));
  }
  for (const auto& [id, p] : expected) {
    if (!seen.count(id)) throw LoadError(what + ": missing parameter '" + id + "'");
  }

  std::optional<OptimState> optim;
  if (r.u8("optimizer flag")) {
    OptimState st;
    try {
      const auto& o = header.at("optim");
      o.at("lr").get_to(st.lr);
      o.at("beta1").get_to(st.beta1);
      o.at("beta2").get_to(st.beta2);
      o.at("eps").get_to(st.eps);
      o.at("step").get_to(st.step);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(what + ": malformed optim header: " + e.what());
    }
    const std::uint64_t n = r.u64("optimizer entry count");
    for (std::uint64_t i = 0; i < n; ++i) {
      const std::string id = r.str("optimizer id");
      AdamMoments mom;
      mom.steps = r.u64("optimizer steps");
      const std::uint64_t len = r.u64("optimizer length");
      r.need(len * 16, "optimizer moments");
      mom.m.resize(len);
      mom.v.resize(len);
      for (auto& v : mom.m) v = r.f64("optimizer m");
      for (auto& v : mom.v) v = r.f64("optimizer v");
      st.moments.emplace(id, std::move(mom));
    }
    optim = std::move(st);
  }
  if (r.remaining() != 0) throw LoadError(what + ": trailing bytes after payload");
  return Checkpoint<T>{std::move(model), std::move(meta), std::move(optim)};
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = io::read_file(path);
  } catch (const IoError& e) {
    throw LoadError(e.what());
  }
  return deserialize_checkpoint<T>(bytes, path.string());
}

}  // namespace scin
