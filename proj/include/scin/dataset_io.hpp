#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "scin/checkpoint.hpp"
#include "scin/cohort.hpp"
#include "scin/error.hpp"

namespace scin {

inline constexpr char kVolumeMagic[8] = {'S', 'C', 'I', 'N', 'V', 'O', 'L', '1'};
inline constexpr std::uint32_t kVolumeVersion = 1;
inline constexpr int kManifestVersion = 1;

inline std::string label_style_str(const LabelStyle& s) {
  switch (s.kind) {
    case LabelStyle::Kind::Exact:
      return "exact";
    case LabelStyle::Kind::DilateBy:
      return "dilate:" + std::to_string(s.amount);
    case LabelStyle::Kind::ErodeBy:
      return "erode:" + std::to_string(s.amount);
    case LabelStyle::Kind::MissingSmallLesions:
      return "missing-small:" + std::to_string(s.amount);
  }
  return "";
}

inline LabelStyle parse_label_style(const std::string& text, const std::string& field) {
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  if (kind == "exact" && colon == std::string::npos) return LabelStyle::exact();
  if (colon == std::string::npos) throw ConfigError(field + ": expected exact | dilate:r | erode:r | missing-small:k");
  std::size_t amount = 0;
  try {
    std::size_t used = 0;
    const long long v = std::stoll(text.substr(colon + 1), &used);
    if (used != text.size() - colon - 1 || v < 0) throw std::invalid_argument("bad");
    amount = static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError(field + ": bad amount in '" + text + "'");
  }
  if (kind == "dilate") return LabelStyle::dilate(amount);
  if (kind == "erode") return LabelStyle::erode(amount);
  if (kind == "missing-small") {
    if (amount < 1) throw ConfigError(field + ": k must be >= 1");
    return LabelStyle::missing_small(amount);
  }
  throw ConfigError(field + ": unknown label style '" + kind + "'");
}

inline nlohmann::json to_json(const CohortSpec& s) {
  return {{"name", s.name},
          {"extent", {s.extent.d, s.extent.h, s.extent.w}},
          {"channels", s.channels},
          {"lesion_count", s.lesion_count},
          {"radius_median", s.radius_median},
          {"radius_sigma", s.radius_sigma},
          {"background", s.background},
          {"lesion_intensity_shift", s.lesion_intensity_shift},
          {"background_noise_sigma", s.background_noise_sigma},
          {"blur", s.blur},
          {"gain", s.gain},
          {"offset", s.offset},
          {"label_style", label_style_str(s.label_style)},
          {"seed", s.seed}};
}

/// Reads a cohort spec on top of `base`; unknown keys and type errors are
/// reported with their dotted path.
inline CohortSpec cohort_spec_from_json(const nlohmann::json& j, const std::string& where, CohortSpec base = {}) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  static const std::set<std::string> known{"name",  "extent",     "channels",
                                           "lesion_count", "radius_median", "radius_sigma",
                                           "background",   "lesion_intensity_shift", "background_noise_sigma",
                                           "blur",         "gain",          "offset",
                                           "label_style",  "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError(where + "." + it.key() + ": unknown field");
  }
  auto get = [&](const char* key, auto& dst) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(dst);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where + "." + key + ": wrong type");
    }
  };
  CohortSpec s = std::move(base);
  get("name", s.name);
  if (j.contains("extent")) {
    std::vector<std::size_t> e;
    get("extent", e);
    if (e.size() != 3) throw ConfigError(where + ".extent: expected [d,h,w]");
    s.extent = {e[0], e[1], e[2]};
  }
  get("channels", s.channels);
  get("lesion_count", s.lesion_count);
  get("radius_median", s.radius_median);
  get("radius_sigma", s.radius_sigma);
  get("background", s.background);
  get("lesion_intensity_shift", s.lesion_intensity_shift);
  get("background_noise_sigma", s.background_noise_sigma);
  get("blur", s.blur);
  get("gain", s.gain);
  get("offset", s.offset);
  get("seed", s.seed);
  if (j.contains("label_style")) {
    std::string style;
    get("label_style", style);
    s.label_style = parse_label_style(style, where + ".label_style");
  }
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return s;
}

inline std::vector<std::uint8_t> serialize_volume(const LabeledVolume& v) {
  io::Writer w;
  w.bytes(kVolumeMagic, 8);
  w.u32(kVolumeVersion);
  w.str(v.sample_id);
  w.str(v.source);
  w.u32(static_cast<std::uint32_t>(v.image.dim(0)));
  w.u64(v.truth.extent.d);
  w.u64(v.truth.extent.h);
  w.u64(v.truth.extent.w);
  for (float f : v.image.data()) w.f32(f);
  w.bytes(v.truth.bits.data(), v.truth.bits.size());
  w.bytes(v.label.bits.data(), v.label.bits.size());
  const auto h = io::fnv1a(w.buffer().data(), w.buffer().size());
  w.u64(h);
  return std::move(w.buffer());
}

inline LabeledVolume deserialize_volume(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kVolumeMagic, 8) != 0) {
    throw LoadError(what + ": not a sample volume file");
  }
  const std::size_t body = bytes.size() - 8;
  io::Reader tail(bytes.data() + body, 8, what);
  if (io::fnv1a(bytes.data(), body) != tail.u64("checksum")) throw LoadError(what + ": checksum mismatch");
  io::Reader r(bytes.data(), body, what);
  char magic[8];
  r.bytes(magic, 8, "magic");
  if (r.u32("version") != kVolumeVersion) throw LoadError(what + ": unsupported volume version");
  LabeledVolume v;
  v.sample_id = r.str("sample_id");
  v.source = r.str("source");
  const std::size_t c = r.u32("channels");
  Extent3 e{r.u64("extent"), r.u64("extent"), r.u64("extent")};
  r.need(c * e.voxels() * 4 + 2 * e.voxels(), "volume arrays");
  v.image = Tensor<float>(Shape{c, e.d, e.h, e.w});
  for (auto& f : v.image.data()) f = r.f32("image");
  v.truth = Mask(e);
  v.label = Mask(e);
  r.bytes(v.truth.bits.data(), e.voxels(), "truth");
  r.bytes(v.label.bits.data(), e.voxels(), "label");
  require_binary(v.truth, "truth");
  require_binary(v.label, "label");
  return v;
}

struct CohortData {
  CohortSpec spec;
  std::vector<LabeledVolume> samples;
  DatasetSplit split;

  std::vector<const LabeledVolume*> subset(const std::vector<std::string>& ids) const {
    std::map<std::string, const LabeledVolume*> by_id;
    for (const auto& s : samples) by_id[s.sample_id] = &s;
    std::vector<const LabeledVolume*> out;
    for (const auto& id : ids) out.push_back(by_id.at(id));
    return out;
  }
  std::vector<const LabeledVolume*> train() const { return subset(split.train); }
  std::vector<const LabeledVolume*> val() const { return subset(split.val); }
  std::vector<const LabeledVolume*> test() const { return subset(split.test); }
};

inline nlohmann::json to_json(const DatasetSplit& s) {
  return {{"train", s.train}, {"val", s.val}, {"test", s.test}, {"fractions", s.fractions}, {"seed", s.seed}};
}

inline nlohmann::json manifest_json(const std::vector<CohortData>& cohorts) {
  nlohmann::json m;
  m["format"] = "scin-dataset";
  m["version"] = kManifestVersion;
  m["cohorts"] = nlohmann::json::array();
  m["samples"] = nlohmann::json::array();
  for (const auto& c : cohorts) {
    m["cohorts"].push_back({{"spec", to_json(c.spec)}, {"n_samples", c.samples.size()}, {"split", to_json(c.split)}});
    for (const auto& s : c.samples) {
      m["samples"].push_back({{"id", s.sample_id}, {"source", s.source}, {"file", "samples/" + s.sample_id + ".vol"}});
    }
  }
  return m;
}

/// Writes one file per sample plus manifest.json. Output is a pure function
/// of the cohorts, so rewriting the same data is byte-identical.
inline void write_dataset(const std::filesystem::path& dir, const std::vector<CohortData>& cohorts) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "samples", ec);
  if (ec) throw IoError("cannot create dataset directory '" + dir.string() + "': " + ec.message());
  for (const auto& c : cohorts)
    for (const auto& s : c.samples) io::write_file_atomic(dir / "samples" / (s.sample_id + ".vol"), serialize_volume(s));
  io::write_text_atomic(dir / "manifest.json", manifest_json(cohorts).dump(2) + "\n");
}

inline std::vector<CohortData> read_dataset(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  nlohmann::json m;
  try {
    const auto bytes = io::read_file(mpath);
    m = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const IoError& e) {
    throw LoadError(std::string("dataset manifest: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("dataset manifest is not valid JSON: " + std::string(e.what()));
  }
  if (m.value("format", "") != "scin-dataset" || m.value("version", 0) != kManifestVersion) {
    throw LoadError("dataset manifest: unsupported format/version");
  }
  std::vector<CohortData> out;
  try {
    for (std::size_t i = 0; i < m.at("cohorts").size(); ++i) {
      const auto& cj = m.at("cohorts")[i];
      CohortData c;
      c.spec = cohort_spec_from_json(cj.at("spec"), "manifest.cohorts[" + std::to_string(i) + "].spec");
      const auto& sj = cj.at("split");
      sj.at("train").get_to(c.split.train);
      sj.at("val").get_to(c.split.val);
      sj.at("test").get_to(c.split.test);
      sj.at("fractions").get_to(c.split.fractions);
      sj.at("seed").get_to(c.split.seed);
      out.push_back(std::move(c));
    }
    for (const auto& sj : m.at("samples")) {
      const std::string source = sj.at("source").get<std::string>();
      auto it = std::find_if(out.begin(), out.end(), [&](auto& c) { return c.spec.name == source; });
      if (it == out.end()) throw LoadError("dataset manifest: sample of unknown cohort '" + source + "'");
      const auto path = dir / sj.at("file").get<std::string>();
      it->samples.push_back(deserialize_volume(io::read_file(path), path.string()));
      if (it->samples.back().sample_id != sj.at("id").get<std::string>()) {
        throw LoadError(path.string() + ": sample id does not match manifest");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("dataset manifest: malformed field: " + std::string(e.what()));
  } catch (const IoError& e) {
    throw LoadError(e.what());
  }
  return out;
}

/// Generates a cohort and its train/val/test split.
inline CohortData make_cohort(const CohortSpec& spec, std::size_t n, std::vector<double> fractions = {0.6, 0.2, 0.2},
                              std::uint64_t split_seed = 0) {
  CohortData c;
  c.spec = spec;
  c.samples = generate_cohort(spec, n);
  std::vector<std::string> ids;
  for (const auto& s : c.samples) ids.push_back(s.sample_id);
  c.split = split_dataset(ids, std::move(fractions), split_seed);
  return c;
}

}  // namespace scin
