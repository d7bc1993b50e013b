#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "scin/dataset_io.hpp"

namespace fs = std::filesystem;

namespace {

scin::CohortSpec spec(const std::string& name, std::uint64_t seed) {
  scin::CohortSpec s;
  s.name = name;
  s.extent = {8, 8, 8};
  s.seed = seed;
  s.label_style = scin::LabelStyle::dilate(1);
  return s;
}

fs::path temp_dir(const std::string& tag) {
  auto d = fs::temp_directory_path() / ("scin_io_" + tag);
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(VolumeIo, RoundTripIsExact) {
  const auto v = scin::generate_cohort(spec("A", 3), 1).front();
  const auto bytes = scin::serialize_volume(v);
  const auto back = scin::deserialize_volume(bytes, "v");
  EXPECT_EQ(back.sample_id, v.sample_id);
  EXPECT_EQ(back.source, v.source);
  EXPECT_EQ(back.image.shape(), v.image.shape());
  EXPECT_TRUE(std::equal(v.image.data().begin(), v.image.data().end(), back.image.data().begin()));
  EXPECT_EQ(back.truth.bits, v.truth.bits);
  EXPECT_EQ(back.label.bits, v.label.bits);
  EXPECT_EQ(scin::serialize_volume(back), bytes);
}

TEST(VolumeIo, CorruptionIsLoadError) {
  auto bytes = scin::serialize_volume(scin::generate_cohort(spec("A", 3), 1).front());
  auto cut = bytes;
  cut.resize(bytes.size() / 2);
  EXPECT_THROW(scin::deserialize_volume(cut, "v"), scin::LoadError);
  bytes[40] ^= 1;
  EXPECT_THROW(scin::deserialize_volume(bytes, "v"), scin::LoadError);
}

TEST(DatasetIo, WriteReadRoundTripAndDeterminism) {
  const std::vector<scin::CohortData> cohorts{scin::make_cohort(spec("A", 1), 5), scin::make_cohort(spec("B", 2), 4)};
  const auto d1 = temp_dir("a"), d2 = temp_dir("b");
  scin::write_dataset(d1, cohorts);
  scin::write_dataset(d2, cohorts);
  EXPECT_EQ(slurp(d1 / "manifest.json"), slurp(d2 / "manifest.json"));
  for (const auto& e : fs::directory_iterator(d1 / "samples"))
    EXPECT_EQ(slurp(e.path()), slurp(d2 / "samples" / e.path().filename()));

  const auto back = scin::read_dataset(d1);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_EQ(scin::to_json(back[c].spec), scin::to_json(cohorts[c].spec));
    EXPECT_EQ(back[c].split.train, cohorts[c].split.train);
    EXPECT_EQ(back[c].split.test, cohorts[c].split.test);
    ASSERT_EQ(back[c].samples.size(), cohorts[c].samples.size());
    for (std::size_t i = 0; i < back[c].samples.size(); ++i)
      EXPECT_EQ(scin::serialize_volume(back[c].samples[i]), scin::serialize_volume(cohorts[c].samples[i]));
  }
  EXPECT_EQ(scin::manifest_json(back), scin::manifest_json(cohorts));
  EXPECT_EQ(back[0].test().size(), cohorts[0].split.test.size());
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(DatasetIo, MissingOrMalformedManifest) {
  const auto d = temp_dir("bad");
  EXPECT_THROW(scin::read_dataset(d), scin::LoadError);
  fs::create_directories(d);
  std::ofstream(d / "manifest.json") << "{ not json";
  EXPECT_THROW(scin::read_dataset(d), scin::LoadError);
  fs::remove_all(d);
}

TEST(CohortSpecJson, RoundTripAndFieldErrors) {
  const auto s = spec("A", 7);
  const auto back = scin::cohort_spec_from_json(scin::to_json(s), "c");
  EXPECT_EQ(scin::to_json(back), scin::to_json(s));
  auto j = scin::to_json(s);
  j["radius_median"] = "big";
  try {
    scin::cohort_spec_from_json(j, "c");
    FAIL() << "expected ConfigError";
  } catch (const scin::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("radius_median"), std::string::npos) << e.what();
  }
  j = scin::to_json(s);
  j["label_style"] = "sideways";
  EXPECT_THROW(scin::cohort_spec_from_json(j, "c"), scin::ConfigError);
}
