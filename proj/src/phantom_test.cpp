#include <doctest.h>

#include <filesystem>

#include "raseg/phantom.hpp"

using namespace raseg;
using namespace raseg::phantom;

TEST_CASE("phantoms are deterministic in the seed") {
  const PhantomSpec spec;
  const auto a = generate_phantom(spec, 12), b = generate_phantom(spec, 12), c = generate_phantom(spec, 13);
  CHECK(a.image == b.image);
  CHECK(a.tumor_mask == b.tumor_mask);
  CHECK(a.texture_frequency == b.texture_frequency);
  CHECK(!(a.image == c.image));
}

TEST_CASE("phantom geometry and masks are consistent") {
  const PhantomSpec spec;
  const auto s = generate_phantom(spec, 21);
  CHECK(s.image.shape() == spec.shape);
  CHECK(s.image.spacing() == spec.spacing);
  CHECK(s.tumor_mask.is_binary());
  CHECK(s.lung_mask.is_binary());
  CHECK(s.tumor_mask.count_nonzero() > 0);
  for (std::size_t i = 0; i < s.tumor_mask.size(); ++i) {
    if (s.tumor_mask.data()[i] != 0.0f) CHECK(s.lung_mask.data()[i] != 0.0f);
  }
  CHECK(s.label == label_for_frequency(spec, s.texture_frequency));
  CHECK(s.texture_frequency >= spec.nodule_texture_freq_range.first);
  CHECK(s.texture_frequency <= spec.nodule_texture_freq_range.second);
}

TEST_CASE("label rule thresholds the texture frequency") {
  const PhantomSpec spec;
  CHECK(label_for_frequency(spec, 0.07) == 0);
  CHECK(label_for_frequency(spec, 0.13) == 0);
  CHECK(label_for_frequency(spec, 0.1301) == 1);
  const auto forced = generate_phantom(spec, 4, 0.19);
  CHECK(forced.label == 1);
  CHECK(forced.texture_frequency == 0.19);
}

TEST_CASE("cohorts are balanced and written with a manifest") {
  const auto dir = std::filesystem::temp_directory_path() / "raseg_phantom_test";
  std::filesystem::remove_all(dir);
  const PhantomSpec spec;
  const auto m = generate_cohort(spec, 7, 100, dir, 2);
  REQUIRE(m.entries.size() == 7);
  int positives = 0;
  for (const auto& e : m.entries) {
    positives += e.label;
    CHECK(std::filesystem::exists(dir / (e.image)));
    CHECK(label_for_frequency(spec, e.texture_frequency) == e.label);
  }
  CHECK((positives == 3 || positives == 4));
  const auto back = read_manifest(dir / "manifest.json");
  CHECK(back.entries.size() == 7);
  CHECK(back.entries[2].id == m.entries[2].id);
  CHECK(to_json(back) == to_json(m));
  std::filesystem::remove_all(dir);
}

TEST_CASE("invalid specs are rejected with the field name") {
  PhantomSpec spec;
  spec.nodule_radius_range_mm = {7.0, 4.0};
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("nodule_radius_range_mm"), ValidationError);
  PhantomSpec spec2;
  spec2.noise_sigma = -1.0;
  CHECK_THROWS_AS(spec2.validate(), ValidationError);
}
