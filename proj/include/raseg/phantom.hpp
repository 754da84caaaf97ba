#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "raseg/volio.hpp"

namespace raseg::phantom {

using Range = std::pair<double, double>;

struct PhantomSpec {
  volio::Shape3 shape{32, 80, 80};
  volio::Vec3 spacing{2.0, 0.8, 0.8};
  Range lung_intensity_range{-900.0, -700.0};
  Range nodule_radius_range_mm{4.0, 7.0};
  /// cycles per mm
  Range nodule_texture_freq_range{0.06, 0.20};
  double label_rule_threshold = 0.13;
  double noise_sigma = 10.0;

  /// Throws ValidationError naming the offending field.
  void validate() const;
};

struct Ellipsoid {
  volio::Vec3 center_mm{};
  volio::Vec3 radii_mm{};
};

struct PhantomSample {
  volio::Volume image;
  volio::Volume tumor_mask;
  volio::Volume lung_mask;
  int label = 0;
  std::uint64_t seed = 0;
  /// Generating parameters, kept for oracles and label audits.
  double texture_frequency = 0.0;
  Ellipsoid nodule;
};

struct ManifestEntry {
  std::string id;
  std::string image;
  std::string tumor_mask;
  std::string lung_mask;
  int label = 0;
  std::uint64_t seed = 0;
  double texture_frequency = 0.0;
};

struct CohortManifest {
  PhantomSpec spec;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;
};

/// Nodule texture frequency drawn uniformly over the spec range.
PhantomSample generate_phantom(const PhantomSpec& spec, std::uint64_t seed);
/// Same geometry stream as generate_phantom, with the texture frequency forced.
PhantomSample generate_phantom(const PhantomSpec& spec, std::uint64_t seed, double texture_frequency);

/// Writes `n` samples plus manifest.json into `out_dir`. Labels are
/// balanced (within one of n/2); sample i uses seed `seed + i`.
CohortManifest generate_cohort(const PhantomSpec& spec, int n, std::uint64_t seed,
                               const std::filesystem::path& out_dir, int threads = 1);

int label_for_frequency(const PhantomSpec& spec, double frequency);

nlohmann::json to_json(const PhantomSpec& spec);
PhantomSpec spec_from_json(const nlohmann::json& j, const PhantomSpec& defaults = {});
nlohmann::json to_json(const CohortManifest& manifest);
CohortManifest manifest_from_json(const nlohmann::json& j);
CohortManifest read_manifest(const std::filesystem::path& path);

}  // namespace raseg::phantom
