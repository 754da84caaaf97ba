#include "raseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

namespace raseg::phantom {

using nlohmann::json;
using volio::Shape3;
using volio::Vec3;
using volio::Volume;

namespace {

constexpr float kAir = -1000.0f;
constexpr float kSoftTissue = 40.0f;
constexpr double kTextureAmplitude = 120.0;

void check_range(const Range& r, const char* field) {
  if (!std::isfinite(r.first) || !std::isfinite(r.second) || r.first > r.second) {
    throw ValidationError(std::string("PhantomSpec.") + field + ": low must be <= high");
  }
}

double sq(double x) { return x * x; }

bool inside(const Ellipsoid& e, const Vec3& p) {
  double acc = 0.0;
  for (int a = 0; a < 3; ++a) acc += sq((p[a] - e.center_mm[a]) / e.radii_mm[a]);
  return acc <= 1.0;
}

struct Anatomy {
  Vec3 extent;
  double body_rh, body_rw;
  Ellipsoid lungs[2];
};

Anatomy make_anatomy(const PhantomSpec& spec) {
  Anatomy a;
  for (int i = 0; i < 3; ++i) a.extent[i] = spec.shape[i] * spec.spacing[i];
  const Vec3& e = a.extent;
  a.body_rh = 0.42 * e[1];
  a.body_rw = 0.46 * e[2];
  for (int side = 0; side < 2; ++side) {
    const double sign = side == 0 ? -1.0 : 1.0;
    a.lungs[side].center_mm = {0.5 * e[0], 0.5 * e[1], 0.5 * e[2] + sign * 0.22 * e[2]};
    a.lungs[side].radii_mm = {0.38 * e[0], 0.30 * e[1], 0.19 * e[2]};
  }
  return a;
}

Vec3 voxel_center(const PhantomSpec& spec, int d, int h, int w) {
  return {(d + 0.5) * spec.spacing[0], (h + 0.5) * spec.spacing[1], (w + 0.5) * spec.spacing[2]};
}

// Every voxel centre inside the nodule must also lie inside the lung, and
// the nodule must cover at least one voxel centre.
bool nodule_fits(const PhantomSpec& spec, const Ellipsoid& nodule, const Ellipsoid& lung) {
  int lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0, static_cast<int>(std::floor((nodule.center_mm[a] - nodule.radii_mm[a]) / spec.spacing[a] - 0.5)));
    hi[a] = std::min(spec.shape[a] - 1,
                     static_cast<int>(std::ceil((nodule.center_mm[a] + nodule.radii_mm[a]) / spec.spacing[a] - 0.5)));
  }
  bool any = false;
  for (int d = lo[0]; d <= hi[0]; ++d) {
    for (int h = lo[1]; h <= hi[1]; ++h) {
      for (int w = lo[2]; w <= hi[2]; ++w) {
        const Vec3 p = voxel_center(spec, d, h, w);
        if (!inside(nodule, p)) continue;
        if (!inside(lung, p)) return false;
        any = true;
      }
    }
  }
  return any;
}

}  // namespace

void PhantomSpec::validate() const {
  for (int n : shape) {
    if (n < 16) throw ValidationError("PhantomSpec.shape: every axis needs >= 16 voxels");
  }
  for (double s : spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("PhantomSpec.spacing: must be > 0");
  }
  check_range(lung_intensity_range, "lung_intensity_range");
  check_range(nodule_radius_range_mm, "nodule_radius_range_mm");
  check_range(nodule_texture_freq_range, "nodule_texture_freq_range");
  if (!(nodule_radius_range_mm.first > 0.0)) {
    throw ValidationError("PhantomSpec.nodule_radius_range_mm: radii must be > 0");
  }
  if (!(nodule_texture_freq_range.first >= 0.0)) {
    throw ValidationError("PhantomSpec.nodule_texture_freq_range: frequencies must be >= 0");
  }
  if (label_rule_threshold < nodule_texture_freq_range.first ||
      label_rule_threshold > nodule_texture_freq_range.second) {
    throw ValidationError("PhantomSpec.label_rule_threshold: must lie inside nodule_texture_freq_range");
  }
  if (!(noise_sigma >= 0.0)) throw ValidationError("PhantomSpec.noise_sigma: must be >= 0");
  if (lung_intensity_range.second >= -400.0) {
    throw ValidationError("PhantomSpec.lung_intensity_range: lung field must stay below -400");
  }
}

int label_for_frequency(const PhantomSpec& spec, double frequency) {
  return frequency > spec.label_rule_threshold ? 1 : 0;
}

PhantomSample generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  const double f = rng.uniform(spec.nodule_texture_freq_range.first, spec.nodule_texture_freq_range.second);
  return generate_phantom(spec, seed, f);
}

PhantomSample generate_phantom(const PhantomSpec& spec, std::uint64_t seed, double texture_frequency) {
  spec.validate();
  if (!(texture_frequency >= 0.0)) throw ValidationError("texture frequency must be >= 0");
  Rng rng(seed);
  rng.uniform();  // frequency slot, see the two-argument overload

  const Anatomy anat = make_anatomy(spec);
  const double lung_level = rng.uniform(spec.lung_intensity_range.first, spec.lung_intensity_range.second);
  const int side = static_cast<int>(rng.below(2));
  const Ellipsoid& lung = anat.lungs[side];

  Ellipsoid nodule;
  for (int a = 0; a < 3; ++a) {
    nodule.radii_mm[a] = rng.uniform(spec.nodule_radius_range_mm.first, spec.nodule_radius_range_mm.second);
  }
  bool placed = false;
  for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
    for (int a = 0; a < 3; ++a) {
      const double lo = lung.center_mm[a] - lung.radii_mm[a] + nodule.radii_mm[a];
      const double hi = lung.center_mm[a] + lung.radii_mm[a] - nodule.radii_mm[a];
      nodule.center_mm[a] = lo <= hi ? rng.uniform(lo, hi) : lung.center_mm[a];
    }
    placed = nodule_fits(spec, nodule, lung);
  }
  if (!placed) {
    throw ValidationError("PhantomSpec.nodule_radius_range_mm: nodule does not fit inside the lung field");
  }
  Vec3 phase;
  for (double& p : phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);

  const Vec3 origin{0.5 * spec.spacing[0], 0.5 * spec.spacing[1], 0.5 * spec.spacing[2]};
  PhantomSample s;
  s.seed = seed;
  s.texture_frequency = texture_frequency;
  s.label = label_for_frequency(spec, texture_frequency);
  s.nodule = nodule;
  s.image = Volume(spec.shape, spec.spacing, origin);
  s.tumor_mask = Volume(spec.shape, spec.spacing, origin);
  s.lung_mask = Volume(spec.shape, spec.spacing, origin);

  const double omega = 2.0 * std::numbers::pi * texture_frequency;
  const Vec3& e = anat.extent;
  for (int d = 0; d < spec.shape[0]; ++d) {
    for (int h = 0; h < spec.shape[1]; ++h) {
      for (int w = 0; w < spec.shape[2]; ++w) {
        const Vec3 p = voxel_center(spec, d, h, w);
        double v = kAir;
        const bool in_body = sq((p[1] - 0.5 * e[1]) / anat.body_rh) + sq((p[2] - 0.5 * e[2]) / anat.body_rw) <= 1.0;
        if (in_body) v = kSoftTissue;
        const bool in_lung = inside(anat.lungs[0], p) || inside(anat.lungs[1], p);
        if (in_lung) {
          v = lung_level;
          s.lung_mask.at(d, h, w) = 1.0f;
        }
        if (inside(nodule, p)) {
          double tex = 0.0;
          for (int a = 0; a < 3; ++a) tex += std::cos(omega * (p[a] - nodule.center_mm[a]) + phase[a]);
          v = kSoftTissue + kTextureAmplitude * tex / 3.0;
          s.tumor_mask.at(d, h, w) = 1.0f;
        }
        s.image.at(d, h, w) = static_cast<float>(v + spec.noise_sigma * rng.normal());
      }
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Cohorts

CohortManifest generate_cohort(const PhantomSpec& spec, int n, std::uint64_t seed,
                               const std::filesystem::path& out_dir, int threads) {
  spec.validate();
  if (n < 2) throw ValidationError("generate_cohort: n must be >= 2");
  const auto [flo, fhi] = spec.nodule_texture_freq_range;
  const double thr = spec.label_rule_threshold;
  if (!(flo < thr && thr < fhi)) {
    throw ValidationError(
        "PhantomSpec.label_rule_threshold: must lie strictly inside the frequency range for a balanced cohort");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw IoError("cannot create cohort directory " + out_dir.string());
  }

  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = i % 2;
  Rng label_rng(seed);
  label_rng.shuffle(labels);

  const int width = std::max(3, static_cast<int>(std::to_string(n - 1).size()));
  CohortManifest manifest;
  manifest.spec = spec;
  manifest.seed = seed;
  manifest.entries.resize(n);
  for (int i = 0; i < n; ++i) {
    ManifestEntry& e = manifest.entries[i];
    std::string id(16 + static_cast<std::size_t>(width), '\0');
    id.resize(static_cast<std::size_t>(std::snprintf(id.data(), id.size(), "sample_%0*d", width, i)));
    e.id = id;
    e.image = e.id + ".json";
    e.tumor_mask = e.id + "_tumor.json";
    e.lung_mask = e.id + "_lung.json";
    e.seed = seed + static_cast<std::uint64_t>(i);
    e.label = labels[i];
    // Strictly inside the label's half of the frequency range.
    Rng freq_rng(derive_seed(seed, static_cast<std::uint64_t>(i), 0xf4e9));
    double f;
    do {
      f = e.label == 0 ? freq_rng.uniform(flo, thr) : thr + (fhi - thr) * (1.0 - freq_rng.uniform());
    } while (label_for_frequency(spec, f) != e.label);
    e.texture_frequency = f;
  }

  auto work = [&](int i) {
    const ManifestEntry& e = manifest.entries[i];
    PhantomSample s = generate_phantom(spec, e.seed, e.texture_frequency);
    volio::write_volume(s.image, out_dir / e.image);
    volio::write_volume(s.tumor_mask, out_dir / e.tumor_mask);
    volio::write_volume(s.lung_mask, out_dir / e.lung_mask);
  };
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex mu;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (int i = t; i < n; i += threads) {
          try {
            work(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }
  write_text_file(out_dir / "manifest.json", to_json(manifest).dump(2) + "\n");
  return manifest;
}

// ---------------------------------------------------------------------------
// JSON

json to_json(const PhantomSpec& spec) {
  return {
      {"shape", spec.shape},
      {"spacing_mm", spec.spacing},
      {"lung_intensity_range", {spec.lung_intensity_range.first, spec.lung_intensity_range.second}},
      {"nodule_radius_range_mm", {spec.nodule_radius_range_mm.first, spec.nodule_radius_range_mm.second}},
      {"nodule_texture_freq_range", {spec.nodule_texture_freq_range.first, spec.nodule_texture_freq_range.second}},
      {"label_rule_threshold", spec.label_rule_threshold},
      {"noise_sigma", spec.noise_sigma},
  };
}

namespace {
Range range_from(const json& j, const char* key, Range fallback) {
  if (!j.contains(key)) return fallback;
  auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 2) throw ValidationError(std::string("PhantomSpec.") + key + ": expected [low, high]");
  return {v[0], v[1]};
}
}  // namespace

PhantomSpec spec_from_json(const json& j, const PhantomSpec& defaults) {
  PhantomSpec s = defaults;
  try {
    s.shape = j.value("shape", s.shape);
    s.spacing = j.value("spacing_mm", s.spacing);
    s.lung_intensity_range = range_from(j, "lung_intensity_range", s.lung_intensity_range);
    s.nodule_radius_range_mm = range_from(j, "nodule_radius_range_mm", s.nodule_radius_range_mm);
    s.nodule_texture_freq_range = range_from(j, "nodule_texture_freq_range", s.nodule_texture_freq_range);
    s.label_rule_threshold = j.value("label_rule_threshold", s.label_rule_threshold);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("PhantomSpec: ") + e.what());
  }
  return s;
}

json to_json(const CohortManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"id", e.id},
                       {"image", e.image},
                       {"tumor_mask", e.tumor_mask},
                       {"lung_mask", e.lung_mask},
                       {"label", e.label},
                       {"seed", e.seed},
                       {"texture_frequency", e.texture_frequency}});
  }
  return {{"kind", "phantom_cohort"}, {"spec", to_json(m.spec)}, {"seed", m.seed}, {"entries", entries}};
}

CohortManifest manifest_from_json(const json& j) {
  CohortManifest m;
  try {
    m.spec = spec_from_json(j.at("spec"));
    m.seed = j.value("seed", std::uint64_t{0});
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.id = je.at("id").get<std::string>();
      e.image = je.at("image").get<std::string>();
      e.tumor_mask = je.value("tumor_mask", std::string());
      e.lung_mask = je.value("lung_mask", std::string());
      e.label = je.at("label").get<int>();
      e.seed = je.at("seed").get<std::uint64_t>();
      e.texture_frequency = je.value("texture_frequency", 0.0);
      if (e.label != 0 && e.label != 1) throw ValidationError("manifest label must be 0 or 1");
      m.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("cohort manifest: ") + e.what());
  }
  std::vector<std::uint64_t> seeds;
  for (const auto& e : m.entries) seeds.push_back(e.seed);
  std::sort(seeds.begin(), seeds.end());
  if (std::adjacent_find(seeds.begin(), seeds.end()) != seeds.end()) {
    throw ValidationError("cohort manifest: entry seeds must be unique");
  }
  return m;
}

CohortManifest read_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("manifest not found: " + path.string());
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw FormatError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return manifest_from_json(j);
}

}  // namespace raseg::phantom
