#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "raseg/common.hpp"

namespace raseg::volio {

/// Voxel counts in (depth, height, width) order.
using Shape3 = std::array<int, 3>;
/// Millimetres per axis, (depth, height, width) order.
using Vec3 = std::array<double, 3>;

/// Dense 3D scalar grid with physical geometry. `origin` is the position of
/// the centre of voxel (0,0,0) in mm.
class Volume {
 public:
  Volume() = default;
  Volume(Shape3 shape, Vec3 spacing, Vec3 origin = {0.0, 0.0, 0.0}, float fill = 0.0f);

  const Shape3& shape() const { return shape_; }
  const Vec3& spacing() const { return spacing_; }
  const Vec3& origin() const { return origin_; }
  void set_spacing(const Vec3& spacing);
  void set_origin(const Vec3& origin) { origin_ = origin; }

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t index(int d, int h, int w) const {
    return (static_cast<std::size_t>(d) * shape_[1] + h) * shape_[2] + w;
  }
  float& at(int d, int h, int w) { return data_[index(d, h, w)]; }
  float at(int d, int h, int w) const { return data_[index(d, h, w)]; }
  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  /// Physical extent per axis: shape * spacing.
  Vec3 extent() const;
  bool same_geometry(const Volume& other) const;
  bool is_binary() const;
  std::size_t count_nonzero() const;

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  Shape3 shape_{0, 0, 0};
  Vec3 spacing_{1.0, 1.0, 1.0};
  Vec3 origin_{0.0, 0.0, 0.0};
  std::vector<float> data_;
};

/// Inclusive voxel index box.
struct BBox3 {
  Shape3 min_index{0, 0, 0};
  Shape3 max_index{0, 0, 0};

  Shape3 extent() const {
    return {max_index[0] - min_index[0] + 1, max_index[1] - min_index[1] + 1,
            max_index[2] - min_index[2] + 1};
  }
  std::size_t voxel_count() const {
    auto e = extent();
    return static_cast<std::size_t>(e[0]) * e[1] * e[2];
  }
  friend bool operator==(const BBox3&, const BBox3&) = default;
};

enum class Interp { BSpline, Linear, Nearest };

Interp parse_interp(const std::string& name);
std::string to_string(Interp interp);

struct PreprocessConfig {
  double clip_low = -200.0;
  double clip_high = 250.0;
  /// (depth, height, width); slices are 1.5 mm apart, in-plane 1 mm.
  Vec3 target_spacing{1.5, 1.0, 1.0};
  Shape3 target_shape{256, 256, 256};
  Interp image_interp = Interp::BSpline;
  Interp mask_interp = Interp::Nearest;
  double voi_margin_mm = 0.0;

  void validate() const;
};

nlohmann::json to_json(const PreprocessConfig& cfg);
PreprocessConfig preprocess_config_from_json(const nlohmann::json& j, const PreprocessConfig& defaults = {});

struct PreprocessedSample {
  Volume image;
  std::optional<Volume> tumor_mask;
  /// Rasterized tumor bounding box, present iff tumor_mask is.
  std::optional<Volume> bbox;
  /// Lung VOI in the resampled grid, for provenance.
  BBox3 voi;
};

// RVOL I/O: `<name>.json` header plus `<name>.raw` little-endian f32 payload.
// `path` may name either file or the common stem.
Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& vol, const std::filesystem::path& path);
std::filesystem::path rvol_stem(const std::filesystem::path& path);

Volume clip_intensity(const Volume& vol, double lo, double hi);
Volume resample(const Volume& vol, const Vec3& target_spacing, Interp interp);
Volume resize(const Volume& vol, const Shape3& target_shape, Interp interp);

/// Voxels below -400 HU, minus every component touching the volume border,
/// keeping the two largest remaining 6-connected components.
Volume threshold_lung_mask(const Volume& vol);

struct VoiCrop {
  Volume volume;
  BBox3 box;
};
VoiCrop crop_to_voi(const Volume& vol, const Volume& lung_mask, double margin_mm);
Volume crop(const Volume& vol, const BBox3& box);

BBox3 bbox_from_mask(const Volume& mask);
/// Binary volume with `shape`, 1 inside `box` (inclusive), 0 elsewhere.
Volume rasterize_bbox(const BBox3& box, const Shape3& shape, const Vec3& spacing = {1.0, 1.0, 1.0},
                      const Vec3& origin = {0.0, 0.0, 0.0});

/// clip -> resample -> lung VOI crop -> resize -> bbox. When no lung mask is
/// supplied it is computed from the unclipped input image.
PreprocessedSample preprocess(const Volume& image, const std::optional<Volume>& tumor_mask,
                              const std::optional<Volume>& lung_mask, const PreprocessConfig& cfg);

}  // namespace raseg::volio
