#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include <json.hpp>

#include "raseg/volio.hpp"

namespace raseg::augment {

struct AugmentConfig {
  double p_vflip = 0.5;
  double p_hflip = 0.5;
  double rot_deg = 10.0;
  double shear_deg = 10.0;
  std::pair<double, double> depth_scale_range{0.9, 1.1};
  std::uint64_t seed = 0;
  /// Recompute the bbox channel from the transformed tumor mask instead of
  /// warping the rasterized box.
  bool recompute_bbox = false;

  void validate() const;
  /// No flips, zero angles, unit scale.
  static AugmentConfig disabled();
};

struct AugmentParams {
  bool vflip = false;  // height axis
  bool hflip = false;  // width axis
  std::array<double, 3> rot_deg{0.0, 0.0, 0.0};    // about depth, height, width axes
  std::array<double, 3> shear_deg{0.0, 0.0, 0.0};  // d<-h, h<-w, w<-d couplings
  double depth_scale = 1.0;

  bool is_identity() const;
  friend bool operator==(const AugmentParams&, const AugmentParams&) = default;
};

AugmentParams sample_params(const AugmentConfig& cfg, std::uint64_t sample_index, std::uint64_t epoch);

/// Applies flip . rotate . shear . depth-scale about the volume centre as one
/// affine map in physical coordinates. Image uses linear interpolation and
/// `fill_value` outside the field; masks use nearest and zero.
volio::PreprocessedSample apply(const volio::PreprocessedSample& sample, const AugmentParams& params,
                                double fill_value = -200.0, bool recompute_bbox = false);

/// Single-volume warp, exposed for the mask-consistency checks.
volio::Volume warp(const volio::Volume& vol, const AugmentParams& params, volio::Interp interp, float fill);

nlohmann::json to_json(const AugmentConfig& cfg);
AugmentConfig config_from_json(const nlohmann::json& j, const AugmentConfig& defaults = {});
nlohmann::json to_json(const AugmentParams& p);

}  // namespace raseg::augment
