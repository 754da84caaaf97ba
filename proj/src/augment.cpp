#include "raseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Dense>

namespace raseg::augment {

using nlohmann::json;
using volio::Volume;

void AugmentConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(std::string("augment.") + name + " must be in [0,1]");
  };
  prob(p_vflip, "p_vflip");
  prob(p_hflip, "p_hflip");
  if (!(rot_deg >= 0.0)) throw ValidationError("augment.rot_deg must be >= 0");
  if (!(shear_deg >= 0.0) || shear_deg >= 90.0) throw ValidationError("augment.shear_deg must be in [0,90)");
  if (!(depth_scale_range.first > 0.0) || depth_scale_range.first > depth_scale_range.second) {
    throw ValidationError("augment.depth_scale_range must satisfy 0 < low <= high");
  }
}

AugmentConfig AugmentConfig::disabled() {
  AugmentConfig c;
  c.p_vflip = 0.0;
  c.p_hflip = 0.0;
  c.rot_deg = 0.0;
  c.shear_deg = 0.0;
  c.depth_scale_range = {1.0, 1.0};
  return c;
}

bool AugmentParams::is_identity() const {
  return !vflip && !hflip && rot_deg == std::array<double, 3>{0, 0, 0} &&
         shear_deg == std::array<double, 3>{0, 0, 0} && depth_scale == 1.0;
}

AugmentParams sample_params(const AugmentConfig& cfg, std::uint64_t sample_index, std::uint64_t epoch) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, sample_index, epoch));
  AugmentParams p;
  p.vflip = rng.bernoulli(cfg.p_vflip);
  p.hflip = rng.bernoulli(cfg.p_hflip);
  for (double& a : p.rot_deg) a = rng.uniform(-cfg.rot_deg, cfg.rot_deg);
  for (double& a : p.shear_deg) a = rng.uniform(-cfg.shear_deg, cfg.shear_deg);
  p.depth_scale = rng.uniform(cfg.depth_scale_range.first, cfg.depth_scale_range.second);
  return p;
}

namespace {

double rad(double deg) { return deg * std::numbers::pi / 180.0; }

Eigen::Matrix3d rotation(int axis, double deg) {
  // Rotates the plane spanned by the two other axes.
  const int a = (axis + 1) % 3, b = (axis + 2) % 3;
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  const double c = std::cos(rad(deg)), s = std::sin(rad(deg));
  r(a, a) = c;
  r(a, b) = -s;
  r(b, a) = s;
  r(b, b) = c;
  return r;
}

Eigen::Matrix3d forward_map(const AugmentParams& p) {
  Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
  if (p.vflip) flip(1, 1) = -1.0;
  if (p.hflip) flip(2, 2) = -1.0;
  const Eigen::Matrix3d rot = rotation(0, p.rot_deg[0]) * rotation(1, p.rot_deg[1]) * rotation(2, p.rot_deg[2]);
  Eigen::Matrix3d shear = Eigen::Matrix3d::Identity();
  shear(0, 1) = std::tan(rad(p.shear_deg[0]));
  shear(1, 2) = std::tan(rad(p.shear_deg[1]));
  shear(2, 0) = std::tan(rad(p.shear_deg[2]));
  Eigen::Matrix3d scale = Eigen::Matrix3d::Identity();
  scale(0, 0) = p.depth_scale;
  return flip * rot * shear * scale;
}

double snap(double x) {
  const double r = std::round(x);
  return std::abs(x - r) < 1e-6 ? r : x;
}

}  // namespace

Volume warp(const Volume& vol, const AugmentParams& params, volio::Interp interp, float fill) {
  if (params.is_identity()) return vol;
  const Eigen::Matrix3d inv = forward_map(params).inverse();
  const auto s = vol.shape();
  const auto& sp = vol.spacing();
  Eigen::Vector3d centre((s[0] - 1) / 2.0, (s[1] - 1) / 2.0, (s[2] - 1) / 2.0);
  Volume out(s, vol.spacing(), vol.origin(), fill);
  const bool nearest = interp == volio::Interp::Nearest;

  for (int d = 0; d < s[0]; ++d) {
    for (int h = 0; h < s[1]; ++h) {
      for (int w = 0; w < s[2]; ++w) {
        const Eigen::Vector3d p((d - centre[0]) * sp[0], (h - centre[1]) * sp[1], (w - centre[2]) * sp[2]);
        const Eigen::Vector3d q = inv * p;
        double x[3];
        bool in_field = true;
        for (int a = 0; a < 3; ++a) {
          x[a] = snap(q[a] / sp[a] + centre[a]);
          if (x[a] < -0.5 || x[a] >= s[a] - 0.5) in_field = false;
        }
        if (!in_field) continue;
        if (nearest) {
          const int i0 = static_cast<int>(std::floor(x[0] + 0.5));
          const int i1 = static_cast<int>(std::floor(x[1] + 0.5));
          const int i2 = static_cast<int>(std::floor(x[2] + 0.5));
          out.at(d, h, w) = vol.at(i0, i1, i2);
          continue;
        }
        int lo[3], hi[3];
        double t[3];
        for (int a = 0; a < 3; ++a) {
          const double c = std::clamp(x[a], 0.0, static_cast<double>(s[a] - 1));
          lo[a] = static_cast<int>(std::floor(c));
          hi[a] = std::min(lo[a] + 1, s[a] - 1);
          t[a] = c - lo[a];
        }
        double v = 0.0;
        for (int corner = 0; corner < 8; ++corner) {
          double wgt = 1.0;
          int idx[3];
          for (int a = 0; a < 3; ++a) {
            const bool up = (corner >> a) & 1;
            wgt *= up ? t[a] : 1.0 - t[a];
            idx[a] = up ? hi[a] : lo[a];
          }
          if (wgt != 0.0) v += wgt * vol.at(idx[0], idx[1], idx[2]);
        }
        out.at(d, h, w) = static_cast<float>(v);
      }
    }
  }
  return out;
}

volio::PreprocessedSample apply(const volio::PreprocessedSample& sample, const AugmentParams& params,
                                double fill_value, bool recompute_bbox) {
  if (sample.tumor_mask && sample.tumor_mask->shape() != sample.image.shape()) {
    throw DimensionError("augment::apply: tumor mask shape differs from image");
  }
  if (sample.bbox && sample.bbox->shape() != sample.image.shape()) {
    throw DimensionError("augment::apply: bbox shape differs from image");
  }
  volio::PreprocessedSample out;
  out.voi = sample.voi;
  out.image = warp(sample.image, params, volio::Interp::Linear, static_cast<float>(fill_value));
  if (sample.tumor_mask) out.tumor_mask = warp(*sample.tumor_mask, params, volio::Interp::Nearest, 0.0f);
  if (recompute_bbox && out.tumor_mask) {
    if (out.tumor_mask->count_nonzero() == 0) {
      out.bbox = Volume(out.image.shape(), out.image.spacing(), out.image.origin());
    } else {
      out.bbox = volio::rasterize_bbox(volio::bbox_from_mask(*out.tumor_mask), out.image.shape(),
                                       out.image.spacing(), out.image.origin());
    }
  } else if (sample.bbox) {
    out.bbox = warp(*sample.bbox, params, volio::Interp::Nearest, 0.0f);
  }
  return out;
}

json to_json(const AugmentConfig& c) {
  return {{"p_vflip", c.p_vflip},
          {"p_hflip", c.p_hflip},
          {"rot_deg", c.rot_deg},
          {"shear_deg", c.shear_deg},
          {"depth_scale_range", {c.depth_scale_range.first, c.depth_scale_range.second}},
          {"seed", c.seed},
          {"recompute_bbox", c.recompute_bbox}};
}

AugmentConfig config_from_json(const json& j, const AugmentConfig& defaults) {
  AugmentConfig c = defaults;
  try {
    c.p_vflip = j.value("p_vflip", c.p_vflip);
    c.p_hflip = j.value("p_hflip", c.p_hflip);
    c.rot_deg = j.value("rot_deg", c.rot_deg);
    c.shear_deg = j.value("shear_deg", c.shear_deg);
    if (j.contains("depth_scale_range")) {
      auto v = j.at("depth_scale_range").get<std::vector<double>>();
      if (v.size() != 2) throw ValidationError("augment.depth_scale_range: expected [low, high]");
      c.depth_scale_range = {v[0], v[1]};
    }
    c.seed = j.value("seed", c.seed);
    c.recompute_bbox = j.value("recompute_bbox", c.recompute_bbox);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("augment config: ") + e.what());
  }
  return c;
}

json to_json(const AugmentParams& p) {
  return {{"vflip", p.vflip},
          {"hflip", p.hflip},
          {"rot_deg", p.rot_deg},
          {"shear_deg", p.shear_deg},
          {"depth_scale", p.depth_scale}};
}

}  // namespace raseg::augment
