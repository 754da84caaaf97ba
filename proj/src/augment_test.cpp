#include <doctest.h>

#include "raseg/augment.hpp"
#include "raseg/phantom.hpp"

using namespace raseg;
using namespace raseg::augment;

namespace {

volio::PreprocessedSample sample() {
  const auto ph = phantom::generate_phantom(phantom::PhantomSpec{}, 5);
  volio::PreprocessConfig cfg;
  cfg.target_shape = {16, 32, 32};
  return volio::preprocess(ph.image, ph.tumor_mask, ph.lung_mask, cfg);
}

}  // namespace

TEST_CASE("disabled config yields identity parameters and unchanged samples") {
  const auto cfg = AugmentConfig::disabled();
  const auto s = sample();
  for (std::uint64_t i = 0; i < 5; ++i) {
    const auto p = sample_params(cfg, i, 3);
    CHECK(p.is_identity());
    const auto out = apply(s, p);
    CHECK(out.image == s.image);
    CHECK(*out.tumor_mask == *s.tumor_mask);
  }
}

TEST_CASE("parameter draws depend only on seed, sample and epoch") {
  AugmentConfig cfg;
  cfg.seed = 17;
  CHECK(sample_params(cfg, 2, 5) == sample_params(cfg, 2, 5));
  CHECK(!(sample_params(cfg, 2, 5) == sample_params(cfg, 2, 6)));
  for (std::uint64_t e = 0; e < 50; ++e) {
    const auto p = sample_params(cfg, 1, e);
    for (double r : p.rot_deg) CHECK(std::abs(r) <= cfg.rot_deg);
    for (double s : p.shear_deg) CHECK(std::abs(s) <= cfg.shear_deg);
    CHECK(p.depth_scale >= 0.9);
    CHECK(p.depth_scale <= 1.1);
  }
}

TEST_CASE("flips are exact permutations") {
  const auto s = sample();
  AugmentParams p;
  p.hflip = true;
  const auto v = warp(s.image, p, volio::Interp::Linear, -200.0f);
  const int W = s.image.shape()[2];
  for (int d = 0; d < s.image.shape()[0]; d += 3)
    for (int h = 0; h < s.image.shape()[1]; h += 5)
      for (int w = 0; w < W; ++w) CHECK(v.at(d, h, w) == s.image.at(d, h, W - 1 - w));
  const auto twice = warp(v, p, volio::Interp::Linear, -200.0f);
  CHECK(twice == s.image);
}

TEST_CASE("augmented masks stay binary and aligned with the image grid") {
  AugmentConfig cfg;
  cfg.seed = 3;
  const auto s = sample();
  for (std::uint64_t e = 0; e < 4; ++e) {
    const auto out = apply(s, sample_params(cfg, 0, e));
    CHECK(out.image.same_geometry(s.image));
    CHECK(out.tumor_mask->is_binary());
    CHECK(out.bbox->is_binary());
    const auto rec = apply(s, sample_params(cfg, 0, e), -200.0, true);
    if (rec.tumor_mask->count_nonzero() > 0) {
      CHECK(volio::bbox_from_mask(*rec.bbox) == volio::bbox_from_mask(*rec.tumor_mask));
    }
  }
}

TEST_CASE("invalid augment config is rejected") {
  AugmentConfig cfg;
  cfg.p_vflip = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  AugmentConfig c2;
  c2.depth_scale_range = {1.2, 0.8};
  CHECK_THROWS_AS(c2.validate(), ValidationError);
}
