#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "raseg/ndiff/adam.hpp"
#include "raseg/ndiff/archive.hpp"
#include "raseg/ndiff/gradcheck.hpp"
#include "raseg/ndiff/ops.hpp"

using namespace raseg;
using namespace raseg::nd;

namespace {

Tensor5<double> randn(Shape5 s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor5<double> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

std::vector<double> flat(const Tensor5<double>& t) { return {t.values().begin(), t.values().end()}; }
oracle::Dims5 dims(const Shape5& s) { return {s.n, s.c, s.d, s.h, s.w}; }

}  // namespace

TEST_CASE("conv3d forward matches the direct loop") {
  for (int stride : {1, 2}) {
    const auto x = randn({1, 2, 4, 5, 6}, 1), w = randn({3, 2, 3, 3, 3}, 2), b = randn({3, 1, 1, 1, 1}, 3);
    Graph<double> g;
    const auto& y = g.value(conv3d(g, g.input(x), g.input(w), g.input(b), ConvAttrs{{stride, stride, stride}, {1, 1, 1}}));
    oracle::Dims5 ys{};
    const auto ref = oracle::conv3d(flat(x), dims(x.shape()), flat(w), dims(w.shape()), flat(b), stride, 1, ys);
    REQUIRE(y.shape() == Shape5{ys.n, ys.c, ys.d, ys.h, ys.w});
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("tconv3d forward matches the scatter loop") {
  const auto x = randn({2, 3, 2, 3, 2}, 4), w = randn({3, 2, 3, 3, 3}, 5);
  Tensor5<double> b(Shape5{2, 1, 1, 1, 1});
  Graph<double> g;
  const auto& y = g.value(tconv3d(g, g.input(x), g.input(w), g.input(b), TConvAttrs{{2, 2, 2}, {1, 1, 1}, {1, 1, 1}}));
  oracle::Dims5 ys{};
  const auto ref = oracle::tconv3d(flat(x), dims(x.shape()), flat(w), dims(w.shape()), 2, 1, 1, ys);
  REQUIRE(y.shape() == Shape5{ys.n, ys.c, ys.d, ys.h, ys.w});
  CHECK(y.shape() == Shape5{2, 2, 4, 6, 4});
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("conv3d gradients on a 1x2x4x4x4 input") {
  std::vector<Tensor5<double>> in{randn({1, 2, 4, 4, 4}, 6), randn({2, 2, 3, 3, 3}, 7), randn({2, 1, 1, 1, 1}, 8)};
  const auto rep = grad_check(
      [](Graph<double>& g, std::span<const Var> v) { return conv3d(g, v[0], v[1], v[2], ConvAttrs{{1, 1, 1}, {1, 1, 1}}); },
      in, nullptr);
  CHECK(rep.max_rel_error < 1e-4);
  CHECK(rep.elements_checked == 128 + 108 + 2);
}

TEST_CASE("instance norm output has zero mean and unit variance per map") {
  const auto x = randn({2, 3, 3, 4, 5}, 9, 4.0);
  Graph<double> g;
  const auto& y =
      g.value(instance_norm(g, g.input(x), g.input(Tensor5<double>({3, 1, 1, 1, 1}, 1.0)), g.input(Tensor5<double>({3, 1, 1, 1, 1}))));
  const std::size_t m = x.shape().spatial();
  for (std::size_t map = 0; map < 6; ++map) {
    double s = 0, sq = 0;
    for (std::size_t i = 0; i < m; ++i) {
      s += y[map * m + i];
      sq += y[map * m + i] * y[map * m + i];
    }
    CHECK(s / m == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
    CHECK(sq / m == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("spatial dropout drops whole maps and is identity in eval") {
  const auto x = randn({4, 8, 2, 2, 2}, 10);
  Graph<double> ev(false);
  CHECK(ev.value(spatial_dropout(ev, ev.input(x), 0.5)) == x);
  Graph<double> tr(true, 3);
  const auto& y = tr.value(spatial_dropout(tr, tr.input(x), 0.5));
  int dropped = 0;
  for (std::size_t map = 0; map < 32; ++map) {
    const bool zero = y[map * 8] == 0.0;
    dropped += zero;
    for (std::size_t i = 0; i < 8; ++i) CHECK(y[map * 8 + i] == doctest::Approx(zero ? 0.0 : 2.0 * x[map * 8 + i]));
  }
  CHECK(dropped > 4);
  CHECK(dropped < 28);
}

TEST_CASE("softmax over channels sums to one") {
  const auto x = randn({2, 3, 2, 2, 2}, 11, 5.0);
  Graph<double> g;
  const auto& y = g.value(softmax_channel(g, g.input(x)));
  for (int n = 0; n < 2; ++n)
    for (int v = 0; v < 8; ++v) {
      double s = 0;
      for (int c = 0; c < 3; ++c) s += y[(n * 3 + c) * 8 + v];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("convlstm gradients through a 3-step unroll") {
  std::vector<Tensor5<double>> in{randn({1, 2, 3, 3, 3}, 12), randn({8, 2, 1, 3, 3}, 13, 0.4),
                                  randn({8, 2, 1, 3, 3}, 14, 0.4), randn({8, 1, 1, 1, 1}, 15)};
  const auto rep = grad_check(
      [](Graph<double>& g, std::span<const Var> v) {
        Var h = g.input(Tensor5<double>({1, 2, 1, 3, 3})), c = g.input(Tensor5<double>({1, 2, 1, 3, 3}));
        std::vector<Var> outs;
        for (int t = 0; t < 3; ++t) {
          std::tie(h, c) = convlstm_cell(g, slice_depth(g, v[0], t), h, c, v[1], v[2], v[3]);
          outs.push_back(h);
        }
        return concat_depth(g, std::span<const Var>(outs));
      },
      in, nullptr);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("mean_axes and flatten shapes") {
  const auto x = randn({2, 3, 4, 5, 6}, 16);
  Graph<double> g;
  const Var m = mean_axes(g, g.input(x), {false, true, true});
  CHECK(g.shape(m) == Shape5{2, 3, 4, 1, 1});
  double ref = 0;
  for (int h = 0; h < 5; ++h)
    for (int w = 0; w < 6; ++w) ref += x(1, 2, 3, h, w);
  CHECK(g.value(m)(1, 2, 3, 0, 0) == doctest::Approx(ref / 30.0));
  const Var f = flatten(g, m);
  CHECK(g.shape(f) == Shape5{2, 12, 1, 1, 1});
  CHECK(g.value(f)(1, 2 * 4 + 3, 0, 0, 0) == g.value(m)(1, 2, 3, 0, 0));
}

TEST_CASE("shape mismatches raise DimensionError") {
  Graph<double> g;
  const Var a = g.input(Tensor5<double>({1, 2, 2, 2, 2})), b = g.input(Tensor5<double>({1, 3, 2, 2, 2}));
  CHECK_THROWS_AS(add(g, a, b), DimensionError);
  const Var w = g.input(Tensor5<double>({4, 3, 3, 3, 3}));
  CHECK_THROWS_AS(conv3d(g, a, w, g.input(Tensor5<double>({4, 1, 1, 1, 1})), ConvAttrs{}), DimensionError);
  CHECK_THROWS_AS(Tensor5<double>({0, 1, 1, 1, 1}), DimensionError);
}

TEST_CASE("adam step matches the closed form") {
  ParamStore<double> ps;
  ps["w"].value = Tensor5<double>({1, 1, 1, 1, 2});
  ps["w"].value[0] = 1.0;
  ps["w"].value[1] = -2.0;
  ps["w"].grad = Tensor5<double>({1, 1, 1, 1, 2});
  AdamState<double> st;
  st.config.lr = 0.1;
  double m[2] = {0, 0}, v[2] = {0, 0}, p[2] = {1.0, -2.0};
  for (int t = 1; t <= 3; ++t) {
    const double g[2] = {0.5 * t, -1.5 + t};
    ps["w"].grad[0] = g[0];
    ps["w"].grad[1] = g[1];
    adam_step(ps, st);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      p[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(ps["w"].value[i] == doctest::Approx(p[i]).epsilon(1e-12));
    }
  }
  CHECK(st.step == 3);
  ps["w"].grad[1] = std::nan("");
  const auto before = ps["w"].value;
  CHECK_THROWS_WITH_AS(adam_step(ps, st), doctest::Contains("w"), NumericalError);
  CHECK(ps["w"].value == before);
}

TEST_CASE("archive round-trips and rejects corruption") {
  Archive ar;
  ar.metadata["note"] = "x";
  Tensor5<float> t({1, 2, 1, 2, 3});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i) * 0.25f - 1.0f;
  ar.put("a", t);
  ar.put("b", {2, 2}, {1.0, 2.5, -3.0, 1e-300});
  const auto bytes = ar.serialize();
  const Archive back = Archive::parse(bytes, "mem");
  CHECK(back.metadata["note"] == "x");
  CHECK(back.tensor_f32("a") == t);
  CHECK(back.values_f64("b", 2) == std::vector<double>{1.0, 2.5, -3.0, 1e-300});
  CHECK(back.serialize() == bytes);
  CHECK_THROWS_AS(back.values_f64("b", 3), FormatError);
  CHECK_THROWS_AS(back.entry("missing"), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(Archive::parse(truncated, "mem"), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(Archive::parse(bad_magic, "mem"), FormatError);
}
