#include "raseg/volio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <numeric>

#include <json.hpp>

namespace raseg::volio {

using nlohmann::json;

namespace {

void check_spacing(const Vec3& spacing, const char* what) {
  for (double s : spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw ValidationError(std::string(what) + ": spacing must be positive and finite");
    }
  }
}

}  // namespace

Volume::Volume(Shape3 shape, Vec3 spacing, Vec3 origin, float fill)
    : shape_(shape), spacing_(spacing), origin_(origin) {
  for (int n : shape) {
    if (n < 1) throw ValidationError("volume dimensions must be >= 1");
  }
  check_spacing(spacing, "volume");
  data_.assign(static_cast<std::size_t>(shape[0]) * shape[1] * shape[2], fill);
}

void Volume::set_spacing(const Vec3& spacing) {
  check_spacing(spacing, "volume");
  spacing_ = spacing;
}

Vec3 Volume::extent() const {
  return {shape_[0] * spacing_[0], shape_[1] * spacing_[1], shape_[2] * spacing_[2]};
}

bool Volume::same_geometry(const Volume& other) const {
  return shape_ == other.shape_ && spacing_ == other.spacing_;
}

bool Volume::is_binary() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return v == 0.0f || v == 1.0f; });
}

std::size_t Volume::count_nonzero() const {
  return static_cast<std::size_t>(
      std::count_if(data_.begin(), data_.end(), [](float v) { return v != 0.0f; }));
}

Interp parse_interp(const std::string& name) {
  if (name == "bspline") return Interp::BSpline;
  if (name == "linear") return Interp::Linear;
  if (name == "nearest") return Interp::Nearest;
  throw ValidationError("unknown interpolation '" + name + "' (bspline|linear|nearest)");
}

std::string to_string(Interp interp) {
  switch (interp) {
    case Interp::BSpline: return "bspline";
    case Interp::Linear: return "linear";
    case Interp::Nearest: return "nearest";
  }
  return "?";
}

void PreprocessConfig::validate() const {
  if (!(clip_low < clip_high)) throw ValidationError("preprocess.clip_low must be < clip_high");
  check_spacing(target_spacing, "preprocess.target_spacing");
  for (int n : target_shape) {
    if (n < 8) throw ValidationError("preprocess.target_shape must be >= 8 per axis");
  }
  if (voi_margin_mm < 0.0) throw ValidationError("preprocess.voi_margin_mm must be >= 0");
}

json to_json(const PreprocessConfig& c) {
  return {{"clip_low", c.clip_low},
          {"clip_high", c.clip_high},
          {"target_spacing_mm", c.target_spacing},
          {"target_shape", c.target_shape},
          {"image_interp", to_string(c.image_interp)},
          {"mask_interp", to_string(c.mask_interp)},
          {"voi_margin_mm", c.voi_margin_mm}};
}

PreprocessConfig preprocess_config_from_json(const json& j, const PreprocessConfig& defaults) {
  PreprocessConfig c = defaults;
  try {
    c.clip_low = j.value("clip_low", c.clip_low);
    c.clip_high = j.value("clip_high", c.clip_high);
    c.target_spacing = j.value("target_spacing_mm", c.target_spacing);
    c.target_shape = j.value("target_shape", c.target_shape);
    if (j.contains("image_interp")) c.image_interp = parse_interp(j["image_interp"].get<std::string>());
    if (j.contains("mask_interp")) c.mask_interp = parse_interp(j["mask_interp"].get<std::string>());
    c.voi_margin_mm = j.value("voi_margin_mm", c.voi_margin_mm);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("PreprocessConfig: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// RVOL

std::filesystem::path rvol_stem(const std::filesystem::path& path) {
  auto ext = path.extension();
  if (ext == ".json" || ext == ".raw") {
    auto p = path;
    return p.replace_extension();
  }
  return path;
}

void write_volume(const Volume& vol, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "RVOL writer assumes little-endian host");
  const auto stem = rvol_stem(path);
  json header = {
      {"shape", vol.shape()},
      {"spacing_mm", vol.spacing()},
      {"origin_mm", vol.origin()},
      {"dtype", "f32"},
      {"byte_order", "little"},
  };
  auto header_path = stem;
  header_path += ".json";
  auto raw_path = stem;
  raw_path += ".raw";
  write_text_file(header_path, header.dump(2) + "\n");
  std::vector<char> bytes(vol.size() * sizeof(float));
  std::memcpy(bytes.data(), vol.data().data(), bytes.size());
  write_binary_file(raw_path, bytes);
}

Volume read_volume(const std::filesystem::path& path) {
  const auto stem = rvol_stem(path);
  auto header_path = stem;
  header_path += ".json";
  auto raw_path = stem;
  raw_path += ".raw";
  if (!std::filesystem::exists(header_path)) {
    throw FormatError("RVOL header missing: " + header_path.string());
  }
  if (!std::filesystem::exists(raw_path)) {
    throw FormatError("RVOL payload missing: " + raw_path.string());
  }
  json header;
  try {
    header = json::parse(read_text_file(header_path));
  } catch (const json::exception& e) {
    throw FormatError("RVOL header " + header_path.string() + " is not valid JSON: " + e.what());
  }
  Shape3 shape;
  Vec3 spacing, origin;
  try {
    shape = header.at("shape").get<Shape3>();
    spacing = header.at("spacing_mm").get<Vec3>();
    origin = header.value("origin_mm", Vec3{0.0, 0.0, 0.0});
    if (header.value("dtype", std::string("f32")) != "f32") {
      throw FormatError("RVOL dtype must be f32");
    }
    if (header.value("byte_order", std::string("little")) != "little") {
      throw FormatError("RVOL byte_order must be little");
    }
  } catch (const json::exception& e) {
    throw FormatError("RVOL header " + header_path.string() + ": " + e.what());
  }
  for (int n : shape) {
    if (n < 1) throw FormatError("RVOL header has a non-positive dimension");
  }
  for (double s : spacing) {
    if (!(s > 0.0)) throw FormatError("RVOL header has non-positive spacing");
  }
  const auto bytes = read_binary_file(raw_path);
  const std::size_t voxels = static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
  if (bytes.size() != voxels * sizeof(float)) {
    throw FormatError("RVOL payload " + raw_path.string() + " holds " + std::to_string(bytes.size()) +
                      " bytes, header implies " + std::to_string(voxels * sizeof(float)));
  }
  Volume vol(shape, spacing, origin);
  std::memcpy(vol.data().data(), bytes.data(), bytes.size());
  for (float v : vol.data()) {
    if (!std::isfinite(v)) throw FormatError("RVOL payload contains non-finite voxels");
  }
  return vol;
}

// ---------------------------------------------------------------------------
// Intensity

Volume clip_intensity(const Volume& vol, double lo, double hi) {
  if (!(lo < hi)) throw ValidationError("clip_intensity: lo must be < hi");
  Volume out = vol;
  const float flo = static_cast<float>(lo), fhi = static_cast<float>(hi);
  for (float& v : out.data()) v = std::min(std::max(v, flo), fhi);
  return out;
}

// ---------------------------------------------------------------------------
// Separable interpolation

namespace {

constexpr double kBSplinePole = -0.26794919243112270;  // sqrt(3) - 2

int mirror_index(int k, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  k = std::abs(k) % period;
  return k >= n ? period - k : k;
}

// In-place conversion of samples to cubic B-spline coefficients
// (whole-sample mirror boundary).
void bspline_prefilter(std::vector<double>& c) {
  const int n = static_cast<int>(c.size());
  if (n < 2) return;
  const double z = kBSplinePole;
  const double lambda = (1.0 - z) * (1.0 - 1.0 / z);
  for (double& v : c) v *= lambda;

  const int horizon = static_cast<int>(std::ceil(std::log(1e-15) / std::log(std::abs(z))));
  double sum;
  if (horizon < n) {
    double zn = z;
    sum = c[0];
    for (int k = 1; k < horizon; ++k) {
      sum += zn * c[k];
      zn *= z;
    }
  } else {
    double zn = z;
    const double iz = 1.0 / z;
    double z2n = std::pow(z, n - 1);
    sum = c[0] + z2n * c[n - 1];
    z2n *= z2n * iz;
    for (int k = 1; k <= n - 2; ++k) {
      sum += (zn + z2n) * c[k];
      zn *= z;
      z2n *= iz;
    }
    sum /= (1.0 - zn * zn);
  }
  c[0] = sum;
  for (int k = 1; k < n; ++k) c[k] += z * c[k - 1];
  c[n - 1] = (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1]);
  for (int k = n - 2; k >= 0; --k) c[k] = z * (c[k + 1] - c[k]);
}

struct Tap {
  std::array<int, 4> idx{};
  std::array<double, 4> w{};
  int count = 0;
};

// Output index i samples the source at x = (i + 0.5) * ratio - 0.5 (voxel
// centres aligned on the shared physical extent), clamped to the edge.
std::vector<Tap> make_taps(int n_in, int n_out, double ratio, Interp interp) {
  std::vector<Tap> taps(n_out);
  for (int i = 0; i < n_out; ++i) {
    Tap& t = taps[i];
    if (interp == Interp::Nearest) {
      int k = static_cast<int>(std::floor((i + 0.5) * ratio));
      t.idx[0] = std::clamp(k, 0, n_in - 1);
      t.w[0] = 1.0;
      t.count = 1;
      continue;
    }
    double x = std::clamp((i + 0.5) * ratio - 0.5, 0.0, static_cast<double>(n_in - 1));
    const int base = static_cast<int>(std::floor(x));
    const double f = x - base;
    if (interp == Interp::Linear) {
      t.idx[0] = base;
      t.w[0] = 1.0 - f;
      t.idx[1] = std::min(base + 1, n_in - 1);
      t.w[1] = f;
      t.count = 2;
    } else {
      const double f2 = f * f, f3 = f2 * f;
      t.w[0] = (1.0 - f) * (1.0 - f) * (1.0 - f) / 6.0;
      t.w[1] = (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0;
      t.w[2] = (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0;
      t.w[3] = f3 / 6.0;
      for (int k = 0; k < 4; ++k) t.idx[k] = mirror_index(base - 1 + k, n_in);
      t.count = 4;
    }
  }
  return taps;
}

Volume resample_axis(const Volume& in, int axis, int n_out, double ratio, double new_spacing,
                     Interp interp) {
  const Shape3 s = in.shape();
  const int n_in = s[axis];
  Shape3 out_shape = s;
  out_shape[axis] = n_out;
  Vec3 spacing = in.spacing();
  Vec3 origin = in.origin();
  // Shared physical start edge.
  origin[axis] = origin[axis] - 0.5 * spacing[axis] + 0.5 * new_spacing;
  spacing[axis] = new_spacing;
  Volume out(out_shape, spacing, origin);

  std::size_t inner = 1, outer = 1;
  for (int a = axis + 1; a < 3; ++a) inner *= s[a];
  for (int a = 0; a < axis; ++a) outer *= s[a];

  const auto taps = make_taps(n_in, n_out, ratio, interp);
  std::vector<double> line(n_in);
  auto src = in.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < inner; ++k) {
      const std::size_t in_base = o * n_in * inner + k;
      const std::size_t out_base = o * static_cast<std::size_t>(n_out) * inner + k;
      for (int i = 0; i < n_in; ++i) line[i] = src[in_base + i * inner];
      if (interp == Interp::BSpline) bspline_prefilter(line);
      for (int i = 0; i < n_out; ++i) {
        const Tap& t = taps[i];
        double v = 0.0;
        for (int q = 0; q < t.count; ++q) v += t.w[q] * line[t.idx[q]];
        dst[out_base + i * inner] = static_cast<float>(v);
      }
    }
  }
  return out;
}

}  // namespace

Volume resample(const Volume& vol, const Vec3& target_spacing, Interp interp) {
  check_spacing(target_spacing, "resample target");
  Volume cur = vol;
  for (int axis = 0; axis < 3; ++axis) {
    const double old_sp = cur.spacing()[axis];
    const double new_sp = target_spacing[axis];
    if (old_sp == new_sp) continue;
    const int n_in = cur.shape()[axis];
    const int n_out = std::max(1, static_cast<int>(std::lround(n_in * old_sp / new_sp)));
    cur = resample_axis(cur, axis, n_out, new_sp / old_sp, new_sp, interp);
  }
  return cur;
}

Volume resize(const Volume& vol, const Shape3& target_shape, Interp interp) {
  for (int n : target_shape) {
    if (n < 1) throw ValidationError("resize: target shape must be >= 1 per axis");
  }
  Volume cur = vol;
  for (int axis = 0; axis < 3; ++axis) {
    const int n_in = cur.shape()[axis];
    const int n_out = target_shape[axis];
    if (n_in == n_out) continue;
    const double ratio = static_cast<double>(n_in) / n_out;
    cur = resample_axis(cur, axis, n_out, ratio, cur.spacing()[axis] * ratio, interp);
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Lung extraction

namespace {

// Labels 6-connected components of `fg`; returns per-component voxel counts
// and whether each touches the border. Label 0 is background.
struct Components {
  std::vector<int> label;
  std::vector<std::size_t> size;
  std::vector<bool> touches_border;
};

Components label_components(const Volume& vol, const std::vector<char>& fg) {
  const auto s = vol.shape();
  Components comp;
  comp.label.assign(fg.size(), 0);
  comp.size.push_back(0);
  comp.touches_border.push_back(false);
  std::vector<std::size_t> stack;
  for (int d = 0; d < s[0]; ++d) {
    for (int h = 0; h < s[1]; ++h) {
      for (int w = 0; w < s[2]; ++w) {
        const std::size_t seed = vol.index(d, h, w);
        if (!fg[seed] || comp.label[seed] != 0) continue;
        const int id = static_cast<int>(comp.size.size());
        comp.size.push_back(0);
        comp.touches_border.push_back(false);
        comp.label[seed] = id;
        stack.push_back(seed);
        while (!stack.empty()) {
          const std::size_t cur = stack.back();
          stack.pop_back();
          ++comp.size[id];
          const int cw = static_cast<int>(cur % s[2]);
          const int ch = static_cast<int>((cur / s[2]) % s[1]);
          const int cd = static_cast<int>(cur / (static_cast<std::size_t>(s[2]) * s[1]));
          if (cd == 0 || ch == 0 || cw == 0 || cd == s[0] - 1 || ch == s[1] - 1 || cw == s[2] - 1) {
            comp.touches_border[id] = true;
          }
          const int nb[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
          for (const auto& o : nb) {
            const int nd = cd + o[0], nh = ch + o[1], nw = cw + o[2];
            if (nd < 0 || nh < 0 || nw < 0 || nd >= s[0] || nh >= s[1] || nw >= s[2]) continue;
            const std::size_t ni = vol.index(nd, nh, nw);
            if (fg[ni] && comp.label[ni] == 0) {
              comp.label[ni] = id;
              stack.push_back(ni);
            }
          }
        }
      }
    }
  }
  return comp;
}

}  // namespace

Volume threshold_lung_mask(const Volume& vol) {
  std::vector<char> fg(vol.size());
  auto src = vol.data();
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = src[i] < -400.0f;
  const Components comp = label_components(vol, fg);

  std::vector<int> interior;
  for (int id = 1; id < static_cast<int>(comp.size.size()); ++id) {
    if (!comp.touches_border[id]) interior.push_back(id);
  }
  if (interior.empty()) {
    throw EmptyMaskError("threshold_lung_mask: no interior low-intensity component found");
  }
  std::stable_sort(interior.begin(), interior.end(),
                   [&](int a, int b) { return comp.size[a] > comp.size[b]; });
  if (interior.size() > 2) interior.resize(2);

  Volume mask(vol.shape(), vol.spacing(), vol.origin());
  auto dst = mask.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const int id = comp.label[i];
    dst[i] = (id != 0 && std::find(interior.begin(), interior.end(), id) != interior.end()) ? 1.0f : 0.0f;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Boxes and crops

BBox3 bbox_from_mask(const Volume& mask) {
  const auto s = mask.shape();
  BBox3 box{{s[0], s[1], s[2]}, {-1, -1, -1}};
  bool any = false;
  for (int d = 0; d < s[0]; ++d) {
    for (int h = 0; h < s[1]; ++h) {
      for (int w = 0; w < s[2]; ++w) {
        if (mask.at(d, h, w) == 0.0f) continue;
        any = true;
        const int idx[3] = {d, h, w};
        for (int a = 0; a < 3; ++a) {
          box.min_index[a] = std::min(box.min_index[a], idx[a]);
          box.max_index[a] = std::max(box.max_index[a], idx[a]);
        }
      }
    }
  }
  if (!any) throw EmptyMaskError("bbox_from_mask: mask has no nonzero voxels");
  return box;
}

Volume rasterize_bbox(const BBox3& box, const Shape3& shape, const Vec3& spacing, const Vec3& origin) {
  for (int a = 0; a < 3; ++a) {
    if (box.min_index[a] < 0 || box.max_index[a] >= shape[a] || box.min_index[a] > box.max_index[a]) {
      throw ValidationError("rasterize_bbox: box does not fit inside the volume");
    }
  }
  Volume out(shape, spacing, origin);
  for (int d = box.min_index[0]; d <= box.max_index[0]; ++d) {
    for (int h = box.min_index[1]; h <= box.max_index[1]; ++h) {
      for (int w = box.min_index[2]; w <= box.max_index[2]; ++w) out.at(d, h, w) = 1.0f;
    }
  }
  return out;
}

Volume crop(const Volume& vol, const BBox3& box) {
  const auto e = box.extent();
  Vec3 origin = vol.origin();
  for (int a = 0; a < 3; ++a) origin[a] += box.min_index[a] * vol.spacing()[a];
  Volume out(e, vol.spacing(), origin);
  for (int d = 0; d < e[0]; ++d) {
    for (int h = 0; h < e[1]; ++h) {
      const float* src = &vol.data()[vol.index(box.min_index[0] + d, box.min_index[1] + h, box.min_index[2])];
      std::copy(src, src + e[2], &out.data()[out.index(d, h, 0)]);
    }
  }
  return out;
}

VoiCrop crop_to_voi(const Volume& vol, const Volume& lung_mask, double margin_mm) {
  if (vol.shape() != lung_mask.shape()) {
    throw ValidationError("crop_to_voi: image and lung mask shapes differ");
  }
  if (margin_mm < 0.0) throw ValidationError("crop_to_voi: margin must be >= 0");
  BBox3 box;
  try {
    box = bbox_from_mask(lung_mask);
  } catch (const EmptyMaskError&) {
    throw ValidationError("crop_to_voi: lung mask is empty");
  }
  for (int a = 0; a < 3; ++a) {
    const int pad = static_cast<int>(std::ceil(margin_mm / vol.spacing()[a] - 1e-9));
    box.min_index[a] = std::max(0, box.min_index[a] - pad);
    box.max_index[a] = std::min(vol.shape()[a] - 1, box.max_index[a] + pad);
  }
  return {crop(vol, box), box};
}

// ---------------------------------------------------------------------------
// Full chain

namespace {

[[noreturn]] void rethrow_tagged(const std::string& stage) {
  const std::string prefix = "preprocess[" + stage + "]: ";
  try {
    throw;
  } catch (const EmptyMaskError& e) {
    throw EmptyMaskError(prefix + e.what());
  } catch (const DimensionError& e) {
    throw DimensionError(prefix + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(prefix + e.what());
  } catch (const FormatError& e) {
    throw FormatError(prefix + e.what());
  } catch (const IoError& e) {
    throw IoError(prefix + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(prefix + e.what());
  } catch (const Error& e) {
    throw Error(prefix + e.what());
  }
}

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error&) {
    rethrow_tagged(name);
  }
}

}  // namespace

PreprocessedSample preprocess(const Volume& image, const std::optional<Volume>& tumor_mask,
                              const std::optional<Volume>& lung_mask, const PreprocessConfig& cfg) {
  stage("config", [&] {
    cfg.validate();
    for (const auto* m : {tumor_mask ? &*tumor_mask : nullptr, lung_mask ? &*lung_mask : nullptr}) {
      if (m && !m->same_geometry(image)) throw ValidationError("mask geometry differs from image");
    }
    return 0;
  });

  Volume lung = lung_mask ? *lung_mask : stage("lung_mask", [&] { return threshold_lung_mask(image); });

  Volume img = stage("clip", [&] { return clip_intensity(image, cfg.clip_low, cfg.clip_high); });

  std::optional<Volume> tumor;
  stage("resample", [&] {
    img = resample(img, cfg.target_spacing, cfg.image_interp);
    lung = resample(lung, cfg.target_spacing, cfg.mask_interp);
    if (tumor_mask) tumor = resample(*tumor_mask, cfg.target_spacing, cfg.mask_interp);
    return 0;
  });

  PreprocessedSample out;
  stage("voi_crop", [&] {
    auto c = crop_to_voi(img, lung, cfg.voi_margin_mm);
    img = std::move(c.volume);
    out.voi = c.box;
    if (tumor) tumor = crop(*tumor, c.box);
    return 0;
  });

  stage("resize", [&] {
    out.image = resize(img, cfg.target_shape, cfg.image_interp);
    if (tumor) out.tumor_mask = resize(*tumor, cfg.target_shape, cfg.mask_interp);
    return 0;
  });

  if (out.tumor_mask) {
    stage("bbox", [&] {
      const BBox3 box = bbox_from_mask(*out.tumor_mask);
      out.bbox = rasterize_bbox(box, out.image.shape(), out.image.spacing(), out.image.origin());
      return 0;
    });
  }
  return out;
}

}  // namespace raseg::volio
