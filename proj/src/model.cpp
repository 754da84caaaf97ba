#include "raseg/model.hpp"

#include <cmath>

#include "raseg/ndiff/archive.hpp"
#include "raseg/ndiff/ops.hpp"

namespace raseg::model {

using nlohmann::json;

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.channels = {8, 16, 32, 64};
  return c;
}

void ModelConfig::validate() const {
  if (channels.size() < 2) throw ValidationError("model.channels: need at least 2 levels");
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] < 1) throw ValidationError("model.channels: entries must be >= 1");
    if (i > 0 && channels[i] <= channels[i - 1]) throw ValidationError("model.channels: must be strictly increasing");
  }
  if (strides.size() != channels.size() - 1) {
    throw ValidationError("model.strides: need " + std::to_string(channels.size() - 1) + " entries, got " +
                          std::to_string(strides.size()));
  }
  for (int s : strides) {
    if (s < 1) throw ValidationError("model.strides: entries must be >= 1");
  }
  if (convlstm_layers < 1) throw ValidationError("model.convlstm_layers: must be >= 1");
  for (int k : convlstm_kernel) {
    if (k < 1 || k % 2 == 0) throw ValidationError("model.convlstm_kernel: entries must be odd and >= 1");
  }
  if (convlstm_hidden < 0) throw ValidationError("model.convlstm_hidden: must be >= 0");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("model.dropout_rate: must be in [0,1)");
  if (out_classes < 2) throw ValidationError("model.out_classes: must be >= 2");
  if (feature_tap_step < -1 || feature_tap_step >= decoder_steps()) {
    throw ValidationError("model.feature_tap_step: valid range is [0, " + std::to_string(decoder_steps() - 1) +
                          "] or -1");
  }
  if (!attention_levels.empty() && attention_levels.size() != channels.size() - 1) {
    throw ValidationError("model.attention_levels: need " + std::to_string(channels.size() - 1) + " flags");
  }
  if (attention_convs < 1) throw ValidationError("model.attention_convs: must be >= 1");
  if (!(input_window[0] < input_window[1])) throw ValidationError("model.input_window: low must be < high");
}

int ModelConfig::resolved_tap_step() const {
  if (feature_tap_step >= 0) return feature_tap_step;
  return std::max(decoder_steps() - 2, 0);
}

bool ModelConfig::attention_on(int level) const { return attention_levels.empty() || attention_levels[level]; }

int ModelConfig::total_stride() const {
  int p = 1;
  for (int s : strides) p *= s;
  return p;
}

int ModelConfig::decoder_scale(int step) const {
  const int level = levels() - 2 - step;
  int p = 1;
  for (int i = 0; i < level; ++i) p *= strides[i];
  return p;
}

json to_json(const ModelConfig& c) {
  std::vector<bool> att = c.attention_levels;
  if (att.empty()) att.assign(c.channels.size() - 1, true);
  return json{{"channels", c.channels},
              {"strides", c.strides},
              {"convlstm_layers", c.convlstm_layers},
              {"convlstm_kernel", c.convlstm_kernel},
              {"convlstm_hidden", c.hidden_channels()},
              {"dropout_rate", c.dropout_rate},
              {"out_classes", c.out_classes},
              {"feature_tap_step", c.resolved_tap_step()},
              {"attention_levels", att},
              {"attention_convs", c.attention_convs},
              {"input_window", c.input_window}};
}

ModelConfig model_config_from_json(const json& j, const ModelConfig& defaults) {
  ModelConfig c = defaults;
  try {
    if (j.contains("channels")) {
      c.channels = j["channels"].get<std::vector<int>>();
      if (!j.contains("strides")) c.strides.assign(c.channels.size() > 0 ? c.channels.size() - 1 : 0, 2);
      if (!j.contains("attention_levels")) c.attention_levels.clear();
    }
    if (j.contains("strides")) c.strides = j["strides"].get<std::vector<int>>();
    if (j.contains("convlstm_layers")) c.convlstm_layers = j["convlstm_layers"].get<int>();
    if (j.contains("convlstm_kernel")) c.convlstm_kernel = j["convlstm_kernel"].get<std::array<int, 2>>();
    if (j.contains("convlstm_hidden")) c.convlstm_hidden = j["convlstm_hidden"].get<int>();
    if (j.contains("dropout_rate")) c.dropout_rate = j["dropout_rate"].get<double>();
    if (j.contains("out_classes")) c.out_classes = j["out_classes"].get<int>();
    if (j.contains("feature_tap_step")) c.feature_tap_step = j["feature_tap_step"].get<int>();
    if (j.contains("attention_levels")) c.attention_levels = j["attention_levels"].get<std::vector<bool>>();
    if (j.contains("attention_convs")) c.attention_convs = j["attention_convs"].get<int>();
    if (j.contains("input_window")) c.input_window = j["input_window"].get<std::array<double, 2>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Initialisation

namespace {

class Initializer {
 public:
  Initializer(ParamStore<float>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  void he(const std::string& name, Shape5 s, double fan_in) {
    Tensor5<float> t(s);
    const double sd = std::sqrt(2.0 / fan_in);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(sd * rng_.normal());
    add(name, std::move(t));
  }
  void constant(const std::string& name, int channels, float v) {
    add(name, Tensor5<float>(Shape5{channels, 1, 1, 1, 1}, v));
  }
  void conv(const std::string& prefix, int cout, int cin, int k) {
    he(prefix + ".w", {cout, cin, k, k, k}, static_cast<double>(cin) * k * k * k);
    constant(prefix + ".b", cout, 0.0f);
  }
  void norm_act(const std::string& prefix, int c) {
    constant(prefix + ".norm.g", c, 1.0f);
    constant(prefix + ".norm.b", c, 0.0f);
    constant(prefix + ".act.a", c, 0.25f);
  }

 private:
  void add(const std::string& name, Tensor5<float> t) {
    nd::Parameter<float> p;
    p.grad = Tensor5<float>(t.shape());
    p.value = std::move(t);
    if (!store_.emplace(name, std::move(p)).second) throw StateError("duplicate parameter '" + name + "'");
  }

  ParamStore<float>& store_;
  Rng rng_;
};

}  // namespace

RaSegModel build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  RaSegModel m{cfg, {}};
  Initializer init(m.params, seed);
  const int L = cfg.levels();
  for (int l = 0; l < L; ++l) {
    const std::string p = "enc" + std::to_string(l);
    init.conv(p + ".conv", cfg.channels[l], l == 0 ? 1 : cfg.channels[l - 1], 3);
    init.norm_act(p, cfg.channels[l]);
  }
  const int kh = cfg.convlstm_kernel[0], kw = cfg.convlstm_kernel[1];
  const int hc = cfg.hidden_channels();
  for (int k = 0; k < cfg.convlstm_layers; ++k) {
    const std::string p = "rec" + std::to_string(k);
    const int cin = k == 0 ? cfg.channels.back() : hc;
    init.he(p + ".wx", {4 * hc, cin, 1, kh, kw}, static_cast<double>(cin) * kh * kw);
    init.he(p + ".wh", {4 * hc, hc, 1, kh, kw}, static_cast<double>(hc) * kh * kw);
    Tensor5<float> b(Shape5{4 * hc, 1, 1, 1, 1});
    for (int j = hc; j < 2 * hc; ++j) b[j] = 1.0f;
    nd::Parameter<float> bp{std::move(b), Tensor5<float>(Shape5{4 * hc, 1, 1, 1, 1})};
    m.params.emplace(p + ".b", std::move(bp));
  }
  for (int l = 0; l < L - 1; ++l) {
    if (!cfg.attention_on(l)) continue;
    const std::string p = "att" + std::to_string(l);
    for (int k = 0; k < cfg.attention_convs; ++k) {
      init.conv(p + ".conv" + std::to_string(k), cfg.channels[l], k == 0 ? 1 : cfg.channels[l], 3);
      if (k + 1 < cfg.attention_convs) init.constant(p + ".act" + std::to_string(k) + ".a", cfg.channels[l], 0.25f);
    }
  }
  int cur = hc;
  for (int j = 0; j < cfg.decoder_steps(); ++j) {
    const int l = L - 2 - j;
    const int c = cfg.channels[l];
    const int s = cfg.strides[l];
    const std::string p = "dec" + std::to_string(j);
    // Transposed-conv weights are (Cin, Cout, k, k, k).
    init.he(p + ".up.w", {cur, c, 3, 3, 3}, static_cast<double>(cur) * 27.0 / (s * s * s));
    init.constant(p + ".up.b", c, 0.0f);
    init.norm_act(p + ".up", c);
    init.conv(p + ".conv", c, 2 * c, 3);
    init.norm_act(p, c);
    cur = c;
  }
  init.conv("head", cfg.out_classes, cfg.channels[0], 1);
  return m;
}

template <typename T>
ParamStore<T> cast_params(const ParamStore<float>& params) {
  ParamStore<T> out;
  for (const auto& [name, p] : params) {
    out.emplace(name, nd::Parameter<T>{p.value.template cast<T>(), Tensor5<T>(p.value.shape())});
  }
  return out;
}

template ParamStore<float> cast_params<float>(const ParamStore<float>&);
template ParamStore<double> cast_params<double>(const ParamStore<float>&);

// ---------------------------------------------------------------------------
// Tensors from volumes

Tensor5<float> image_tensor(const volio::Volume& vol, const std::array<double, 2>& window) {
  const auto s = vol.shape();
  Tensor5<float> t(Shape5{1, 1, s[0], s[1], s[2]});
  const double span = window[1] - window[0];
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>((vol.data()[i] - window[0]) / span);
  return t;
}

Tensor5<float> mask_tensor(const volio::Volume& vol) {
  const auto s = vol.shape();
  Tensor5<float> t(Shape5{1, 1, s[0], s[1], s[2]});
  std::copy(vol.data().begin(), vol.data().end(), t.data());
  return t;
}

template <typename T>
Tensor5<T> downsample_nearest(const Tensor5<T>& x, int d, int h, int w) {
  const Shape5 s = x.shape();
  if (d == s.d && h == s.h && w == s.w) return x;
  Tensor5<T> y(Shape5{s.n, s.c, d, h, w});
  auto src = [](int i, int out, int in) {
    return std::min(static_cast<int>(std::floor((i + 0.5) * in / static_cast<double>(out))), in - 1);
  };
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int z = 0; z < d; ++z)
        for (int yy = 0; yy < h; ++yy)
          for (int xx = 0; xx < w; ++xx) y(n, c, z, yy, xx) = x(n, c, src(z, d, s.d), src(yy, h, s.h), src(xx, w, s.w));
  return y;
}

template Tensor5<float> downsample_nearest<float>(const Tensor5<float>&, int, int, int);
template Tensor5<double> downsample_nearest<double>(const Tensor5<double>&, int, int, int);

// ---------------------------------------------------------------------------
// Graph assembly

namespace {

template <typename T>
Var P(Graph<T>& g, const ParamStore<T>& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw StateError("model parameter '" + name + "' is missing");
  return g.param(name, it->second.value);
}

template <typename T>
Var norm_act(Graph<T>& g, Var x, const ParamStore<T>& params, const std::string& prefix) {
  x = nd::instance_norm(g, x, P(g, params, prefix + ".norm.g"), P(g, params, prefix + ".norm.b"));
  return nd::prelu(g, x, P(g, params, prefix + ".act.a"));
}

}  // namespace

template <typename T>
Var attention_recalibrate(Graph<T>& g, Var f_in, Var b_t, const ParamStore<T>& params, const std::string& prefix,
                          int convs) {
  const Shape5 fs = g.shape(f_in), bs = g.shape(b_t);
  if (bs.c != 1) throw DimensionError("attention: b_t must be single-channel, got " + bs.str());
  if (bs.n != fs.n || bs.d != fs.d || bs.h != fs.h || bs.w != fs.w) {
    throw DimensionError("attention: b_t " + bs.str() + " does not match f_in " + fs.str() + " spatially");
  }
  const nd::ConvAttrs same{{1, 1, 1}, {1, 1, 1}};
  Var a = b_t;
  for (int k = 0; k < convs; ++k) {
    const std::string p = prefix + ".conv" + std::to_string(k);
    a = nd::conv3d(g, a, P(g, params, p + ".w"), P(g, params, p + ".b"), same);
    if (k + 1 < convs) a = nd::prelu(g, a, P(g, params, prefix + ".act" + std::to_string(k) + ".a"));
  }
  if (g.shape(a) != fs) {
    throw DimensionError("attention: gate " + g.shape(a).str() + " does not match f_in " + fs.str());
  }
  return nd::add(g, f_in, nd::mul(g, nd::sigmoid(g, a), f_in));
}

template <typename T>
Var recurrent_block(Graph<T>& g, Var x, const ParamStore<T>& params, int layers) {
  const Shape5 s = g.shape(x);
  std::vector<Var> seq;
  for (int t = 0; t < s.d; ++t) seq.push_back(nd::slice_depth(g, x, t));
  for (int k = 0; k < layers; ++k) {
    const std::string p = "rec" + std::to_string(k);
    const Var wx = P(g, params, p + ".wx"), wh = P(g, params, p + ".wh"), b = P(g, params, p + ".b");
    const int hc = g.shape(wh).c;
    Var h = g.input(Tensor5<T>(Shape5{s.n, hc, 1, s.h, s.w}));
    Var c = g.input(Tensor5<T>(Shape5{s.n, hc, 1, s.h, s.w}));
    for (Var& xt : seq) {
      std::tie(h, c) = nd::convlstm_cell(g, xt, h, c, wx, wh, b);
      xt = h;
    }
  }
  return nd::concat_depth(g, std::span<const Var>(seq));
}

void check_input_shape(const ModelConfig& cfg, const Shape5& s) {
  if (s.c != 1) throw DimensionError("model input must be single-channel, got " + s.str());
  const int m = cfg.total_stride();
  if (s.d % m != 0 || s.h % m != 0 || s.w % m != 0) {
    throw DimensionError("model input spatial dims " + s.str() + " must be multiples of " + std::to_string(m));
  }
}

template <typename T>
ForwardResult<T> forward_graph(Graph<T>& g, const ModelConfig& cfg, const ParamStore<T>& params, Var image,
                               const Tensor5<T>& bbox) {
  const Shape5 is = g.shape(image);
  check_input_shape(cfg, is);
  if (bbox.shape() != is) throw DimensionError("bbox " + bbox.shape().str() + " must match image " + is.str());
  const int L = cfg.levels();
  const double rate = cfg.dropout_rate;

  std::vector<Var> skips;
  Var x = image;
  for (int l = 0; l < L; ++l) {
    const std::string p = "enc" + std::to_string(l);
    const int s = l == 0 ? 1 : cfg.strides[l - 1];
    x = nd::conv3d(g, x, P(g, params, p + ".conv.w"), P(g, params, p + ".conv.b"), nd::ConvAttrs{{s, s, s}, {1, 1, 1}});
    x = nd::spatial_dropout(g, norm_act(g, x, params, p), rate);
    skips.push_back(x);
  }
  x = recurrent_block(g, x, params, cfg.convlstm_layers);

  ForwardResult<T> r;
  for (int j = 0; j < cfg.decoder_steps(); ++j) {
    const int l = L - 2 - j;
    const int s = cfg.strides[l];
    const std::string p = "dec" + std::to_string(j);
    Var up = nd::tconv3d(g, x, P(g, params, p + ".up.w"), P(g, params, p + ".up.b"),
                         nd::TConvAttrs{{s, s, s}, {1, 1, 1}, {s - 1, s - 1, s - 1}});
    up = norm_act(g, up, params, p + ".up");
    Var skip = skips[l];
    if (cfg.attention_on(l)) {
      const Shape5 fs = g.shape(skip);
      Var b = g.input(downsample_nearest(bbox, fs.d, fs.h, fs.w));
      skip = attention_recalibrate(g, skip, b, params, "att" + std::to_string(l), cfg.attention_convs);
    }
    const std::array<Var, 2> parts{up, skip};
    x = nd::concat_channel(g, std::span<const Var>(parts));
    x = nd::conv3d(g, x, P(g, params, p + ".conv.w"), P(g, params, p + ".conv.b"), nd::ConvAttrs{{1, 1, 1}, {1, 1, 1}});
    x = nd::spatial_dropout(g, norm_act(g, x, params, p), rate);
    r.decoder_steps.push_back(x);
  }
  r.logits = nd::conv3d(g, x, P(g, params, "head.w"), P(g, params, "head.b"), nd::ConvAttrs{});
  return r;
}

#define RASEG_INSTANTIATE_MODEL(T)                                                                         \
  template Var attention_recalibrate<T>(Graph<T>&, Var, Var, const ParamStore<T>&, const std::string&, int); \
  template Var recurrent_block<T>(Graph<T>&, Var, const ParamStore<T>&, int);                               \
  template ForwardResult<T> forward_graph<T>(Graph<T>&, const ModelConfig&, const ParamStore<T>&, Var,      \
                                             const Tensor5<T>&);

RASEG_INSTANTIATE_MODEL(float)
RASEG_INSTANTIATE_MODEL(double)

Tensor5<float> forward(const RaSegModel& model, const Tensor5<float>& image, const Tensor5<float>& bbox, Mode mode,
                       std::uint64_t dropout_seed) {
  Graph<float> g(mode == Mode::Train, dropout_seed);
  const Var x = g.input(image);
  const auto r = forward_graph(g, model.config, model.params, x, bbox);
  return g.value(r.logits);
}

Tensor5<float> extract_decoder_features(const RaSegModel& model, const Tensor5<float>& image,
                                        const Tensor5<float>& bbox, int step) {
  const int n = model.config.decoder_steps();
  if (step < 0 || step >= n) {
    throw ValidationError("decoder step " + std::to_string(step) + " out of range; valid steps are 0.." +
                          std::to_string(n - 1));
  }
  Graph<float> g(false, 0);
  const Var x = g.input(image);
  const auto r = forward_graph(g, model.config, model.params, x, bbox);
  return g.value(r.decoder_steps[step]);
}

// ---------------------------------------------------------------------------
// Checkpoints

std::filesystem::path checkpoint_archive_path(const std::filesystem::path& stem) {
  std::filesystem::path p = stem;
  if (p.extension() == ".ndarc" || p.extension() == ".json") p.replace_extension();
  p += ".ndarc";
  return p;
}

void save_checkpoint(const RaSegModel& model, const std::filesystem::path& stem, const nd::AdamState<float>* adam,
                     const json& extra) {
  nd::Archive ar;
  ar.metadata = {{"format", "raseg-checkpoint"}, {"tool_version", kToolVersion}, {"model", to_json(model.config)}};
  if (extra.is_object()) {
    for (const auto& [k, v] : extra.items()) ar.metadata[k] = v;
  }
  nd::put_params(ar, model.params);
  if (adam) nd::put_adam(ar, *adam);
  const auto archive = checkpoint_archive_path(stem);
  ar.save(archive);
  auto sidecar = archive;
  sidecar.replace_extension(".json");
  json side = ar.metadata;
  side["archive"] = archive.filename().string();
  side["parameter_count"] = nd::parameter_count(model.params);
  write_text_file(sidecar, side.dump(2) + "\n");
}

RaSegModel load_checkpoint(const std::filesystem::path& path) {
  const auto archive = checkpoint_archive_path(path);
  const nd::Archive ar = nd::Archive::load(archive);
  if (ar.metadata.value("format", "") != "raseg-checkpoint" || !ar.metadata.contains("model")) {
    throw FormatError(archive.string() + ": not a model checkpoint");
  }
  RaSegModel m;
  try {
    m.config = model_config_from_json(ar.metadata["model"]);
  } catch (const ValidationError& e) {
    throw FormatError(archive.string() + ": " + e.what());
  }
  m.params = nd::get_params(ar);
  const RaSegModel fresh = build_model(m.config, 0);
  for (const auto& [name, p] : fresh.params) {
    auto it = m.params.find(name);
    if (it == m.params.end()) throw FormatError(archive.string() + ": missing parameter '" + name + "'");
    if (it->second.value.shape() != p.value.shape()) {
      throw FormatError(archive.string() + ": parameter '" + name + "' has shape " + it->second.value.shape().str() +
                        ", config expects " + p.value.shape().str());
    }
    if (!it->second.value.all_finite()) throw FormatError(archive.string() + ": parameter '" + name + "' is not finite");
  }
  if (m.params.size() != fresh.params.size()) throw FormatError(archive.string() + ": unexpected extra parameters");
  return m;
}

}  // namespace raseg::model
