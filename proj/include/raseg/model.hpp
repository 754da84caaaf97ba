#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raseg/ndiff/adam.hpp"
#include "raseg/ndiff/graph.hpp"
#include "raseg/volio.hpp"

namespace raseg::model {

using nd::Graph;
using nd::ParamStore;
using nd::Shape5;
using nd::Tensor5;
using nd::Var;

struct ModelConfig {
  std::vector<int> channels{64, 128, 256, 512};
  /// Downsampling factor between consecutive levels (channels.size() - 1).
  std::vector<int> strides{2, 2, 2};
  int convlstm_layers = 3;
  std::array<int, 2> convlstm_kernel{3, 3};
  /// 0 keeps the bottleneck channel count.
  int convlstm_hidden = 0;
  double dropout_rate = 0.1;
  int out_classes = 2;
  /// Decoder step whose activation feeds the classification stage;
  /// -1 selects the second-to-last step.
  int feature_tap_step = -1;
  /// One flag per skip level (finest first); empty enables every level.
  std::vector<bool> attention_levels;
  int attention_convs = 1;
  /// Intensity window mapped onto [0, 1] before the first layer.
  std::array<double, 2> input_window{-200.0, 250.0};

  /// channels (8,16,32,64), everything else at its default.
  static ModelConfig desk();

  void validate() const;
  int levels() const { return static_cast<int>(channels.size()); }
  int decoder_steps() const { return levels() - 1; }
  int hidden_channels() const { return convlstm_hidden > 0 ? convlstm_hidden : channels.back(); }
  int resolved_tap_step() const;
  bool attention_on(int level) const;
  /// Product of all strides; input spatial dims must be multiples of it.
  int total_stride() const;
  /// Channel count and downsampling factor of decoder step `step`.
  int decoder_channels(int step) const { return channels[levels() - 2 - step]; }
  int decoder_scale(int step) const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& defaults = {});

struct RaSegModel {
  ModelConfig config;
  ParamStore<float> params;
};

enum class Mode { Train, Eval };

/// He-normal convolution weights, zero biases, unit/zero norm affine, PReLU
/// slopes 0.25, forget-gate biases 1. Deterministic in `seed`.
RaSegModel build_model(const ModelConfig& cfg, std::uint64_t seed);

template <typename T>
ParamStore<T> cast_params(const ParamStore<float>& params);

/// Maps a raw-intensity volume to a (1,1,D,H,W) tensor scaled by the window.
Tensor5<float> image_tensor(const volio::Volume& vol, const std::array<double, 2>& window);
/// (1,1,D,H,W) copy of a mask volume.
Tensor5<float> mask_tensor(const volio::Volume& vol);
/// Nearest-neighbour downsampling of the spatial dims to `d,h,w`.
template <typename T>
Tensor5<T> downsample_nearest(const Tensor5<T>& x, int d, int h, int w);

/// f_in + sigmoid(conv(b_t)) * f_in. `b_t` must already match f_in's spatial
/// dims. Parameters are read as "<prefix>.conv<k>.{w,b}" (and
/// "<prefix>.act<k>.a" between stacked convs).
template <typename T>
Var attention_recalibrate(Graph<T>& g, Var f_in, Var b_t, const ParamStore<T>& params, const std::string& prefix,
                          int convs = 1);

/// Stacked ConvLSTM passes over the depth axis, zero initial states; layer k
/// reads "rec<k>.{wx,wh,b}".
template <typename T>
Var recurrent_block(Graph<T>& g, Var x, const ParamStore<T>& params, int layers);

template <typename T>
struct ForwardResult {
  Var logits;
  /// Activation after each decoder step, coarsest first.
  std::vector<Var> decoder_steps;
};

/// Records the whole network on `g` (training mode follows the graph).
/// `image` is (N,1,D,H,W); `bbox` is a binary (N,1,D,H,W) tensor.
template <typename T>
ForwardResult<T> forward_graph(Graph<T>& g, const ModelConfig& cfg, const ParamStore<T>& params, Var image,
                               const Tensor5<T>& bbox);

/// Logits (N, out_classes, D, H, W).
Tensor5<float> forward(const RaSegModel& model, const Tensor5<float>& image, const Tensor5<float>& bbox,
                       Mode mode = Mode::Eval, std::uint64_t dropout_seed = 0);

/// Eval-mode activation of decoder step `step`.
Tensor5<float> extract_decoder_features(const RaSegModel& model, const Tensor5<float>& image,
                                        const Tensor5<float>& bbox, int step);

void check_input_shape(const ModelConfig& cfg, const Shape5& image);

/// Writes `<stem>.ndarc` (parameters, optional optimizer state, metadata)
/// and the `<stem>.json` config sidecar.
void save_checkpoint(const RaSegModel& model, const std::filesystem::path& stem,
                     const nd::AdamState<float>* adam = nullptr, const nlohmann::json& extra = {});
RaSegModel load_checkpoint(const std::filesystem::path& path);
std::filesystem::path checkpoint_archive_path(const std::filesystem::path& stem);

}  // namespace raseg::model
