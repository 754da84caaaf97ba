#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raseg/augment.hpp"
#include "raseg/model.hpp"
#include "raseg/volio.hpp"

namespace raseg::train {

struct LossConfig {
  double dice_weight = 1.0;
  double ce_weight = 1.0;
  double smooth = 1e-5;

  void validate() const;
};

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 2;
  int max_epochs = 100;
  int patience = 10;
  int folds = 5;
  std::uint64_t seed = 0;
  /// 0 means unlimited; otherwise training stops after this many Adam steps.
  int max_steps = 0;
  /// Stop as soon as validation DSC reaches this value.
  std::optional<double> stop_at_dsc;
  augment::AugmentConfig augment;
  LossConfig loss;

  void validate() const;
};

nlohmann::json to_json(const LossConfig& c);
LossConfig loss_config_from_json(const nlohmann::json& j, const LossConfig& defaults = {});
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults = {});

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_dsc = 0.0;
};

struct FoldReport {
  int fold_index = 0;
  double best_val_dsc = 0.0;
  /// 1-based; 0 if no epoch completed.
  int epoch_of_best = 0;
  int epochs_run = 0;
  int steps = 0;
  bool aborted = false;
  std::string diagnostic;
  std::vector<EpochRecord> history;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
};

nlohmann::json to_json(const FoldReport& r);

/// A preprocessed training item; `data.tumor_mask` is required for training
/// and validation, `data.bbox` defaults to all-ones when absent.
struct Sample {
  std::string id;
  volio::PreprocessedSample data;
};

/// Scalar Dice + cross-entropy loss recorded on the graph. `logits` is
/// (N,2,D,H,W); `target` is a binary (N,1,D,H,W) tumor mask. Soft Dice is
/// taken on the tumor-channel probability per sample and averaged.
template <typename T>
nd::Var dice_ce_loss(nd::Graph<T>& g, nd::Var logits, const nd::Tensor5<T>& target, const LossConfig& cfg);

/// Same value without a graph.
double dice_ce_loss_value(const nd::Tensor5<double>& logits, const nd::Tensor5<double>& target, const LossConfig& cfg);

/// Binary mask from the channel argmax of (1,C,D,H,W) logits, with the
/// geometry of `like`. Ties go to the lower class.
volio::Volume argmax_mask(const nd::Tensor5<float>& logits, const volio::Volume& like);

/// Eval-mode forward, bbox defaulting to all-ones, argmax mask.
volio::Volume infer(const model::RaSegModel& model, const volio::Volume& image,
                    const std::optional<volio::Volume>& bbox = std::nullopt);

/// Mean hard-mask DSC over `samples` using their ground-truth bboxes.
double evaluate_dsc(const model::RaSegModel& model, const std::vector<const Sample*>& samples);

using LogFn = std::function<void(const std::string&)>;

struct FoldResult {
  model::RaSegModel best;
  FoldReport report;
  nd::AdamState<float> adam;
};

FoldResult train_fold(const std::vector<const Sample*>& train_set, const std::vector<const Sample*>& val_set,
                      const model::ModelConfig& model_cfg, const TrainConfig& cfg, int fold_index = 0,
                      const LogFn& log = {});

/// Validation ids per fold: ids are sorted, shuffled with the seed and dealt
/// round-robin, so the result depends only on the id set.
std::vector<std::vector<std::string>> fold_partition(std::vector<std::string> ids, int folds, std::uint64_t seed);

struct MeanStd {
  double mean = 0.0;
  /// Sample standard deviation (n - 1); 0 for a single value.
  double std = 0.0;
};
MeanStd aggregate(std::span<const double> values);

struct CrossValidation {
  std::vector<FoldResult> folds;
  MeanStd dsc;
};

CrossValidation cross_validate(const std::vector<Sample>& dataset, const model::ModelConfig& model_cfg,
                               const TrainConfig& cfg, int threads = 1, const LogFn& log = {});

/// Writes fold_<k>.json, checkpoint_fold_<k>.ndarc/.json, metrics.csv and
/// cv_summary.json into `dir`.
void write_cv_outputs(const CrossValidation& cv, const std::filesystem::path& dir, const nlohmann::json& provenance);

}  // namespace raseg::train
