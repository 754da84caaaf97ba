#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raseg/learn/classifiers.hpp"
#include "raseg/learn/grid_search.hpp"
#include "raseg/model.hpp"
#include "raseg/phantom.hpp"
#include "raseg/train.hpp"
#include "raseg/volio.hpp"

namespace raseg::cli {

struct LearnConfig {
  /// Empty string means no reduction.
  std::string reducer = "lda";
  double pca_variance = 0.95;
  double lda_shrinkage = 1e-3;
  std::string classifier = "rf";
  int folds = 5;
  std::uint64_t seed = 0;
  /// Base parameters; grid points override them.
  nlohmann::json params = nlohmann::json::object();
  /// null selects the built-in grid for the classifier.
  nlohmann::json grid = nullptr;

  void validate() const;
  learn::ReduceOptions reduce_options() const;
};

nlohmann::json to_json(const LearnConfig& c);
LearnConfig learn_config_from_json(const nlohmann::json& j, const LearnConfig& defaults = {});

/// Everything a run depends on besides its input files.
struct RunConfig {
  std::uint64_t seed = 0;
  int cohort_size = 60;
  phantom::PhantomSpec phantom;
  volio::PreprocessConfig preprocess;
  model::ModelConfig model;
  train::TrainConfig train;
  LearnConfig learn;

  /// Desk scale: 32^3 preprocessed volumes and the (8,16,32,64) network.
  static RunConfig desk();
  void validate() const;
  /// Copies `seed` into every stochastic component.
  void apply_seed(std::uint64_t seed);
};

nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep the defaults; component seeds default to the top-level
/// seed unless given explicitly.
RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& defaults = RunConfig::desk());

/// FNV-1a of the compact JSON dump.
std::string config_hash(const nlohmann::json& config);

/// Preprocessed cohort written by `preprocess` and read by `train` and
/// `extract-features`. Paths are relative to the manifest's directory.
struct PreprocessedEntry {
  std::string id;
  std::optional<int> label;
  std::string image;
  std::string tumor_mask;
  std::string bbox;
  volio::BBox3 voi;
};

struct PreprocessedManifest {
  volio::PreprocessConfig config;
  std::vector<PreprocessedEntry> entries;
};

nlohmann::json to_json(const PreprocessedManifest& m);
PreprocessedManifest preprocessed_manifest_from_json(const nlohmann::json& j);
PreprocessedManifest read_preprocessed_manifest(const std::filesystem::path& path);

/// Runs one command line (without the program name). Output goes to `out`,
/// diagnostics to `err`. Returns 0 on success, 1 on validation errors,
/// 2 on I/O errors and 3 on numerical or convergence failures.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace raseg::cli
