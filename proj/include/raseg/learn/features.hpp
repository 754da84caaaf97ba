#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "raseg/ndiff/tensor.hpp"

namespace raseg::learn {

struct FeatureVector {
  std::string sample_id;
  std::vector<double> values;
  std::optional<int> label;
};

/// Mean over height and width, then channel-major flattening (c * D + d).
FeatureVector reduce_and_flatten(const nd::Tensor5<float>& featmap, std::string sample_id = {},
                                 std::optional<int> label = std::nullopt);

/// Row-per-sample view of a feature set.
struct FeatureTable {
  std::vector<std::string> ids;
  Eigen::MatrixXd X;
  std::vector<std::optional<int>> labels;

  /// All labels; throws ValidationError if any row is unlabeled.
  std::vector<int> y() const;
};

FeatureTable to_table(const std::vector<FeatureVector>& rows);

/// `sample_id,label,f0,...,f{N-1}`; an empty label field means unlabeled.
void write_features_csv(const std::filesystem::path& path, const std::vector<FeatureVector>& rows);
std::vector<FeatureVector> read_features_csv(const std::filesystem::path& path);

}  // namespace raseg::learn
