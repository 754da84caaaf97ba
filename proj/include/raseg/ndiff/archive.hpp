#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "raseg/ndiff/adam.hpp"
#include "raseg/ndiff/graph.hpp"

namespace raseg::nd {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct ArchiveEntry {
  DType dtype = DType::F32;
  std::vector<std::int64_t> dims;
  std::vector<float> f32;
  std::vector<double> f64;

  std::size_t numel() const;
};

/// Named-tensor archive ("NDARC"): magic, JSON metadata, then entries in
/// name order, each with dtype, rank, dims and a little-endian payload.
class Archive {
 public:
  nlohmann::json metadata = nlohmann::json::object();

  void put(const std::string& name, const Tensor5<float>& t);
  void put(const std::string& name, std::vector<std::int64_t> dims, std::vector<double> values);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const ArchiveEntry& entry(const std::string& name) const;
  Tensor5<float> tensor_f32(const std::string& name) const;
  /// f64 payload; `expected_rank` < 0 skips the rank check.
  const std::vector<double>& values_f64(const std::string& name, int expected_rank = -1) const;
  const std::map<std::string, ArchiveEntry>& entries() const { return entries_; }

  std::vector<char> serialize() const;
  static Archive parse(const std::vector<char>& bytes, const std::string& source);
  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  std::map<std::string, ArchiveEntry> entries_;
};

/// Stores parameters as "param/<name>" and optional Adam moments as
/// "adam.m/<name>", "adam.v/<name>" with the step in metadata.
void put_params(Archive& ar, const ParamStore<float>& params);
ParamStore<float> get_params(const Archive& ar);
void put_adam(Archive& ar, const AdamState<float>& state);
AdamState<float> get_adam(const Archive& ar);

}  // namespace raseg::nd
