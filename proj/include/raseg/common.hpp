#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace raseg {

// Error hierarchy. Each category maps onto one CLI exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 1; }
  virtual const char* kind() const { return "error"; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  const char* kind() const override { return "validation"; }
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
  const char* kind() const override { return "dimension"; }
};

class EmptyMaskError : public ValidationError {
 public:
  using ValidationError::ValidationError;
  const char* kind() const override { return "empty_mask"; }
};

class StateError : public Error {
 public:
  using Error::Error;
  const char* kind() const override { return "state"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
  const char* kind() const override { return "io"; }
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
  const char* kind() const override { return "format"; }
};

class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
  const char* kind() const override { return "numerical"; }
};

class ConvergenceError : public NumericalError {
 public:
  ConvergenceError(const std::string& what, double residual)
      : NumericalError(what), residual_(residual) {}
  double residual() const { return residual_; }
  const char* kind() const override { return "convergence"; }

 private:
  double residual_;
};

/// Seeded random source used everywhere in the project.
///
/// The engine is the standard 64-bit Mersenne Twister (mt19937_64), whose
/// output sequence is fixed by the C++ standard. Distributions are computed
/// here rather than through <random> distributions, which are
/// implementation-defined, so sequences are portable across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n), unbiased.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Mixes a base seed with stream identifiers (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::vector<char> read_binary_file(const std::filesystem::path& path);
void write_binary_file(const std::filesystem::path& path, const std::vector<char>& bytes);

inline constexpr const char* kToolVersion = "0.3.0";

}  // namespace raseg
