#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "s2ip/matrix.hpp"

namespace s2ip {

// ---------------------------------------------------------------------------
// Reversible instance normalization

struct RevInParams {
  double gamma = 1.0;
  double beta = 0.0;
  double epsilon = 1e-5;
};

// Instance statistics (population variance) plus the affine parameters in force
// when the window was normalized.
struct RevInState {
  double mean = 0.0;
  double variance = 0.0;
  double gamma = 1.0;
  double beta = 0.0;
  double epsilon = 1e-5;

  double stddev() const;
};

struct RevInResult {
  std::vector<double> values;
  RevInState state;
};

RevInState revin_statistics(std::span<const double> x, const RevInParams& params);
// gamma * (x - mean) / sqrt(var + eps) + beta. Requires at least two samples.
RevInResult revin_normalize(std::span<const double> x, const RevInParams& params);
std::vector<double> revin_denormalize(std::span<const double> y, const RevInState& state);

// ---------------------------------------------------------------------------
// Additive seasonal-trend decomposition

enum class DecompositionMethod { classical, stl };

std::string to_string(DecompositionMethod m);
DecompositionMethod parse_decomposition_method(const std::string& s);

struct DecompositionOptions {
  std::size_t period = 24;
  std::size_t trend_window = 25;  // odd
  DecompositionMethod method = DecompositionMethod::classical;
  // STL only.
  std::size_t stl_seasonal_window = 7;  // odd, >= 3
  std::size_t stl_inner_iterations = 2;
  std::size_t stl_outer_iterations = 0;  // robustness passes
};

struct DecompositionResult {
  std::vector<double> trend;
  std::vector<double> seasonal;
  std::vector<double> residual;
  std::size_t period = 0;
  std::size_t trend_window = 0;
  DecompositionMethod method = DecompositionMethod::classical;
};

// Requires 2 <= period <= len/2 and an odd trend_window <= len.
DecompositionResult decompose(std::span<const double> x, const DecompositionOptions& options);

// Centered moving average with the series replicate-extended by window/2 at both ends.
std::vector<double> centered_moving_average(std::span<const double> x, std::size_t window);

// ---------------------------------------------------------------------------
// Patching

struct PatchSpec {
  std::size_t length = 16;
  std::size_t stride = 8;

  // floor((len - length) / stride) + 2
  std::size_t count(std::size_t series_length) const;
  void validate(std::size_t series_length) const;
};

// Right-pads by repeating the last value `stride` times, then takes
// count(len) rows of `length` values each at offsets 0, stride, 2*stride, ...
Matrix patch(std::span<const double> component, const PatchSpec& spec);

struct MetaToken {
  Matrix values;  // n_patches x 3*L_P, blocks ordered trend | seasonal | residual
  std::size_t n_patches = 0;
  RevInState revin;
};

MetaToken build_meta_token(const Matrix& trend, const Matrix& seasonal, const Matrix& residual,
                           const RevInState& revin);

// 16-byte header (8-byte magic "S2IPMTK\0", u32 rows, u32 cols), then
// row-major little-endian f64 values.
void write_meta_token(std::ostream& out, const MetaToken& token);
Matrix read_meta_token(std::istream& in);

}  // namespace s2ip
