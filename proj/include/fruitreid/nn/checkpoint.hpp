#pragma once

#include "fruitreid/nn/tape.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <span>

namespace fruitreid::nn {

/// Checkpoint layout (all integers little-endian):
///   8-byte magic "FRCKPT\0\1"
///   uint32 JSON header length, then the header:
///     {"format_version":1, "config":{...},
///      "tensors":[{"name":..., "kind":"param"|"buffer", "shape":[r,c]}, ...]}
///   per tensor, in header order: uint32 element count, then float32 values
///   in row-major order.
inline constexpr char kCheckpointMagic[8] = {'F', 'R', 'C', 'K', 'P', 'T', '\0', '\1'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json config;
  ParamStore store;
};

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store,
                     const nlohmann::json& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rounds every parameter and buffer to float32 precision, matching what a
/// save/load cycle yields.
void round_to_float(ParamStore& store);

struct GradCheckOptions {
  double eps = 1e-4;
  /// Caps the finite-difference probes per target (0 = every entry).
  std::size_t max_entries_per_target = 0;
  std::uint64_t seed = 0;
  /// Denominator floor. Parameters whose gradient is structurally zero (a
  /// bias feeding batch norm) only see rounding noise of order ulp/eps.
  double abs_floor = 1e-8;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  /// Smallest distance of a ReLU/abs argument from its kink during the
  /// analytic pass. A value below eps means the probe may straddle a kink
  /// and the inputs should be resampled.
  double min_kink_distance = 0.0;
  std::size_t probes = 0;
};

/// Central finite differences of `loss` against the analytic gradients of
/// each target: max |a - fd| / max(|a|, |fd|, abs_floor).
GradCheckResult grad_check(const std::function<Var(Tape&)>& loss,
                           std::span<Parameter* const> targets, const GradCheckOptions& options = {});

}  // namespace fruitreid::nn
