#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fruitreid {

using Vec3 = Eigen::Vector3d;

// Error taxonomy. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : Error {
  using Error::Error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct EmptyInputError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct DivergenceError : Error {
  using Error::Error;
};

using Rng = std::mt19937_64;

/// Mixes a base seed with a stream name so that independent components
/// (data, init, augment, ...) draw from decorrelated generators.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

inline Rng make_rng(std::uint64_t seed, std::string_view stream) {
  return Rng(derive_seed(seed, stream));
}

}  // namespace fruitreid
