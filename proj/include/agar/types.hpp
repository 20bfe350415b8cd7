#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace agar {

// Dense row-major storage so serialized buffers match the in-memory layout.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

// Error hierarchy. The CLI maps validation-type failures to exit code 1 and
// numeric failures (non-finite values, failed checks) to exit code 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };          // shape mismatch
struct CountError : Error { using Error::Error; };              // invalid requested count
struct CardinalityError : Error { using Error::Error; };        // set size mismatch
struct ScaleError : Error { using Error::Error; };              // input beyond supported size
struct EmptyReferenceError : Error { using Error::Error; };     // empty candidate set
struct EmptyNeighborhoodError : Error { using Error::Error; };  // node without edges
struct ConfigError : Error { using Error::Error; };             // invalid configuration
struct FormatError : Error { using Error::Error; };             // malformed file contents
struct CheckpointError : Error { using Error::Error; };         // checkpoint container problems
struct NumericError : Error { using Error::Error; };            // non-finite or failed numeric check

}  // namespace agar
