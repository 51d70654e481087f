#pragma once

#include <stdexcept>
#include <string>

namespace pvit6d {

struct DegenerateRotation : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegenerateRay : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingDiameter : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VariantMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegenerateInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnknownClass : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigInvalid : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegenerateBBox : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NaNLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnsupportedMode : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyDataset : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace pvit6d
