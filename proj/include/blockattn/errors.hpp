// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace blockattn {

// Base class for every error thrown by this library. Catching blockattn::Error
// is enough to handle anything we raise deliberately.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes disagree with each other or with the attention config.
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

// An input tensor contains NaN or +/-inf.
class NonFiniteInput : public Error {
 public:
  using Error::Error;
};

// A positional argument (doc id index, head index, ...) is outside its domain.
class IndexOutOfRange : public Error {
 public:
  using Error::Error;
};

// soft_cap requires a strictly positive cap.
class NonPositiveCap : public Error {
 public:
  using Error::Error;
};

// Neighborhood-attention canvas / kernel parameters are inconsistent.
class GeometryMismatch : public Error {
 public:
  using Error::Error;
};

// A BlockMask does not match the tensors or config it is used with.
class BlockMaskMismatch : public Error {
 public:
  using Error::Error;
};

// Saved forward statistics (out/lse) do not match the tensors passed to the
// backward pass.
class StaleStatistics : public Error {
 public:
  using Error::Error;
};

// Decode offset lies outside the cache, or offset + n_new overruns it.
class OffsetOutOfRange : public Error {
 public:
  using Error::Error;
};

// The paged cache has fewer free pages than an assign/append needs.
class OutOfPages : public Error {
 public:
  using Error::Error;
};

// A logical block referenced by a BlockMask has no physical page mapped.
class UnmappedBlock : public Error {
 public:
  using Error::Error;
};

// A converted modifier was evaluated at a physical index whose page is not
// mapped (or is owned by a different batch element).
class UnmappedPhysicalIndex : public Error {
 public:
  using Error::Error;
};

// A finite-difference routine was asked to handle more elements than it is
// willing to (it is O(elements) full passes; guard against accidents).
class SizeTooLarge : public Error {
 public:
  using Error::Error;
};

// The benchmark registry does not know the requested variant name.
class UnknownVariant : public Error {
 public:
  using Error::Error;
};

// A benchmark config file failed to parse or is missing required keys.
class ConfigParse : public Error {
 public:
  using Error::Error;
};

}  // namespace blockattn
