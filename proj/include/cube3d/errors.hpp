// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cube3d {

/// Base class of every error this library throws on purpose.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define CUBE3D_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                       \
  public:                                                           \
    explicit Name(const std::string& what)                          \
        : Error(std::string(#Name) + ": " + what) {}                \
  }

CUBE3D_DEFINE_ERROR(NotACube);
CUBE3D_DEFINE_ERROR(OutOfRange);
CUBE3D_DEFINE_ERROR(LengthMismatch);
CUBE3D_DEFINE_ERROR(Desync);
CUBE3D_DEFINE_ERROR(IndivisibleShape);
CUBE3D_DEFINE_ERROR(InconsistentFamily);
CUBE3D_DEFINE_ERROR(ShapeMismatch);
CUBE3D_DEFINE_ERROR(DirectionClash);
CUBE3D_DEFINE_ERROR(BatchMismatch);
CUBE3D_DEFINE_ERROR(GroupMismatch);
CUBE3D_DEFINE_ERROR(HeadsIndivisible);
CUBE3D_DEFINE_ERROR(ConfigInvalid);
CUBE3D_DEFINE_ERROR(NonFinite);
CUBE3D_DEFINE_ERROR(IoError);

#undef CUBE3D_DEFINE_ERROR

}  // namespace cube3d
