// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (all integers little-endian):
//   "RFWPCKPT" | u32 version | u32 scalar bytes (4 or 8) | u64 spec length |
//   canonical ModelSpec JSON | u64 scalar count | parameter payload in
//   declaration order | u64 FNV-1a hash of every preceding byte

#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>

#include "rfwp/model.hpp"

namespace rfwp {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  ModelSpec spec;
  std::uint32_t version = 0;
  std::uint32_t scalar_bytes = 0;
  std::uint64_t scalar_count = 0;
};

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model);

// Both throw FormatError on a missing, truncated or tampered file.
CheckpointInfo read_checkpoint_info(const std::string& path);
// Converts the payload when it was written at the other precision.
template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& path);

}  // namespace rfwp
