#pragma once

#include "normfree/model.hpp"

#include <filesystem>

namespace normfree {

/// Checkpoint file layout (all integers little-endian):
///   8 bytes   magic "NFCKPT01"
///   8 bytes   u64 header length n
///   n bytes   UTF-8 JSON header: {"config": ModelConfig, "seed": u64, "step": int,
///             "tensors": [{"name", "shape", "offset"}]} where offset counts
///             doubles from the start of the data section
///   rest      every tensor's values as IEEE-754 binary64, row-major, in header order
inline constexpr char kCheckpointMagic[8] = {'N', 'F', 'C', 'K', 'P', 'T', '0', '1'};

struct Checkpoint {
  ModelConfig config;
  std::uint64_t seed = 0;
  Index step = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Model& model, Index step);

/// Rebuilds the model and copies every stored tensor into it. Throws
/// std::runtime_error on a malformed file or a parameter mismatch.
Model load_checkpoint(const std::filesystem::path& path, Checkpoint* meta = nullptr);

}  // namespace normfree
