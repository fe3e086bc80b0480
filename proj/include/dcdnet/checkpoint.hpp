#pragma once

#include <filesystem>
#include <memory>

#include "dcdnet/config.hpp"
#include "dcdnet/model.hpp"

// Single-file checkpoints: a versioned text header, the resolved config the
// model was built from, then named parameter groups with a shape manifest.
namespace dcdnet {

inline constexpr int kCheckpointVersion = 1;

// Written to a sibling temp file, then renamed into place.
void save_checkpoint(const std::filesystem::path& path, DcdNet& model, const RunConfig& cfg);

struct LoadedCheckpoint {
  RunConfig config;
  std::unique_ptr<DcdNet> model;
  bool has_cam = false;
};

// Throws MissingArtifact if the file is absent, ShapeError on any manifest
// mismatch, std::runtime_error on a malformed file.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Loads into an existing model; groups, names and shapes must match exactly.
void load_parameters(const std::filesystem::path& path, DcdNet& model);

}  // namespace dcdnet
