#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "rlcf/param_tree.hpp"

namespace rlcf {

enum class Dtype { f32, f64 };

/// A manifest (`<stem>.manifest.json`: block names, shapes, dtype, byte
/// offsets, free-form metadata) next to a little-endian binary blob
/// (`<stem>.bin`).
struct Checkpoint {
  ParamTree params;
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& ckpt,
                     Dtype dtype = Dtype::f32);
/// Throws Error with the missing path when either file is absent.
Checkpoint load_checkpoint(const std::filesystem::path& stem);
bool checkpoint_exists(const std::filesystem::path& stem);

std::filesystem::path manifest_path(const std::filesystem::path& stem);
std::filesystem::path blob_path(const std::filesystem::path& stem);

/// Rounds every value to the nearest 32-bit float, so that an in-memory
/// model equals its f32 checkpoint exactly.
void round_to_f32(ParamTree& params);

}  // namespace rlcf
