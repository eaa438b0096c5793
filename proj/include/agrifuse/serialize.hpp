// SPDX-License-Identifier: Apache-2.0
#ifndef AGRIFUSE_SERIALIZE_HPP
#define AGRIFUSE_SERIALIZE_HPP

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "agrifuse/tensor.hpp"

namespace agrifuse {

/// AGT1 flat tensor container: magic "AGT1", rank and dims as 64-bit
/// little-endian unsigned, then row-major IEEE-754 doubles, little-endian.
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

/// Ordered (name, parameter) view of a model; order fixes the optimizer
/// update sequence and the checkpoint layout.
using ParamMap = std::vector<std::pair<std::string, Tensor*>>;

/// Checkpoint directory: manifest.json (tensor names/shapes plus caller
/// hyperparameters) and one AGT1 file per tensor under tensors/.
void save_checkpoint(const std::filesystem::path& dir, const ParamMap& params,
                     const nlohmann::json& hyper);

/// Loads values into the given parameters, verifying names and shapes
/// against the manifest; returns the manifest's hyper block.
nlohmann::json load_checkpoint(const std::filesystem::path& dir,
                               ParamMap params);

/// Reads just the hyper block (to rebuild a model before loading weights).
nlohmann::json read_checkpoint_hyper(const std::filesystem::path& dir);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path,
                     const nlohmann::json& value);

/// FNV-1a hash of the canonical serialization; embedded in reports so any
/// result can be traced to the exact configuration that produced it.
std::string config_hash(const nlohmann::json& value);

}  // namespace agrifuse

#endif  // AGRIFUSE_SERIALIZE_HPP
