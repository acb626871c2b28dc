#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hct/model.hpp"
#include "hct/tensor.hpp"

// Single-file checkpoint: one line of JSON manifest (config, tensor names,
// shapes, dtype) terminated by '\n', followed by the tensors' little-endian
// float32 payloads concatenated in manifest order.
namespace hct::model {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct CheckpointData {
  nlohmann::json config;         // ModelConfig echo
  nlohmann::json extra;          // caller-defined state (e.g. optimizer step)
  std::vector<NamedTensor> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Model parameters in store order, plus optional extra tensors and state.
CheckpointData snapshot(const Model& model, std::vector<NamedTensor> extra_tensors = {},
                        nlohmann::json extra = nlohmann::json::object());

/// Copies checkpoint tensors into the model's parameters. Every parameter
/// must be present with an identical shape, and every non-optimizer tensor
/// must name a model parameter; otherwise FormatError.
void load_parameters(Model& model, const CheckpointData& data);

/// Looks up a tensor by name; nullptr when absent.
const Tensor* find_tensor(const CheckpointData& data, const std::string& name);

}  // namespace hct::model
