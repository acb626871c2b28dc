#include "hct/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>

#include "hct/errors.hpp"

namespace hct::model {

namespace {

constexpr const char* kFormat = "hct-checkpoint";

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  nlohmann::json manifest = {{"format", kFormat}, {"version", 1}, {"dtype", "float32"},
                             {"config", data.config}, {"extra", data.extra}};
  auto& entries = manifest["tensors"] = nlohmann::json::array();
  for (const auto& t : data.tensors) entries.push_back({{"name", t.name}, {"shape", t.value.shape()}});

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open checkpoint '" + path.string() + "' for writing");
  out << manifest.dump() << '\n';
  std::vector<char> bytes;
  for (const auto& t : data.tensors) {
    bytes.clear();
    bytes.reserve(t.value.size() * 4);
    for (double v : t.value.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<char>((bits >> (8 * k)) & 0xFFu));
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw FormatError("failed writing checkpoint '" + path.string() + "'");
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  std::string header;
  if (!std::getline(in, header)) throw FormatError("checkpoint '" + path.string() + "' has no manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint '" + path.string() + "' manifest is not JSON: " + e.what());
  }
  if (manifest.value("format", "") != kFormat || manifest.value("dtype", "") != "float32") {
    throw FormatError("checkpoint '" + path.string() + "' has an unsupported format or dtype");
  }
  const std::vector<unsigned char> payload{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};

  CheckpointData data;
  data.config = manifest.value("config", nlohmann::json::object());
  data.extra = manifest.value("extra", nlohmann::json::object());
  std::size_t offset = 0;
  try {
    for (const auto& entry : manifest.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      auto shape = entry.at("shape").get<Shape>();
      const std::size_t count = numel(shape);
      if (offset + count * 4 > payload.size()) {
        throw FormatError("checkpoint '" + path.string() + "' payload truncated at tensor '" + t.name + "'");
      }
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(payload[offset + i * 4 + k]) << (8 * k);
        values[i] = static_cast<double>(std::bit_cast<float>(bits));
      }
      offset += count * 4;
      t.value = Tensor(std::move(shape), std::move(values));
      data.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint '" + path.string() + "' manifest is malformed: " + e.what());
  }
  if (offset != payload.size()) {
    throw FormatError("checkpoint '" + path.string() + "' has " + std::to_string(payload.size() - offset) +
                      " trailing payload bytes");
  }
  return data;
}

CheckpointData snapshot(const Model& model, std::vector<NamedTensor> extra_tensors, nlohmann::json extra) {
  CheckpointData data;
  data.config = to_json(model.config());
  data.extra = std::move(extra);
  for (const auto& [name, var] : model.params().entries()) data.tensors.push_back({name, var.value()});
  for (auto& t : extra_tensors) data.tensors.push_back(std::move(t));
  return data;
}

const Tensor* find_tensor(const CheckpointData& data, const std::string& name) {
  for (const auto& t : data.tensors) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

void load_parameters(Model& model, const CheckpointData& data) {
  // Validate everything before mutating anything.
  for (const auto& [name, var] : model.params().entries()) {
    const Tensor* t = find_tensor(data, name);
    if (!t) throw FormatError("checkpoint is missing parameter '" + name + "'");
    if (t->shape() != var.shape()) {
      throw FormatError("checkpoint shape " + hct::to_string(t->shape()) + " for '" + name +
                        "' disagrees with model shape " + hct::to_string(var.shape()));
    }
  }
  for (const auto& t : data.tensors) {
    if (t.name.rfind("adam.", 0) != 0 && !model.params().contains(t.name)) {
      throw FormatError("checkpoint parameter '" + t.name + "' does not exist in the model");
    }
  }
  for (auto& [name, var] : model.params().entries()) {
    ad::Var handle = var;
    handle.mutable_value() = *find_tensor(data, name);
  }
}

}  // namespace hct::model
