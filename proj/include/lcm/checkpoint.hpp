#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcm/adam.hpp"
#include "lcm/model.hpp"

namespace lcm {

// Z-scoring constants for a continuous task, estimated on training data.
struct TargetScaler {
    double mean = 0.0;
    double std_dev = 1.0;
};

struct TensorRecord {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> values;
};

// Everything needed to resume or reuse a trained model. Doubles survive the
// JSON round trip exactly (shortest round-trip formatting).
struct Checkpoint {
    int format_version = 1;
    ModelConfig config;
    std::vector<TensorRecord> tensors;
    std::optional<AdamState> optimizer;
    // Final-epoch layer-selection counts, one row per task, counts[layer].
    std::map<std::string, std::vector<std::size_t>> selection_histograms;
    std::map<std::string, TargetScaler> target_scalers;
    nlohmann::json provenance = nlohmann::json::object();
};

// Captures config plus every parameter tensor of `model`.
Checkpoint snapshot_model(const LcmModel& model);

// Rebuilds a model and overwrites its parameters from the checkpoint.
// Throws ValidationError when tensors are missing, unknown, or misshapen.
LcmModel model_from_checkpoint(const Checkpoint& ckpt);

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace lcm
