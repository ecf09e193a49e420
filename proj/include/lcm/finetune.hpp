#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcm/checkpoint.hpp"
#include "lcm/dataset.hpp"
#include "lcm/model.hpp"
#include "lcm/training.hpp"

namespace lcm {

// What a pretrained task's labels become on a downstream dataset: a constant
// (class index or raw value), or skip to leave it unlabeled and loss-masked.
struct PseudoLabelRule {
    bool skip = false;
    double value = 0.0;
};

struct FinetuneSpec {
    std::vector<TaskSpec> new_tasks;
    std::map<std::string, PseudoLabelRule> pseudo_labels;  // keyed by pretrained task
    double fewshot_ratio = 1.0;
    std::string base_checkpoint;

    nlohmann::json to_json() const;
    static FinetuneSpec from_json(const nlohmann::json& j);
};

// Rebuilds the pretrained model and appends freshly initialized token rows
// for the new tasks; every pretrained tensor keeps its checkpoint values.
LcmModel extend_from_checkpoint(const Checkpoint& ckpt, const std::vector<TaskSpec>& new_tasks,
                                std::uint64_t seed);

// Lifts a downstream sample set (whose schema holds only the new tasks) onto
// the extended schema: pretrained label slots are filled with the mapped
// constants, or left missing for skip rules. The map must mention every
// pretrained task and nothing else.
SampleSet assign_pseudo_labels(const SampleSet& downstream, const PhenotypeSchema& pretrained,
                               const FinetuneSpec& spec);

// Subject-level subsample keeping max(1, floor(ratio * n_c)) subjects per
// class of `stratify_task` (default: the first categorical task). Subsets
// are nested across ratios for a fixed seed.
SampleSet fewshot_subsample(const SampleSet& data, double ratio, std::uint64_t seed,
                            const std::optional<std::string>& stratify_task = std::nullopt);

// The shared two-stage loop on the extended model; all parameters train
// unless cfg.freeze_backbone is set.
TrainResult finetune(LcmModel& extended, const SampleSet& train_data, const SampleSet& val_data,
                     const TrainConfig& cfg);

}  // namespace lcm
