#include "lcm/finetune.hpp"

#include <algorithm>
#include <cmath>

#include "lcm/errors.hpp"
#include "lcm/rng.hpp"

namespace lcm {

nlohmann::json FinetuneSpec::to_json() const {
    nlohmann::json j;
    j["new_tasks"] = PhenotypeSchema(new_tasks).to_json();
    j["pseudo_labels"] = nlohmann::json::object();
    for (const auto& [task, rule] : pseudo_labels) {
        j["pseudo_labels"][task] = rule.skip ? nlohmann::json("skip") : nlohmann::json(rule.value);
    }
    j["fewshot_ratio"] = fewshot_ratio;
    j["base_checkpoint"] = base_checkpoint;
    return j;
}

FinetuneSpec FinetuneSpec::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("finetune spec must be a JSON object");
    FinetuneSpec spec;
    if (!j.contains("new_tasks")) throw ValidationError("finetune spec is missing 'new_tasks'");
    spec.new_tasks = PhenotypeSchema::from_json(j.at("new_tasks")).tasks();
    if (j.contains("pseudo_labels")) {
        if (!j["pseudo_labels"].is_object()) {
            throw ValidationError("'pseudo_labels' must map task names to values");
        }
        for (const auto& [task, v] : j["pseudo_labels"].items()) {
            PseudoLabelRule rule;
            if (v.is_string() && v.get<std::string>() == "skip") {
                rule.skip = true;
            } else if (v.is_number()) {
                rule.value = v.get<double>();
            } else {
                throw ValidationError("pseudo label for '" + task +
                                      "' must be a number or \"skip\"");
            }
            spec.pseudo_labels[task] = rule;
        }
    }
    spec.fewshot_ratio = j.value("fewshot_ratio", 1.0);
    spec.base_checkpoint = j.value("base_checkpoint", std::string{});
    return spec;
}

LcmModel extend_from_checkpoint(const Checkpoint& ckpt, const std::vector<TaskSpec>& new_tasks,
                                std::uint64_t seed) {
    LcmModel model = model_from_checkpoint(ckpt);
    model.extend_tokens(new_tasks, seed);
    return model;
}

SampleSet assign_pseudo_labels(const SampleSet& downstream, const PhenotypeSchema& pretrained,
                               const FinetuneSpec& spec) {
    for (const auto& [task, rule] : spec.pseudo_labels) {
        if (!pretrained.has_task(task)) {
            throw ValidationError("pseudo-label map references unknown task '" + task + "'");
        }
        if (rule.skip) continue;
        const auto& pretrained_task = pretrained.tasks()[pretrained.task_index(task)];
        if (pretrained_task.kind == TaskKind::kCategorical) {
            const double rounded = std::nearbyint(rule.value);
            if (rounded < 0.0 || rounded >= double(pretrained_task.class_count) ||
                std::abs(rule.value - rounded) > 1e-9) {
                throw ValidationError("pseudo label " + std::to_string(rule.value) +
                                      " is not a class of task '" + task + "'");
            }
        }
    }
    for (const auto& task : pretrained.tasks()) {
        if (spec.pseudo_labels.find(task.name) == spec.pseudo_labels.end()) {
            throw ValidationError("pseudo-label map must cover pretrained task '" + task.name +
                                  "' (use \"skip\" to leave it unlabeled)");
        }
    }

    PhenotypeSchema extended = pretrained.extended(downstream.schema.tasks());
    SampleSet out;
    out.schema = extended;
    out.region_count = downstream.region_count;
    out.samples.reserve(downstream.samples.size());
    const std::size_t pretrained_count = pretrained.tasks().size();
    for (const auto& sample : downstream.samples) {
        Sample lifted;
        lifted.subject_id = sample.subject_id;
        lifted.fc = sample.fc;
        lifted.labels.resize(pretrained_count + sample.labels.size());
        for (std::size_t t = 0; t < pretrained_count; ++t) {
            const auto& rule = spec.pseudo_labels.at(pretrained.tasks()[t].name);
            if (!rule.skip) lifted.labels[t] = rule.value;
        }
        for (std::size_t t = 0; t < sample.labels.size(); ++t) {
            lifted.labels[pretrained_count + t] = sample.labels[t];
        }
        out.samples.push_back(std::move(lifted));
    }
    return out;
}

SampleSet fewshot_subsample(const SampleSet& data, double ratio, std::uint64_t seed,
                            const std::optional<std::string>& stratify_task) {
    if (!(ratio > 0.0) || ratio > 1.0) throw ConfigError("fewshot ratio must be in (0, 1]");
    if (ratio == 1.0) return data;

    std::optional<std::size_t> task_index;
    if (stratify_task.has_value()) {
        task_index = data.schema.task_index(*stratify_task);
        if (data.schema.tasks()[*task_index].kind != TaskKind::kCategorical) {
            throw ConfigError("fewshot stratification task '" + *stratify_task +
                              "' is not categorical");
        }
    } else {
        for (std::size_t t = 0; t < data.schema.tasks().size(); ++t) {
            if (data.schema.tasks()[t].kind == TaskKind::kCategorical) {
                task_index = t;
                break;
            }
        }
    }

    // Subject -> stratification class (first labeled scan wins); -1 for
    // subjects without a label.
    std::vector<std::string> subjects = unique_subjects(data);
    std::map<std::string, std::ptrdiff_t> class_of;
    for (const auto& id : subjects) class_of[id] = -1;
    if (task_index.has_value()) {
        for (const auto& sample : data.samples) {
            auto& slot = class_of[sample.subject_id];
            const auto& label = sample.labels[*task_index];
            if (slot < 0 && label.has_value()) {
                slot = static_cast<std::ptrdiff_t>(std::nearbyint(*label));
            }
        }
        const auto& task = data.schema.tasks()[*task_index];
        for (std::size_t c = 0; c < task.class_count; ++c) {
            const bool present = std::any_of(subjects.begin(), subjects.end(), [&](const auto& s) {
                return class_of[s] == static_cast<std::ptrdiff_t>(c);
            });
            if (!present) {
                throw ValidationError("class " + std::to_string(c) + " of task '" + task.name +
                                      "' has no subjects to sample from");
            }
        }
    }

    // One global permutation keeps subsets nested across ratios.
    Rng(seed, "fewshot").shuffle(subjects);
    std::map<std::ptrdiff_t, std::size_t> class_sizes;
    for (const auto& id : subjects) class_sizes[class_of[id]] += 1;

    std::map<std::ptrdiff_t, std::size_t> keep_quota;
    for (const auto& [cls, n] : class_sizes) {
        keep_quota[cls] =
            std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(ratio * double(n))));
    }
    std::map<std::string, bool> keep;
    std::map<std::ptrdiff_t, std::size_t> kept_so_far;
    for (const auto& id : subjects) {
        const auto cls = class_of[id];
        keep[id] = kept_so_far[cls] < keep_quota[cls];
        if (keep[id]) kept_so_far[cls] += 1;
    }

    SampleSet out;
    out.schema = data.schema;
    out.region_count = data.region_count;
    for (const auto& sample : data.samples) {
        if (keep[sample.subject_id]) out.samples.push_back(sample);
    }
    return out;
}

TrainResult finetune(LcmModel& extended, const SampleSet& train_data, const SampleSet& val_data,
                     const TrainConfig& cfg) {
    return train(extended, train_data, val_data, cfg);
}

}  // namespace lcm
