#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcm/schema.hpp"
#include "lcm/tensor.hpp"

namespace lcm {

// Manifest-level record: scans on disk plus per-task labels. A subject may
// appear in several records when labels differ per scan.
struct SubjectRecord {
    std::string subject_id;
    std::vector<std::string> scan_paths;
    std::vector<std::optional<double>> labels;  // aligned with schema tasks
};

struct Dataset {
    PhenotypeSchema schema;
    std::size_t region_count = 0;
    std::vector<SubjectRecord> records;
};

void validate_dataset(const Dataset& dataset);

Dataset dataset_from_json(const nlohmann::json& j, const std::string& context);
nlohmann::json dataset_to_json(const Dataset& dataset);
Dataset read_manifest(const std::string& path);
void write_manifest(const Dataset& dataset, const std::string& path);

// In-memory training unit: one FC matrix with its labels.
struct Sample {
    std::string subject_id;
    Tensor fc;
    std::vector<std::optional<double>> labels;
};

struct SampleSet {
    PhenotypeSchema schema;
    std::size_t region_count = 0;
    std::vector<Sample> samples;
};

// Loads every scan referenced by the manifest (paths resolve against
// base_dir), computing FC for raw scans. Scans load in parallel when
// threads > 1; sample order stays record-major.
SampleSet materialize(const Dataset& dataset, const std::string& base_dir,
                      std::size_t threads = 1);

struct FoldSplit {
    std::size_t k = 0;
    std::uint64_t seed = 0;
    std::map<std::string, std::size_t> fold_of;
};

// Subject-level assignment: unique subjects are shuffled once, then dealt
// round-robin, so fold sizes differ by at most one subject.
FoldSplit kfold_split(const SampleSet& data, std::size_t k, std::uint64_t seed);

// held_out true selects the fold itself, false its complement.
SampleSet fold_subset(const SampleSet& data, const FoldSplit& split, std::size_t fold,
                      bool held_out);

std::vector<std::string> unique_subjects(const SampleSet& data);

// Synthetic multitask generator. Each subject has a 2-D latent trait; every
// task is a projection of the trait (categorical tasks bin the projection
// into equal-frequency classes). Scans are linear mixtures of shared latent
// sources whose mixing matrix carries class-conditioned components, so
// tasks stay inter-correlated through the trait.
struct SynthConfig {
    std::vector<TaskSpec> tasks;
    std::size_t subjects_per_class = 40;
    std::size_t regions = 16;
    std::size_t timepoints = 96;
    std::size_t scans_per_subject = 1;
    std::size_t latent_dim = 4;
    double effect = 1.0;
    double noise = 0.25;
};

struct SynthOutput {
    SampleSet samples;
    std::vector<Tensor> bold;  // per sample, regions x timepoints
};

SynthOutput synth_generate(const SynthConfig& config, std::uint64_t seed);

SynthConfig synth_config_from_json(const nlohmann::json& j);

}  // namespace lcm
