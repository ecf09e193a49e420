#pragma once

#include <cstdint>
#include <filesystem>
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

// Fraction of matching entries; throws ValidationError on empty input.
double accuracy(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels);

// Unweighted mean of per-class F1 over the classes that occur in the ground
// truth; a GT class never predicted scores 0, classes absent from GT are
// excluded entirely.
double macro_f1(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                std::size_t class_count);

// counts[gt][pred]
std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<std::size_t>& preds,
                                                       const std::vector<std::size_t>& labels,
                                                       std::size_t class_count);

struct TaskEval {
    std::string task;
    TaskKind kind = TaskKind::kCategorical;
    std::size_t sample_count = 0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::vector<std::vector<std::size_t>> confusion;
    double mse = 0.0;  // continuous tasks
};

struct EvalReport {
    std::string dataset;
    std::string fold;
    std::uint64_t seed = 0;
    std::string checkpoint_ref;
    std::vector<TaskEval> tasks;

    nlohmann::json to_json() const;
    std::string to_csv() const;
};

// Scores predict_test over every labeled test sample, per task.
EvalReport evaluate(const LcmModel& model, const Checkpoint& ckpt, const SampleSet& test);

struct AttentionSummary {
    std::string task;
    double group_value = 0.0;  // label the group shares
    std::size_t sample_count = 0;
    Tensor mean_weights;  // task tokens x regions, rows sum to 1
};

// Cross-attention maps at the task's selected readout layer, head-averaged,
// grouped by that task's label (ground truth, or the model's own prediction
// when group_by_predicted). Unlabeled samples and empty classes are skipped.
std::vector<AttentionSummary> aggregate_attention(const LcmModel& model, const Checkpoint& ckpt,
                                                  const SampleSet& test,
                                                  const std::string& group_task,
                                                  bool group_by_predicted = false);

std::string attention_summary_csv(const AttentionSummary& summary);

struct ScalingRow {
    std::string arm;  // "lcm" or "mlp"
    std::size_t layers = 0;
    std::size_t parameter_count = 0;
    double median_final_loss = 0.0;
    std::vector<double> per_seed_losses;
};

struct ScalingStudyConfig {
    std::vector<std::size_t> depths;
    std::vector<std::uint64_t> seeds;
    ModelConfig base;   // dim/heads/regions/schema shared across depths
    TrainConfig train;  // identical budget per arm
    bool include_mlp_baseline = false;
    std::size_t mlp_layers = 2;
};

// Trains one model per (depth, seed) under the same budget and reports the
// median final training loss per depth; optionally adds a residual
// feed-forward baseline on the flattened FC matrix.
std::vector<ScalingRow> scaling_study(const ScalingStudyConfig& cfg, const SampleSet& train_data,
                                      const SampleSet& val_data);

std::string scaling_table_csv(const std::vector<ScalingRow>& rows);

struct BestLayerRow {
    std::string task;
    std::vector<std::size_t> counts;  // per 0-based layer
    // Quartiles of the selected 1-based layer indices (Tukey hinges).
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
};

// Summarizes final-epoch selection histograms; throws ValidationError when
// every histogram is empty.
std::vector<BestLayerRow> best_layer_report(
    const std::map<std::string, std::vector<std::size_t>>& histograms);

std::string best_layer_csv(const std::vector<BestLayerRow>& rows);

// "{dataset}_{fold}_{seed}_{kind}.csv"
std::string report_filename(const std::string& dataset, const std::string& fold,
                            std::uint64_t seed, const std::string& kind);

void write_text_file(const std::filesystem::path& path, const std::string& content);

}  // namespace lcm
