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
#include "lcm/schema.hpp"
#include "lcm/tensor.hpp"

namespace lcm {

using LabelRow = std::vector<std::optional<double>>;

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 128;
    std::size_t max_epochs = 200;
    // Epochs [0, momentum_epochs) average predictions across layers; the rest
    // supervise the best-scoring layer per task per batch.
    std::size_t momentum_epochs = 5;
    std::size_t patience = 50;
    std::uint64_t seed = 0;
    // Ablation: average per-layer losses instead of averaging logits first.
    bool average_losses_not_logits = false;
    // Baseline: supervise only the final layer in both stages.
    bool supervise_last_only = false;
    // When set, only the token table and readout head receive updates.
    bool freeze_backbone = false;

    void validate() const;
    nlohmann::json to_json() const;
};

struct TaskLossTerm {
    std::string task;
    TaskKind kind = TaskKind::kCategorical;
    double value = 0.0;
    std::size_t sample_count = 0;
};

struct TaskLossBreakdown {
    Tensor total;  // scalar, connected to the graph
    std::vector<TaskLossTerm> terms;
};

struct LayerSelectionRecord {
    std::size_t epoch = 0;
    std::size_t batch = 0;
    std::string task;
    std::size_t layer = 0;       // 0-based readout layer index
    std::vector<double> scores;  // negative task loss per candidate layer
};

struct StageResult {
    Tensor total;
    std::vector<TaskLossTerm> terms;
    std::vector<LayerSelectionRecord> selections;
};

// Batch loss over per-task prediction slices; `task_preds[s][t]` is sample
// s's logits (categorical) or scalar (continuous) for task t. Tasks with no
// labeled sample are excluded; a batch labeled for no task at all throws
// ValidationError. The total is the plain sum of the included task means.
TaskLossBreakdown multitask_loss(const PhenotypeSchema& schema,
                                 const std::vector<std::vector<Tensor>>& task_preds,
                                 const std::vector<const LabelRow*>& labels);

// Momentum stage: element-wise average of the per-layer readouts feeds the
// multitask loss (or, with average_losses, the mean of per-layer losses).
// `readouts[s][l]` is sample s's full layer-l readout vector.
StageResult stage1_loss(const PhenotypeSchema& schema,
                        const std::vector<std::vector<Tensor>>& readouts,
                        const std::vector<const LabelRow*>& labels, bool average_losses = false);

// Adaptive stage: per task, each layer's batch loss is scored (score = -loss)
// and only the best layer's loss enters the total; ties go to the lowest
// index. One selection record per included task.
StageResult stage2_loss(const PhenotypeSchema& schema,
                        const std::vector<std::vector<Tensor>>& readouts,
                        const std::vector<const LabelRow*>& labels, std::size_t epoch = 0,
                        std::size_t batch = 0);

struct EpochRecord {
    std::size_t epoch = 0;
    std::string stage;  // "momentum" or "adaptive"
    double train_loss = 0.0;
    std::map<std::string, double> task_losses;
    std::map<std::string, double> val_scores;
    double val_score = 0.0;
    std::map<std::string, std::vector<std::size_t>> selections;  // counts per layer

    nlohmann::json to_json() const;
};

struct TrainResult {
    Checkpoint checkpoint;  // best-by-validation weights, final-epoch histograms
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_score = 0.0;
    std::size_t epochs_run = 0;
};

// Mean/std per continuous task over the non-missing training labels; a
// degenerate spread falls back to std 1.
std::map<std::string, TargetScaler> fit_target_scalers(const PhenotypeSchema& schema,
                                                       const SampleSet& data);

// Full loop: shuffled batches, Adam after every batch, stage switch at
// momentum_epochs, early stopping on the mean validation score with the
// configured patience. Keeps the best-by-validation snapshot and the final
// epoch's per-task layer-selection histograms.
TrainResult train(LcmModel& model, const SampleSet& train_data, const SampleSet& val_data,
                  const TrainConfig& cfg);

struct TaskPrediction {
    std::string task;
    TaskKind kind = TaskKind::kCategorical;
    std::size_t layer = 0;  // 0-based layer the prediction was read from
    std::size_t class_index = 0;
    std::vector<double> probabilities;
    double value = 0.0;  // continuous tasks, raw scale
};

// Lowest index attaining the maximal count.
std::size_t histogram_mode(const std::vector<std::size_t>& counts);

// Per task, reads the layer chosen by the checkpoint's selection-histogram
// mode (missing histogram: last layer, with a warning) and returns that
// layer's prediction. Continuous outputs are mapped back through the task's
// target scaler.
std::vector<TaskPrediction> predict_test(const LcmModel& model, const Checkpoint& ckpt,
                                         const Tensor& fc);

void write_metrics_history(const std::vector<EpochRecord>& history,
                           const std::filesystem::path& path);

}  // namespace lcm
