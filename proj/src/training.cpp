#include "lcm/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "lcm/adam.hpp"
#include "lcm/errors.hpp"
#include "lcm/log.hpp"
#include "lcm/rng.hpp"

namespace lcm {

namespace {

struct TaskBatchLoss {
    Tensor loss;  // batch mean for one task
    double value = 0.0;
    std::size_t count = 0;
};

std::size_t class_index_of(double label, std::size_t class_count, const std::string& task) {
    const double rounded = std::nearbyint(label);
    if (rounded < 0.0 || rounded >= static_cast<double>(class_count) ||
        std::abs(label - rounded) > 1e-9) {
        throw ValidationError("label " + std::to_string(label) + " is not a valid class for task '" +
                              task + "'");
    }
    return static_cast<std::size_t>(rounded);
}

// Mean loss for one task over the labeled samples of a batch; nullopt when
// no sample carries a label.
std::optional<TaskBatchLoss> task_batch_loss(const TaskSpec& task,
                                             const std::vector<Tensor>& preds,
                                             const std::vector<const LabelRow*>& labels,
                                             std::size_t task_index) {
    Tensor acc;
    std::size_t count = 0;
    for (std::size_t s = 0; s < preds.size(); ++s) {
        const auto& maybe = (*labels[s])[task_index];
        if (!maybe.has_value()) continue;
        Tensor term;
        if (task.kind == TaskKind::kCategorical) {
            term = cross_entropy_with_logits(preds[s],
                                             class_index_of(*maybe, task.class_count, task.name));
        } else {
            term = mse(preds[s], Tensor::from_values({1}, {*maybe}));
        }
        acc = count == 0 ? term : add(acc, term);
        ++count;
    }
    if (count == 0) return std::nullopt;
    Tensor loss = count == 1 ? acc : scale(acc, 1.0 / static_cast<double>(count));
    return TaskBatchLoss{loss, loss.value(), count};
}

std::vector<std::vector<Tensor>> slice_all(const PhenotypeSchema& schema,
                                           const std::vector<Tensor>& readouts) {
    std::vector<std::vector<Tensor>> out;
    out.reserve(readouts.size());
    for (const auto& r : readouts) out.push_back(LcmModel::slice_tasks(r, schema));
    return out;
}

void check_batch_shapes(const std::vector<std::vector<Tensor>>& readouts,
                        const std::vector<const LabelRow*>& labels, std::size_t task_count) {
    if (readouts.empty()) throw ValidationError("batch is empty");
    if (readouts.size() != labels.size()) {
        throw ValidationError("batch has " + std::to_string(readouts.size()) + " readouts but " +
                              std::to_string(labels.size()) + " label rows");
    }
    const std::size_t layers = readouts.front().size();
    if (layers == 0) throw ValidationError("batch carries no readout layers");
    for (const auto& row : readouts) {
        if (row.size() != layers) throw ValidationError("ragged per-sample readout list");
    }
    for (const auto* row : labels) {
        if (row->size() != task_count) {
            throw ValidationError("label row length does not match the schema");
        }
    }
}

std::vector<LabelRow> transform_labels(const PhenotypeSchema& schema, const SampleSet& data,
                                       const std::map<std::string, TargetScaler>& scalers) {
    std::vector<LabelRow> out;
    out.reserve(data.samples.size());
    for (const auto& sample : data.samples) {
        LabelRow row = sample.labels;
        for (std::size_t t = 0; t < schema.tasks().size(); ++t) {
            const auto& task = schema.tasks()[t];
            if (task.kind != TaskKind::kContinuous || !row[t].has_value()) continue;
            const auto it = scalers.find(task.name);
            if (it == scalers.end()) continue;
            row[t] = (*row[t] - it->second.mean) / it->second.std_dev;
        }
        out.push_back(std::move(row));
    }
    return out;
}

std::size_t argmax_score(const std::vector<double>& scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = i;
    }
    return best;
}

std::size_t argmax_value(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

// Forward passes over a sample set without recording, returning per-sample
// per-layer readout values.
std::vector<std::vector<std::vector<double>>> eval_readouts(const LcmModel& model,
                                                            const SampleSet& data) {
    NoGradScope no_grad;
    std::vector<std::vector<std::vector<double>>> out;
    out.reserve(data.samples.size());
    for (const auto& sample : data.samples) {
        auto result = model.forward(sample.fc);
        std::vector<std::vector<double>> layers;
        layers.reserve(result.readouts.size());
        for (const auto& r : result.readouts) {
            layers.emplace_back(r.data().begin(), r.data().end());
        }
        out.push_back(std::move(layers));
    }
    return out;
}

// Validation score per task: accuracy for categorical tasks, negative MSE on
// the scaled targets for continuous ones. `layer_of` maps a task index to
// the readout layer used; when `averaged` is set, per-layer readouts are
// element-wise averaged instead.
std::map<std::string, double> validation_scores(
    const PhenotypeSchema& schema, const std::vector<std::vector<std::vector<double>>>& readouts,
    const std::vector<LabelRow>& labels, bool averaged,
    const std::vector<std::size_t>& layer_of) {
    const auto& offsets = schema.offsets();
    std::map<std::string, double> scores;
    for (std::size_t t = 0; t < schema.tasks().size(); ++t) {
        const auto& task = schema.tasks()[t];
        std::size_t labeled = 0, correct = 0;
        double sq_err = 0.0;
        for (std::size_t s = 0; s < readouts.size(); ++s) {
            const auto& maybe = labels[s][t];
            if (!maybe.has_value()) continue;
            ++labeled;
            const std::size_t begin = offsets[t], end = offsets[t + 1];
            std::vector<double> pred(end - begin, 0.0);
            if (averaged) {
                for (const auto& layer : readouts[s]) {
                    for (std::size_t i = begin; i < end; ++i) pred[i - begin] += layer[i];
                }
                for (auto& v : pred) v /= static_cast<double>(readouts[s].size());
            } else {
                const auto& layer = readouts[s][layer_of[t]];
                for (std::size_t i = begin; i < end; ++i) pred[i - begin] = layer[i];
            }
            if (task.kind == TaskKind::kCategorical) {
                const std::size_t predicted = argmax_value(pred);
                if (predicted == class_index_of(*maybe, task.class_count, task.name)) ++correct;
            } else {
                const double d = pred[0] - *maybe;
                sq_err += d * d;
            }
        }
        if (labeled == 0) continue;
        if (task.kind == TaskKind::kCategorical) {
            scores[task.name] = static_cast<double>(correct) / static_cast<double>(labeled);
        } else {
            scores[task.name] = -sq_err / static_cast<double>(labeled);
        }
    }
    return scores;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (momentum_epochs > max_epochs) {
        throw ConfigError("momentum_epochs must not exceed max_epochs");
    }
}

nlohmann::json TrainConfig::to_json() const {
    return {{"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"max_epochs", max_epochs},
            {"momentum_epochs", momentum_epochs},
            {"patience", patience},
            {"seed", seed},
            {"average_losses_not_logits", average_losses_not_logits},
            {"supervise_last_only", supervise_last_only},
            {"freeze_backbone", freeze_backbone}};
}

TaskLossBreakdown multitask_loss(const PhenotypeSchema& schema,
                                 const std::vector<std::vector<Tensor>>& task_preds,
                                 const std::vector<const LabelRow*>& labels) {
    if (task_preds.empty()) throw ValidationError("batch is empty");
    if (task_preds.size() != labels.size()) {
        throw ValidationError("prediction and label counts differ");
    }
    const auto& tasks = schema.tasks();
    TaskLossBreakdown out;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        std::vector<Tensor> column;
        column.reserve(task_preds.size());
        for (const auto& row : task_preds) {
            if (row.size() != tasks.size()) {
                throw ValidationError("prediction row does not cover every task");
            }
            column.push_back(row[t]);
        }
        auto term = task_batch_loss(tasks[t], column, labels, t);
        if (!term) continue;
        out.terms.push_back({tasks[t].name, tasks[t].kind, term->value, term->count});
        out.total = out.total.defined() ? add(out.total, term->loss) : term->loss;
    }
    if (out.terms.empty()) {
        throw ValidationError("batch has no labeled samples for any task");
    }
    return out;
}

StageResult stage1_loss(const PhenotypeSchema& schema,
                        const std::vector<std::vector<Tensor>>& readouts,
                        const std::vector<const LabelRow*>& labels, bool average_losses) {
    check_batch_shapes(readouts, labels, schema.tasks().size());
    const std::size_t layers = readouts.front().size();
    StageResult out;

    if (!average_losses) {
        std::vector<std::vector<Tensor>> task_preds;
        task_preds.reserve(readouts.size());
        for (const auto& row : readouts) {
            Tensor acc = row[0];
            for (std::size_t l = 1; l < layers; ++l) acc = add(acc, row[l]);
            if (layers > 1) acc = scale(acc, 1.0 / static_cast<double>(layers));
            task_preds.push_back(LcmModel::slice_tasks(acc, schema));
        }
        auto breakdown = multitask_loss(schema, task_preds, labels);
        out.total = breakdown.total;
        out.terms = std::move(breakdown.terms);
        return out;
    }

    // Ablation arm: average the per-layer losses instead.
    std::map<std::string, TaskLossTerm> merged;
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<std::vector<Tensor>> task_preds;
        task_preds.reserve(readouts.size());
        for (const auto& row : readouts) {
            task_preds.push_back(LcmModel::slice_tasks(row[l], schema));
        }
        auto breakdown = multitask_loss(schema, task_preds, labels);
        out.total = out.total.defined() ? add(out.total, breakdown.total) : breakdown.total;
        for (const auto& term : breakdown.terms) {
            auto [it, fresh] = merged.emplace(term.task, term);
            if (!fresh) it->second.value += term.value;
        }
    }
    out.total = scale(out.total, 1.0 / static_cast<double>(layers));
    for (auto& [name, term] : merged) {
        term.value /= static_cast<double>(layers);
        out.terms.push_back(term);
    }
    return out;
}

StageResult stage2_loss(const PhenotypeSchema& schema,
                        const std::vector<std::vector<Tensor>>& readouts,
                        const std::vector<const LabelRow*>& labels, std::size_t epoch,
                        std::size_t batch) {
    check_batch_shapes(readouts, labels, schema.tasks().size());
    const std::size_t layers = readouts.front().size();
    const auto& tasks = schema.tasks();

    // sliced[s][l][t]
    std::vector<std::vector<std::vector<Tensor>>> sliced;
    sliced.reserve(readouts.size());
    for (const auto& row : readouts) sliced.push_back(slice_all(schema, row));

    StageResult out;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        std::vector<Tensor> layer_losses;
        std::vector<double> scores;
        std::size_t count = 0;
        bool labeled = true;
        for (std::size_t l = 0; l < layers; ++l) {
            std::vector<Tensor> column;
            column.reserve(readouts.size());
            for (std::size_t s = 0; s < readouts.size(); ++s) column.push_back(sliced[s][l][t]);
            auto term = task_batch_loss(tasks[t], column, labels, t);
            if (!term) {
                labeled = false;
                break;
            }
            layer_losses.push_back(term->loss);
            scores.push_back(-term->value);
            count = term->count;
        }
        if (!labeled) continue;

        const std::size_t selected = argmax_score(scores);
        out.total =
            out.total.defined() ? add(out.total, layer_losses[selected]) : layer_losses[selected];
        out.terms.push_back({tasks[t].name, tasks[t].kind, -scores[selected], count});
        out.selections.push_back({epoch, batch, tasks[t].name, selected, scores});
    }
    if (out.terms.empty()) {
        throw ValidationError("batch has no labeled samples for any task");
    }
    return out;
}

std::map<std::string, TargetScaler> fit_target_scalers(const PhenotypeSchema& schema,
                                                       const SampleSet& data) {
    std::map<std::string, TargetScaler> out;
    for (std::size_t t = 0; t < schema.tasks().size(); ++t) {
        const auto& task = schema.tasks()[t];
        if (task.kind != TaskKind::kContinuous) continue;
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& sample : data.samples) {
            if (!sample.labels[t].has_value()) continue;
            sum += *sample.labels[t];
            ++n;
        }
        TargetScaler scaler;
        if (n > 0) {
            scaler.mean = sum / static_cast<double>(n);
            double sq = 0.0;
            for (const auto& sample : data.samples) {
                if (!sample.labels[t].has_value()) continue;
                const double d = *sample.labels[t] - scaler.mean;
                sq += d * d;
            }
            scaler.std_dev = std::sqrt(sq / static_cast<double>(n));
            if (scaler.std_dev < 1e-12) scaler.std_dev = 1.0;
        }
        out[task.name] = scaler;
    }
    return out;
}

nlohmann::json EpochRecord::to_json() const {
    nlohmann::json j;
    j["epoch"] = epoch;
    j["stage"] = stage;
    j["train_loss"] = train_loss;
    j["task_losses"] = task_losses;
    j["val_scores"] = val_scores;
    j["val_score"] = val_score;
    j["selections"] = selections;
    return j;
}

std::size_t histogram_mode(const std::vector<std::size_t>& counts) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < counts.size(); ++i) {
        if (counts[i] > counts[best]) best = i;
    }
    return best;
}

TrainResult train(LcmModel& model, const SampleSet& train_data, const SampleSet& val_data,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (!(model.schema() == train_data.schema) || !(model.schema() == val_data.schema)) {
        throw ValidationError("model and dataset schemas do not match");
    }
    if (train_data.samples.empty()) throw ValidationError("training fold is empty");
    if (val_data.samples.empty()) throw ValidationError("validation fold is empty");
    if (train_data.region_count != model.config().regions) {
        throw ValidationError("dataset region count does not match the model");
    }

    const auto& schema = model.schema();
    const std::size_t depth = model.config().layers;
    const std::size_t task_count = schema.tasks().size();

    auto scalers = fit_target_scalers(schema, train_data);
    auto train_labels = transform_labels(schema, train_data, scalers);
    auto val_labels = transform_labels(schema, val_data, scalers);

    bool any_val_label = false;
    for (const auto& row : val_labels) {
        for (const auto& v : row) any_val_label = any_val_label || v.has_value();
    }
    if (!any_val_label) throw ValidationError("validation fold has no labeled samples");

    std::vector<Tensor> trainable;
    for (auto& p : model.parameters()) {
        if (cfg.freeze_backbone && p.name != "tokens" && p.name.rfind("readout", 0) != 0) {
            continue;
        }
        trainable.push_back(p.tensor);
    }

    Adam optimizer(cfg.learning_rate);
    Rng rng(cfg.seed, "train");

    TrainResult result;
    Checkpoint best_snapshot;
    AdamState best_opt_state;
    double best_score = -std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    std::size_t since_improvement = 0;
    std::map<std::string, std::vector<std::size_t>> final_histogram;

    std::vector<std::size_t> order(train_data.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const bool momentum = epoch < cfg.momentum_epochs;
        rng.stream("epoch", epoch).shuffle(order);

        EpochRecord record;
        record.epoch = epoch;
        record.stage = momentum ? "momentum" : "adaptive";
        std::map<std::string, double> task_loss_sums;
        std::map<std::string, std::size_t> task_loss_counts;
        std::map<std::string, std::vector<std::size_t>> selection_counts;
        double loss_sum = 0.0;
        std::size_t batches = 0;

        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            std::vector<std::vector<Tensor>> readouts;
            std::vector<const LabelRow*> labels;
            readouts.reserve(end - begin);
            labels.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                const std::size_t s = order[i];
                auto forwarded = model.forward(train_data.samples[s].fc);
                if (cfg.supervise_last_only) {
                    readouts.push_back({forwarded.readouts.back()});
                } else {
                    readouts.push_back(std::move(forwarded.readouts));
                }
                labels.push_back(&train_labels[s]);
            }

            StageResult step = momentum
                                   ? stage1_loss(schema, readouts, labels,
                                                 cfg.average_losses_not_logits)
                                   : stage2_loss(schema, readouts, labels, epoch, batches);
            backward(step.total);
            optimizer.step(trainable);
            Tape::active().clear();

            loss_sum += step.total.value();
            ++batches;
            for (const auto& term : step.terms) {
                task_loss_sums[term.task] += term.value;
                task_loss_counts[term.task] += 1;
            }
            for (auto& sel : step.selections) {
                // With last-only supervision the single candidate is the
                // final layer.
                const std::size_t layer = cfg.supervise_last_only ? depth - 1 : sel.layer;
                auto [it, fresh] =
                    selection_counts.emplace(sel.task, std::vector<std::size_t>(depth, 0));
                (void)fresh;
                it->second[layer] += 1;
            }
        }

        record.train_loss = loss_sum / static_cast<double>(batches);
        for (const auto& [task, sum] : task_loss_sums) {
            record.task_losses[task] = sum / static_cast<double>(task_loss_counts[task]);
        }
        record.selections = selection_counts;

        // Validation: stage 1 scores the layer-averaged prediction; stage 2
        // scores each task at its current-epoch modal layer.
        std::vector<std::size_t> layer_of(task_count, depth - 1);
        if (!momentum) {
            for (std::size_t t = 0; t < task_count; ++t) {
                auto it = selection_counts.find(schema.tasks()[t].name);
                if (it != selection_counts.end()) layer_of[t] = histogram_mode(it->second);
            }
        }
        auto val_readouts = eval_readouts(model, val_data);
        record.val_scores = validation_scores(schema, val_readouts, val_labels, momentum, layer_of);
        double score_sum = 0.0;
        for (const auto& [task, score] : record.val_scores) score_sum += score;
        record.val_score =
            record.val_scores.empty()
                ? 0.0
                : score_sum / static_cast<double>(record.val_scores.size());

        result.history.push_back(record);
        final_histogram = selection_counts;

        if (record.val_score > best_score) {
            best_score = record.val_score;
            best_epoch = epoch;
            since_improvement = 0;
            best_snapshot = snapshot_model(model);
            best_opt_state = optimizer.state();
        } else {
            ++since_improvement;
            if (since_improvement >= cfg.patience) break;
        }
    }

    result.epochs_run = result.history.size();
    if (result.history.empty()) {
        // max_epochs == 0: the untouched model is the result.
        best_snapshot = snapshot_model(model);
        best_opt_state = optimizer.state();
        best_score = 0.0;
    }
    result.best_epoch = best_epoch;
    result.best_score = best_score;

    result.checkpoint = std::move(best_snapshot);
    result.checkpoint.optimizer = std::move(best_opt_state);
    result.checkpoint.selection_histograms = final_histogram;
    result.checkpoint.target_scalers = scalers;

    // Leave the caller's model at the best-by-validation weights.
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& rec = result.checkpoint.tensors[i];
        auto dst = params[i].tensor.raw_data();
        for (std::size_t v = 0; v < rec.values.size(); ++v) dst[v] = rec.values[v];
    }
    return result;
}

std::vector<TaskPrediction> predict_test(const LcmModel& model, const Checkpoint& ckpt,
                                         const Tensor& fc) {
    NoGradScope no_grad;
    auto result = model.forward(fc);
    const auto& schema = model.schema();
    const auto& offsets = schema.offsets();
    const std::size_t depth = result.readouts.size();

    std::vector<TaskPrediction> out;
    for (std::size_t t = 0; t < schema.tasks().size(); ++t) {
        const auto& task = schema.tasks()[t];
        TaskPrediction pred;
        pred.task = task.name;
        pred.kind = task.kind;

        auto it = ckpt.selection_histograms.find(task.name);
        if (it == ckpt.selection_histograms.end() || it->second.empty()) {
            log_warn("no selection histogram for task '" + task.name + "'; using the last layer");
            pred.layer = depth - 1;
        } else {
            pred.layer = std::min(histogram_mode(it->second), depth - 1);
        }

        const auto& layer = result.readouts[pred.layer];
        const std::size_t begin = offsets[t], end = offsets[t + 1];
        if (task.kind == TaskKind::kCategorical) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = begin; i < end; ++i) mx = std::max(mx, layer.data()[i]);
            double denom = 0.0;
            pred.probabilities.resize(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                pred.probabilities[i - begin] = std::exp(layer.data()[i] - mx);
                denom += pred.probabilities[i - begin];
            }
            for (auto& p : pred.probabilities) p /= denom;
            pred.class_index = argmax_value(pred.probabilities);
        } else {
            double value = layer.data()[begin];
            const auto scaler = ckpt.target_scalers.find(task.name);
            if (scaler != ckpt.target_scalers.end()) {
                value = value * scaler->second.std_dev + scaler->second.mean;
            }
            pred.value = value;
        }
        out.push_back(std::move(pred));
    }
    return out;
}

void write_metrics_history(const std::vector<EpochRecord>& history,
                           const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    for (const auto& record : history) out << record.to_json().dump() << '\n';
    if (!out) throw IoError("failed writing metrics history to '" + path.string() + "'");
}

}  // namespace lcm
