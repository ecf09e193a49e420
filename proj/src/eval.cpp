#include "lcm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "lcm/adam.hpp"
#include "lcm/errors.hpp"
#include "lcm/log.hpp"
#include "lcm/rng.hpp"

namespace lcm {

namespace {

std::string fmt(double v) {
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "%.17g", v);
    return buffer;
}

void check_pairs(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels) {
    if (preds.empty()) throw ValidationError("metric input is empty");
    if (preds.size() != labels.size()) {
        throw ValidationError("prediction and label counts differ");
    }
}

// Median of values[begin, end) (sorted); even spans average the middle pair.
double median_of(const std::vector<double>& values, std::size_t begin, std::size_t end) {
    const std::size_t n = end - begin;
    const std::size_t mid = begin + n / 2;
    if (n % 2 == 1) return values[mid];
    return (values[mid - 1] + values[mid]) / 2.0;
}

}  // namespace

double accuracy(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels) {
    check_pairs(preds, labels);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double macro_f1(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                std::size_t class_count) {
    check_pairs(preds, labels);
    double f1_sum = 0.0;
    std::size_t included = 0;
    for (std::size_t c = 0; c < class_count; ++c) {
        std::size_t tp = 0, fp = 0, fn = 0, gt = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const bool pred_c = preds[i] == c, gt_c = labels[i] == c;
            if (gt_c) ++gt;
            if (pred_c && gt_c) ++tp;
            if (pred_c && !gt_c) ++fp;
            if (!pred_c && gt_c) ++fn;
        }
        if (gt == 0) continue;  // class absent from ground truth
        ++included;
        if (tp == 0) continue;  // precision or recall is zero
        const double precision = double(tp) / double(tp + fp);
        const double recall = double(tp) / double(tp + fn);
        f1_sum += 2.0 * precision * recall / (precision + recall);
    }
    if (included == 0) throw ValidationError("no ground-truth class present");
    return f1_sum / static_cast<double>(included);
}

std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<std::size_t>& preds,
                                                       const std::vector<std::size_t>& labels,
                                                       std::size_t class_count) {
    check_pairs(preds, labels);
    std::vector<std::vector<std::size_t>> counts(class_count,
                                                 std::vector<std::size_t>(class_count, 0));
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (labels[i] >= class_count || preds[i] >= class_count) {
            throw ValidationError("class index out of range for the confusion matrix");
        }
        counts[labels[i]][preds[i]] += 1;
    }
    return counts;
}

EvalReport evaluate(const LcmModel& model, const Checkpoint& ckpt, const SampleSet& test) {
    if (test.samples.empty()) throw ValidationError("test set is empty");
    const auto& schema = model.schema();
    const std::size_t task_count = schema.tasks().size();

    std::vector<std::vector<std::size_t>> cat_preds(task_count), cat_labels(task_count);
    std::vector<double> sq_err(task_count, 0.0);
    std::vector<std::size_t> cont_count(task_count, 0);

    for (const auto& sample : test.samples) {
        auto preds = predict_test(model, ckpt, sample.fc);
        for (std::size_t t = 0; t < task_count; ++t) {
            const auto& label = sample.labels[t];
            if (!label.has_value()) continue;
            if (schema.tasks()[t].kind == TaskKind::kCategorical) {
                cat_preds[t].push_back(preds[t].class_index);
                cat_labels[t].push_back(static_cast<std::size_t>(std::nearbyint(*label)));
            } else {
                const double d = preds[t].value - *label;
                sq_err[t] += d * d;
                cont_count[t] += 1;
            }
        }
    }

    EvalReport report;
    for (std::size_t t = 0; t < task_count; ++t) {
        const auto& task = schema.tasks()[t];
        TaskEval entry;
        entry.task = task.name;
        entry.kind = task.kind;
        if (task.kind == TaskKind::kCategorical) {
            if (cat_preds[t].empty()) continue;
            entry.sample_count = cat_preds[t].size();
            entry.accuracy = accuracy(cat_preds[t], cat_labels[t]);
            entry.macro_f1 = macro_f1(cat_preds[t], cat_labels[t], task.class_count);
            entry.confusion = confusion_matrix(cat_preds[t], cat_labels[t], task.class_count);
        } else {
            if (cont_count[t] == 0) continue;
            entry.sample_count = cont_count[t];
            entry.mse = sq_err[t] / static_cast<double>(cont_count[t]);
        }
        report.tasks.push_back(std::move(entry));
    }
    if (report.tasks.empty()) throw ValidationError("test set has no labeled samples");
    return report;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["dataset"] = dataset;
    j["fold"] = fold;
    j["seed"] = seed;
    j["checkpoint"] = checkpoint_ref;
    j["tasks"] = nlohmann::json::array();
    for (const auto& t : tasks) {
        nlohmann::json entry;
        entry["task"] = t.task;
        entry["kind"] = t.kind == TaskKind::kCategorical ? "categorical" : "continuous";
        entry["samples"] = t.sample_count;
        if (t.kind == TaskKind::kCategorical) {
            entry["accuracy"] = t.accuracy;
            entry["macro_f1"] = t.macro_f1;
            entry["confusion"] = t.confusion;
        } else {
            entry["mse"] = t.mse;
        }
        j["tasks"].push_back(std::move(entry));
    }
    return j;
}

std::string EvalReport::to_csv() const {
    std::string out = "task,kind,samples,accuracy,macro_f1,mse\n";
    for (const auto& t : tasks) {
        out += t.task;
        out += t.kind == TaskKind::kCategorical ? ",categorical," : ",continuous,";
        out += std::to_string(t.sample_count);
        if (t.kind == TaskKind::kCategorical) {
            out += "," + fmt(t.accuracy) + "," + fmt(t.macro_f1) + ",";
        } else {
            out += ",,," + fmt(t.mse);
        }
        out += '\n';
    }
    return out;
}

std::vector<AttentionSummary> aggregate_attention(const LcmModel& model, const Checkpoint& ckpt,
                                                  const SampleSet& test,
                                                  const std::string& group_task,
                                                  bool group_by_predicted) {
    if (test.samples.empty()) throw ValidationError("test set is empty");
    const auto& schema = model.schema();
    const std::size_t t = schema.task_index(group_task);
    const auto& task = schema.tasks()[t];
    const std::size_t begin = schema.offsets()[t], end = schema.offsets()[t + 1];
    const std::size_t regions = model.config().regions;

    std::size_t layer = model.config().layers - 1;
    auto it = ckpt.selection_histograms.find(group_task);
    if (it == ckpt.selection_histograms.end() || it->second.empty()) {
        log_warn("no selection histogram for task '" + group_task + "'; using the last layer");
    } else {
        layer = std::min(histogram_mode(it->second), layer);
    }

    std::map<double, std::pair<std::vector<double>, std::size_t>> groups;
    for (const auto& sample : test.samples) {
        double key = 0.0;
        if (group_by_predicted) {
            auto preds = predict_test(model, ckpt, sample.fc);
            key = task.kind == TaskKind::kCategorical ? double(preds[t].class_index)
                                                      : preds[t].value;
        } else {
            if (!sample.labels[t].has_value()) continue;
            key = *sample.labels[t];
        }
        auto weights = model.export_cross_attention(sample.fc, layer + 1, true);
        const Tensor& full = weights[0];
        auto& [sum, count] = groups[key];
        sum.resize((end - begin) * regions, 0.0);
        for (std::size_t row = begin; row < end; ++row) {
            for (std::size_t r = 0; r < regions; ++r) {
                sum[(row - begin) * regions + r] += full.at(row, r);
            }
        }
        count += 1;
    }

    if (task.kind == TaskKind::kCategorical && !group_by_predicted) {
        for (std::size_t c = 0; c < task.class_count; ++c) {
            if (groups.find(double(c)) == groups.end()) {
                log_warn("task '" + group_task + "' class " + std::to_string(c) +
                         " has no test samples; group skipped");
            }
        }
    }
    if (groups.empty()) throw ValidationError("no labeled samples for task '" + group_task + "'");

    std::vector<AttentionSummary> out;
    for (auto& [key, entry] : groups) {
        auto& [sum, count] = entry;
        for (auto& v : sum) v /= static_cast<double>(count);
        AttentionSummary summary;
        summary.task = group_task;
        summary.group_value = key;
        summary.sample_count = count;
        summary.mean_weights = Tensor::from_values({end - begin, regions}, std::move(sum));
        out.push_back(std::move(summary));
    }
    return out;
}

std::string attention_summary_csv(const AttentionSummary& summary) {
    const std::size_t regions = summary.mean_weights.cols();
    std::string out = "token";
    for (std::size_t r = 0; r < regions; ++r) out += ",region_" + std::to_string(r);
    out += '\n';
    for (std::size_t row = 0; row < summary.mean_weights.rows(); ++row) {
        out += "token_" + std::to_string(row);
        for (std::size_t r = 0; r < regions; ++r) {
            out += "," + fmt(summary.mean_weights.at(row, r));
        }
        out += '\n';
    }
    return out;
}

namespace {

// Residual feed-forward baseline on the flattened upper-triangle FC. Same
// batch schedule as the transformer arms; records the final epoch's mean
// training loss.
double mlp_final_loss(const ScalingStudyConfig& cfg, const SampleSet& train_data,
                      std::uint64_t seed, std::size_t* parameter_count) {
    const std::size_t n = train_data.region_count;
    const std::size_t features = n * (n - 1) / 2;
    const std::size_t dim = cfg.base.dim;
    const auto& schema = cfg.base.schema;
    const std::size_t out_dim = schema.token_count();

    Rng init(seed, "mlp/init");
    auto weight = [&](std::size_t rows, std::size_t cols) {
        return Tensor::from_values({rows, cols}, init.normal_vec(rows * cols, 0.0, 0.02), true);
    };
    auto bias = [&](std::size_t len) { return Tensor::zeros({len}, true); };

    Tensor w_in = weight(features, dim), b_in = bias(dim);
    std::vector<Tensor> w_mid, b_mid;
    for (std::size_t l = 0; l < cfg.mlp_layers; ++l) {
        w_mid.push_back(weight(dim, dim));
        b_mid.push_back(bias(dim));
    }
    Tensor w_out = weight(dim, out_dim), b_out = bias(out_dim);

    std::vector<Tensor> params{w_in, b_in, w_out, b_out};
    for (std::size_t l = 0; l < cfg.mlp_layers; ++l) {
        params.push_back(w_mid[l]);
        params.push_back(b_mid[l]);
    }
    if (parameter_count != nullptr) {
        *parameter_count = 0;
        for (const auto& p : params) *parameter_count += p.size();
    }

    std::vector<Tensor> inputs;
    inputs.reserve(train_data.samples.size());
    for (const auto& sample : train_data.samples) {
        std::vector<double> flat;
        flat.reserve(features);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) flat.push_back(sample.fc.at(i, j));
        }
        inputs.push_back(Tensor::from_values({1, features}, std::move(flat)));
    }

    auto scalers = fit_target_scalers(schema, train_data);
    std::vector<LabelRow> labels;
    for (const auto& sample : train_data.samples) {
        LabelRow row = sample.labels;
        for (std::size_t t = 0; t < schema.tasks().size(); ++t) {
            if (schema.tasks()[t].kind != TaskKind::kContinuous || !row[t].has_value()) continue;
            const auto& s = scalers.at(schema.tasks()[t].name);
            row[t] = (*row[t] - s.mean) / s.std_dev;
        }
        labels.push_back(std::move(row));
    }

    Adam optimizer(cfg.train.learning_rate);
    Rng rng(seed, "mlp/train");
    std::vector<std::size_t> order(train_data.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    double final_loss = 0.0;
    for (std::size_t epoch = 0; epoch < cfg.train.max_epochs; ++epoch) {
        rng.stream("epoch", epoch).shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.train.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.train.batch_size);
            std::vector<std::vector<Tensor>> readouts;
            std::vector<const LabelRow*> batch_labels;
            for (std::size_t i = begin; i < end; ++i) {
                const std::size_t s = order[i];
                Tensor h = relu(add_row_broadcast(matmul(inputs[s], w_in), b_in));
                for (std::size_t l = 0; l < cfg.mlp_layers; ++l) {
                    h = add(h, relu(add_row_broadcast(matmul(h, w_mid[l]), b_mid[l])));
                }
                Tensor logits = reshape(add_row_broadcast(matmul(h, w_out), b_out), {out_dim});
                readouts.push_back({logits});
                batch_labels.push_back(&labels[s]);
            }
            auto step = stage1_loss(schema, readouts, batch_labels);
            backward(step.total);
            optimizer.step(params);
            Tape::active().clear();
            loss_sum += step.total.value();
            ++batches;
        }
        final_loss = loss_sum / static_cast<double>(batches);
    }
    return final_loss;
}

}  // namespace

std::vector<ScalingRow> scaling_study(const ScalingStudyConfig& cfg, const SampleSet& train_data,
                                      const SampleSet& val_data) {
    if (cfg.depths.empty()) throw ConfigError("scaling study needs at least one depth");
    if (cfg.seeds.empty()) throw ConfigError("scaling study needs at least one seed");

    std::vector<ScalingRow> rows;
    for (const std::size_t depth : cfg.depths) {
        ScalingRow row;
        row.arm = "lcm";
        row.layers = depth;
        ModelConfig mc = cfg.base;
        mc.layers = depth;
        row.parameter_count = LcmModel::expected_parameter_count(mc);
        for (const std::uint64_t seed : cfg.seeds) {
            LcmModel model(mc, seed);
            TrainConfig tc = cfg.train;
            tc.seed = seed;
            auto result = train(model, train_data, val_data, tc);
            row.per_seed_losses.push_back(result.history.back().train_loss);
        }
        std::vector<double> sorted = row.per_seed_losses;
        std::sort(sorted.begin(), sorted.end());
        row.median_final_loss = median_of(sorted, 0, sorted.size());
        rows.push_back(std::move(row));
    }

    if (cfg.include_mlp_baseline) {
        ScalingRow row;
        row.arm = "mlp";
        row.layers = cfg.mlp_layers;
        for (const std::uint64_t seed : cfg.seeds) {
            std::size_t count = 0;
            row.per_seed_losses.push_back(mlp_final_loss(cfg, train_data, seed, &count));
            row.parameter_count = count;
        }
        std::vector<double> sorted = row.per_seed_losses;
        std::sort(sorted.begin(), sorted.end());
        row.median_final_loss = median_of(sorted, 0, sorted.size());
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string scaling_table_csv(const std::vector<ScalingRow>& rows) {
    std::size_t seeds = 0;
    for (const auto& row : rows) seeds = std::max(seeds, row.per_seed_losses.size());
    std::string out = "arm,layers,parameters,median_final_loss";
    for (std::size_t s = 0; s < seeds; ++s) out += ",loss_seed_" + std::to_string(s);
    out += '\n';
    for (const auto& row : rows) {
        out += row.arm + "," + std::to_string(row.layers) + "," +
               std::to_string(row.parameter_count) + "," + fmt(row.median_final_loss);
        for (double v : row.per_seed_losses) out += "," + fmt(v);
        out += '\n';
    }
    return out;
}

std::vector<BestLayerRow> best_layer_report(
    const std::map<std::string, std::vector<std::size_t>>& histograms) {
    std::vector<BestLayerRow> rows;
    for (const auto& [task, counts] : histograms) {
        std::vector<double> expanded;
        for (std::size_t layer = 0; layer < counts.size(); ++layer) {
            expanded.insert(expanded.end(), counts[layer], double(layer + 1));
        }
        if (expanded.empty()) continue;
        BestLayerRow row;
        row.task = task;
        row.counts = counts;
        const std::size_t n = expanded.size();
        row.median = median_of(expanded, 0, n);
        // Tukey hinges: halves exclude the middle element when n is odd.
        const std::size_t half = n / 2;
        row.q1 = median_of(expanded, 0, half);
        row.q3 = median_of(expanded, n - half, n);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ValidationError("no layer selections recorded");
    return rows;
}

std::string best_layer_csv(const std::vector<BestLayerRow>& rows) {
    std::size_t layers = 0;
    for (const auto& row : rows) layers = std::max(layers, row.counts.size());
    std::string out = "task,q1,median,q3";
    for (std::size_t l = 0; l < layers; ++l) out += ",count_layer_" + std::to_string(l + 1);
    out += '\n';
    for (const auto& row : rows) {
        out += row.task + "," + fmt(row.q1) + "," + fmt(row.median) + "," + fmt(row.q3);
        for (std::size_t l = 0; l < layers; ++l) {
            out += "," + (l < row.counts.size() ? std::to_string(row.counts[l]) : std::string("0"));
        }
        out += '\n';
    }
    return out;
}

std::string report_filename(const std::string& dataset, const std::string& fold,
                            std::uint64_t seed, const std::string& kind) {
    return dataset + "_" + fold + "_" + std::to_string(seed) + "_" + kind + ".csv";
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << content;
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace lcm
