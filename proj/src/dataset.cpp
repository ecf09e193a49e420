#include "lcm/dataset.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>
#include <unordered_set>

#include "lcm/errors.hpp"
#include "lcm/fc.hpp"
#include "lcm/rng.hpp"

namespace lcm {

namespace {

std::string record_name(const SubjectRecord& r, std::size_t index) {
    return "record " + std::to_string(index) + " (subject '" + r.subject_id + "')";
}

void validate_labels(const PhenotypeSchema& schema,
                     const std::vector<std::optional<double>>& labels,
                     const std::string& who) {
    if (labels.size() != schema.task_count()) {
        throw ValidationError(who + ": " + std::to_string(labels.size()) + " labels for " +
                              std::to_string(schema.task_count()) + " tasks");
    }
    for (std::size_t t = 0; t < labels.size(); ++t) {
        if (!labels[t]) continue;
        const auto& task = schema.task(t);
        const double v = *labels[t];
        if (!std::isfinite(v)) {
            throw ValidationError(who + ": non-finite label for task '" + task.name + "'");
        }
        if (task.kind == TaskKind::kCategorical) {
            if (v != std::floor(v) || v < 0 ||
                v >= static_cast<double>(task.class_count)) {
                throw ValidationError(who + ": label " + std::to_string(v) + " for task '" +
                                      task.name + "' outside [0, " +
                                      std::to_string(task.class_count) + ")");
            }
        }
    }
}

}  // namespace

void validate_dataset(const Dataset& dataset) {
    if (dataset.region_count == 0) {
        throw ValidationError("dataset: region_count must be positive");
    }
    for (std::size_t i = 0; i < dataset.records.size(); ++i) {
        const auto& r = dataset.records[i];
        if (r.subject_id.empty()) {
            throw ValidationError("record " + std::to_string(i) + ": empty subject_id");
        }
        validate_labels(dataset.schema, r.labels, record_name(r, i));
    }
}

Dataset dataset_from_json(const nlohmann::json& j, const std::string& context) {
    if (!j.is_object()) {
        throw ValidationError(context + ": manifest must be a JSON object");
    }
    Dataset d;
    if (!j.contains("schema")) {
        throw ValidationError(context + ": missing 'schema'");
    }
    d.schema = PhenotypeSchema::from_json(j["schema"]);
    if (!j.contains("region_count") || !j["region_count"].is_number_integer() ||
        j["region_count"].get<std::int64_t>() <= 0) {
        throw ValidationError(context + ": missing positive integer 'region_count'");
    }
    d.region_count = j["region_count"].get<std::size_t>();

    for (const auto& rec : j.value("records", nlohmann::json::array())) {
        SubjectRecord r;
        if (!rec.contains("subject_id") || !rec["subject_id"].is_string()) {
            throw ValidationError(context + ": record missing string 'subject_id'");
        }
        r.subject_id = rec["subject_id"].get<std::string>();
        for (const auto& s : rec.value("scans", nlohmann::json::array())) {
            r.scan_paths.push_back(s.get<std::string>());
        }
        r.labels.assign(d.schema.task_count(), std::nullopt);
        if (rec.contains("labels")) {
            for (const auto& [key, value] : rec["labels"].items()) {
                if (!d.schema.has_task(key)) {
                    throw ValidationError(context + ": record subject '" + r.subject_id +
                                          "' labels unknown task '" + key + "'");
                }
                if (!value.is_null()) {
                    r.labels[d.schema.task_index(key)] = value.get<double>();
                }
            }
        }
        d.records.push_back(std::move(r));
    }
    validate_dataset(d);
    return d;
}

nlohmann::json dataset_to_json(const Dataset& dataset) {
    nlohmann::json j;
    j["schema"] = dataset.schema.to_json();
    j["region_count"] = dataset.region_count;
    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : dataset.records) {
        nlohmann::json labels = nlohmann::json::object();
        for (std::size_t t = 0; t < r.labels.size(); ++t) {
            const auto& task = dataset.schema.task(t);
            if (!r.labels[t]) {
                labels[task.name] = nullptr;
            } else if (task.kind == TaskKind::kCategorical) {
                labels[task.name] = static_cast<std::int64_t>(*r.labels[t]);
            } else {
                labels[task.name] = *r.labels[t];
            }
        }
        records.push_back({{"subject_id", r.subject_id},
                           {"scans", r.scan_paths},
                           {"labels", std::move(labels)}});
    }
    j["records"] = std::move(records);
    return j;
}

Dataset read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open manifest: " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": invalid JSON: " + e.what());
    }
    return dataset_from_json(j, path);
}

void write_manifest(const Dataset& dataset, const std::string& path) {
    validate_dataset(dataset);
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write manifest: " + path);
    }
    out << dataset_to_json(dataset).dump(2) << "\n";
    if (!out) {
        throw IoError("failed writing manifest: " + path);
    }
}

SampleSet materialize(const Dataset& dataset, const std::string& base_dir, std::size_t threads) {
    validate_dataset(dataset);
    struct Slot {
        std::size_t record;
        std::string path;
    };
    std::vector<Slot> slots;
    for (std::size_t i = 0; i < dataset.records.size(); ++i) {
        for (const auto& p : dataset.records[i].scan_paths) {
            std::string full = p;
            if (!p.empty() && p.front() != '/' && !base_dir.empty()) {
                full = base_dir + "/" + p;
            }
            slots.push_back({i, std::move(full)});
        }
    }

    std::vector<Tensor> fcs(slots.size());
    std::vector<std::string> failures(slots.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t s = next.fetch_add(1);
            if (s >= slots.size()) break;
            try {
                Tensor fc = load_fc_any(slots[s].path);
                if (fc.rows() != dataset.region_count) {
                    throw ValidationError(slots[s].path + ": " + std::to_string(fc.rows()) +
                                          " regions, manifest says " +
                                          std::to_string(dataset.region_count));
                }
                fcs[s] = fc;
            } catch (const std::exception& e) {
                failures[s] = e.what();
            }
        }
    };
    if (threads <= 1 || slots.size() <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        const std::size_t n = std::min(threads, slots.size());
        for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (std::size_t s = 0; s < slots.size(); ++s) {
        if (!failures[s].empty()) {
            throw IoError(record_name(dataset.records[slots[s].record], slots[s].record) + ": " +
                          failures[s]);
        }
    }

    SampleSet set;
    set.schema = dataset.schema;
    set.region_count = dataset.region_count;
    set.samples.reserve(slots.size());
    for (std::size_t s = 0; s < slots.size(); ++s) {
        const auto& r = dataset.records[slots[s].record];
        set.samples.push_back({r.subject_id, fcs[s], r.labels});
    }
    return set;
}

std::vector<std::string> unique_subjects(const SampleSet& data) {
    std::vector<std::string> subjects;
    std::unordered_set<std::string> seen;
    for (const auto& s : data.samples) {
        if (seen.insert(s.subject_id).second) subjects.push_back(s.subject_id);
    }
    return subjects;
}

FoldSplit kfold_split(const SampleSet& data, std::size_t k, std::uint64_t seed) {
    auto subjects = unique_subjects(data);
    if (k == 0 || k > subjects.size()) {
        throw ConfigError("kfold_split: k=" + std::to_string(k) + " with " +
                          std::to_string(subjects.size()) + " subjects");
    }
    Rng rng(seed, "kfold");
    rng.shuffle(subjects);
    FoldSplit split;
    split.k = k;
    split.seed = seed;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        split.fold_of[subjects[i]] = i % k;
    }
    return split;
}

SampleSet fold_subset(const SampleSet& data, const FoldSplit& split, std::size_t fold,
                      bool held_out) {
    if (fold >= split.k) {
        throw ConfigError("fold_subset: fold " + std::to_string(fold) + " of " +
                          std::to_string(split.k));
    }
    SampleSet out;
    out.schema = data.schema;
    out.region_count = data.region_count;
    for (const auto& s : data.samples) {
        auto it = split.fold_of.find(s.subject_id);
        if (it == split.fold_of.end()) {
            throw ConfigError("fold_subset: subject '" + s.subject_id + "' missing from split");
        }
        if ((it->second == fold) == held_out) out.samples.push_back(s);
    }
    return out;
}

namespace {

// Trait projections: first three tasks get fixed directions whose pairwise
// correlations are 0, 1/sqrt(2), so tasks share signal without duplicating
// it; further tasks draw a random unit direction.
std::array<double, 2> task_direction(std::size_t t, const Rng& base) {
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    if (t == 0) return {1.0, 0.0};
    if (t == 1) return {inv_sqrt2, inv_sqrt2};
    if (t == 2) return {0.0, 1.0};
    Rng rng = base.stream("taskdir", t);
    for (;;) {
        const double a = rng.normal(), b = rng.normal();
        const double norm = std::sqrt(a * a + b * b);
        if (norm > 1e-9) return {a / norm, b / norm};
    }
}

}  // namespace

SynthOutput synth_generate(const SynthConfig& config, std::uint64_t seed) {
    if (config.tasks.empty()) {
        throw ConfigError("synth: needs at least one task");
    }
    if (config.effect < 0) {
        throw ConfigError("synth: effect must be >= 0");
    }
    if (config.noise < 0) {
        throw ConfigError("synth: noise must be >= 0");
    }
    if (config.regions < config.latent_dim) {
        throw ConfigError("synth: regions " + std::to_string(config.regions) +
                          " < latent_dim " + std::to_string(config.latent_dim));
    }
    if (config.latent_dim == 0 || config.timepoints < 3 || config.subjects_per_class == 0 ||
        config.scans_per_subject == 0) {
        throw ConfigError("synth: degenerate dimension in config");
    }
    const PhenotypeSchema schema(config.tasks);

    std::size_t max_classes = 1;
    for (const auto& t : config.tasks) {
        if (t.kind == TaskKind::kCategorical) max_classes = std::max(max_classes, t.class_count);
    }
    const std::size_t subjects = config.subjects_per_class * max_classes;
    const std::size_t n_tasks = config.tasks.size();
    const std::size_t n = config.regions, tp = config.timepoints, k = config.latent_dim;

    Rng base(seed, "synth");

    std::vector<std::array<double, 2>> traits(subjects);
    for (std::size_t s = 0; s < subjects; ++s) {
        Rng rng = base.stream("trait", s);
        traits[s] = {rng.normal(), rng.normal()};
    }

    // Per-task projections, then labels.
    std::vector<std::vector<double>> proj(n_tasks, std::vector<double>(subjects));
    std::vector<std::vector<std::optional<double>>> labels(
        subjects, std::vector<std::optional<double>>(n_tasks));
    for (std::size_t t = 0; t < n_tasks; ++t) {
        const auto dir = task_direction(t, base);
        for (std::size_t s = 0; s < subjects; ++s) {
            proj[t][s] = traits[s][0] * dir[0] + traits[s][1] * dir[1];
        }
        if (config.tasks[t].kind == TaskKind::kContinuous) {
            for (std::size_t s = 0; s < subjects; ++s) labels[s][t] = proj[t][s];
            continue;
        }
        // Equal-frequency binning: rank within the cohort fixes the class.
        std::vector<std::size_t> order(subjects);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return proj[t][a] < proj[t][b]; });
        const std::size_t classes = config.tasks[t].class_count;
        for (std::size_t rank = 0; rank < subjects; ++rank) {
            labels[order[rank]][t] =
                static_cast<double>(std::min(classes - 1, rank * classes / subjects));
        }
    }

    // Shared mixing base plus class-conditioned components.
    const double col_scale = 1.0 / std::sqrt(static_cast<double>(k));
    std::vector<double> base_mix = base.stream("mixing/base").normal_vec(n * k, 0.0, col_scale);
    std::vector<std::vector<std::vector<double>>> cat_delta(n_tasks);
    std::vector<std::vector<double>> cont_delta(n_tasks);
    for (std::size_t t = 0; t < n_tasks; ++t) {
        Rng trng = base.stream("mixing/task", t);
        if (config.tasks[t].kind == TaskKind::kCategorical) {
            cat_delta[t].resize(config.tasks[t].class_count);
            for (std::size_t c = 0; c < config.tasks[t].class_count; ++c) {
                cat_delta[t][c] = trng.stream("class", c).normal_vec(n * k, 0.0, col_scale);
            }
        } else {
            cont_delta[t] = trng.normal_vec(n * k, 0.0, col_scale);
        }
    }

    SynthOutput out;
    out.samples.schema = schema;
    out.samples.region_count = n;

    std::vector<double> mixing(n * k);
    for (std::size_t s = 0; s < subjects; ++s) {
        mixing = base_mix;
        for (std::size_t t = 0; t < n_tasks; ++t) {
            const double v = *labels[s][t];
            if (config.tasks[t].kind == TaskKind::kCategorical) {
                const auto& d = cat_delta[t][static_cast<std::size_t>(v)];
                for (std::size_t i = 0; i < mixing.size(); ++i) {
                    mixing[i] += config.effect * d[i];
                }
            } else {
                const auto& d = cont_delta[t];
                for (std::size_t i = 0; i < mixing.size(); ++i) {
                    mixing[i] += config.effect * v * d[i];
                }
            }
        }

        for (std::size_t scan = 0; scan < config.scans_per_subject; ++scan) {
            Rng rng = base.stream("scan", s * config.scans_per_subject + scan);
            std::vector<double> latent = rng.stream("latent").normal_vec(k * tp);
            std::vector<double> noise = rng.stream("noise").normal_vec(n * tp);
            Tensor bold = Tensor::zeros({n, tp});
            auto bd = bold.raw_data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t tau = 0; tau < tp; ++tau) {
                    double acc = config.noise * noise[i * tp + tau];
                    for (std::size_t j = 0; j < k; ++j) {
                        acc += mixing[i * k + j] * latent[j * tp + tau];
                    }
                    bd[i * tp + tau] = acc;
                }
            }
            out.samples.samples.push_back(
                {"subj_" + std::to_string(s), compute_fc(bold), labels[s]});
            out.bold.push_back(std::move(bold));
        }
    }
    return out;
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("tasks")) {
        throw ValidationError("synth config: expected an object with 'tasks'");
    }
    SynthConfig c;
    PhenotypeSchema schema = PhenotypeSchema::from_json(j["tasks"]);
    c.tasks = schema.tasks();
    c.subjects_per_class = j.value("subjects_per_class", c.subjects_per_class);
    c.regions = j.value("regions", c.regions);
    c.timepoints = j.value("timepoints", c.timepoints);
    c.scans_per_subject = j.value("scans_per_subject", c.scans_per_subject);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.effect = j.value("effect", c.effect);
    c.noise = j.value("noise", c.noise);
    return c;
}

}  // namespace lcm
