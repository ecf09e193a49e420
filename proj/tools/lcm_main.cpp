#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lcm/checkpoint.hpp"
#include "lcm/dataset.hpp"
#include "lcm/errors.hpp"
#include "lcm/eval.hpp"
#include "lcm/fc.hpp"
#include "lcm/finetune.hpp"
#include "lcm/log.hpp"
#include "lcm/model.hpp"
#include "lcm/rng.hpp"
#include "lcm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lcm;

namespace {

// ---------------------------------------------------------------------------
// provenance

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Per-run record: resolved config, content hashes of every input, the files
// written. Timestamps live here and nowhere else, so every other output of a
// command is byte-identical across reruns.
struct RunLog {
    std::string command;
    json config = json::object();
    json inputs = json::object();
    std::vector<std::string> outputs;
    std::string started_at = utc_now();

    explicit RunLog(std::string cmd) : command(std::move(cmd)) {}

    std::uint64_t add_input(const std::string& key, const fs::path& path) {
        const std::uint64_t hash = fnv1a64(read_file_bytes(path));
        inputs[key] = {{"path", path.string()}, {"fnv1a64", hex64(hash)}};
        return hash;
    }

    void wrote(const fs::path& path) { outputs.push_back(path.string()); }

    void finish(const fs::path& out_dir) {
        json j;
        j["format_version"] = 1;
        j["command"] = command;
        j["config"] = config;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        j["started_at"] = started_at;
        j["finished_at"] = utc_now();
        write_text_file(out_dir / "run.json", j.dump(2) + "\n");
    }
};

// ---------------------------------------------------------------------------
// shared options

struct GlobalOpts {
    std::uint64_t seed = 0;
    std::string out_dir;
    std::size_t threads = 1;
    std::string log_level = "warn";
};

void add_global_options(CLI::App* sub, GlobalOpts& g) {
    sub->add_option("--seed", g.seed, "Base RNG seed")->capture_default_str();
    sub->add_option("--out-dir", g.out_dir, "Output directory ($LCM_OUT_DIR, then '.')");
    sub->add_option("--threads", g.threads, "Parallel fold / scan-loading workers")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    sub->add_option("--log-level", g.log_level, "error|warn|info|debug")->capture_default_str();
}

fs::path prepare_out_dir(const GlobalOpts& g) {
    set_log_level(parse_log_level(g.log_level));
    fs::path dir;
    if (!g.out_dir.empty()) {
        dir = g.out_dir;
    } else if (const char* env = std::getenv("LCM_OUT_DIR"); env != nullptr && *env != '\0') {
        dir = env;
    } else {
        dir = ".";
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir.string() + "'");
    return dir;
}

json globals_json(const GlobalOpts& g, const fs::path& out_dir) {
    return {{"seed", g.seed},
            {"out_dir", out_dir.string()},
            {"threads", g.threads},
            {"log_level", g.log_level}};
}

struct ModelOpts {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t dim = 32;
    std::size_t ffn_factor = 4;
    std::string preset;
};

void add_model_options(CLI::App* sub, ModelOpts& m, bool with_layers = true) {
    if (with_layers) {
        sub->add_option("--layers", m.layers, "Transformer depth")->capture_default_str();
        sub->add_option("--preset", m.preset, "small|mid|big = 8|20|32 layers (overrides --layers)")
            ->check(CLI::IsMember({"small", "mid", "big"}));
    }
    sub->add_option("--heads", m.heads, "Attention heads")->capture_default_str();
    sub->add_option("--dim", m.dim, "Token width")->capture_default_str();
    sub->add_option("--ffn-factor", m.ffn_factor, "FFN hidden width multiplier")
        ->capture_default_str();
}

ModelConfig resolve_model(const ModelOpts& m, const SampleSet& data) {
    ModelConfig mc;
    mc.layers = m.layers;
    if (m.preset == "small") mc.layers = 8;
    if (m.preset == "mid") mc.layers = 20;
    if (m.preset == "big") mc.layers = 32;
    mc.heads = m.heads;
    mc.dim = m.dim;
    mc.ffn_factor = m.ffn_factor;
    mc.regions = data.region_count;
    mc.schema = data.schema;
    mc.validate();
    return mc;
}

struct TrainOpts {
    double lr = 1e-4;
    std::size_t batch = 128;
    std::size_t epochs = 200;
    std::size_t momentum_epochs = 5;
    std::size_t patience = 50;
    bool last_only = false;
    bool avg_losses = false;
    bool freeze = false;
    CLI::Option* patience_opt = nullptr;
};

void add_train_options(CLI::App* sub, TrainOpts& t) {
    sub->add_option("--lr", t.lr, "Adam learning rate")->capture_default_str();
    sub->add_option("--batch-size", t.batch, "Samples per batch")->capture_default_str();
    sub->add_option("--epochs", t.epochs, "Max training epochs")->capture_default_str();
    sub->add_option("--momentum-epochs", t.momentum_epochs,
                    "Epochs supervising the layer-averaged prediction before per-task best-layer "
                    "selection")
        ->capture_default_str();
    t.patience_opt =
        sub->add_option("--patience", t.patience, "Early-stop patience in epochs")
            ->capture_default_str();
    sub->add_flag("--supervise-last-only", t.last_only, "Supervise only the final layer");
    sub->add_flag("--average-losses", t.avg_losses,
                  "Stage 1 averages per-layer losses instead of logits");
    sub->add_flag("--freeze-backbone", t.freeze, "Train only the token table and readout head");
}

TrainConfig resolve_train(const TrainOpts& t, std::uint64_t seed) {
    TrainConfig tc;
    tc.learning_rate = t.lr;
    tc.batch_size = t.batch;
    tc.max_epochs = t.epochs;
    tc.momentum_epochs = t.momentum_epochs;
    tc.patience = t.patience;
    tc.seed = seed;
    tc.average_losses_not_logits = t.avg_losses;
    tc.supervise_last_only = t.last_only;
    tc.freeze_backbone = t.freeze;
    tc.validate();
    return tc;
}

// ---------------------------------------------------------------------------
// data plumbing

struct LoadedData {
    std::string name;  // manifest stem, used in output file names
    SampleSet samples;
};

LoadedData load_manifest_samples(const fs::path& path, std::size_t threads, RunLog& run) {
    run.add_input("manifest", path);
    Dataset ds = read_manifest(path.string());
    LoadedData out;
    out.name = path.stem().string();
    out.samples = materialize(ds, path.parent_path().string(), threads);
    return out;
}

// Maps a dataset's tasks onto a checkpoint's (wider) schema; tasks the
// dataset does not carry stay unlabeled.
SampleSet lift_onto_schema(const SampleSet& data, const PhenotypeSchema& target) {
    if (data.schema.tasks() == target.tasks()) return data;
    std::vector<std::size_t> slot(data.schema.tasks().size());
    for (std::size_t i = 0; i < slot.size(); ++i) {
        const auto& task = data.schema.tasks()[i];
        bool found = false;
        for (std::size_t j = 0; j < target.tasks().size(); ++j) {
            if (target.tasks()[j] == task) {
                slot[i] = j;
                found = true;
                break;
            }
        }
        if (!found) {
            throw ValidationError("dataset task '" + task.name +
                                  "' does not match any checkpoint task");
        }
    }
    SampleSet out;
    out.schema = target;
    out.region_count = data.region_count;
    out.samples.reserve(data.samples.size());
    for (const auto& sample : data.samples) {
        Sample lifted;
        lifted.subject_id = sample.subject_id;
        lifted.fc = sample.fc;
        lifted.labels.assign(target.tasks().size(), std::nullopt);
        for (std::size_t i = 0; i < slot.size(); ++i) lifted.labels[slot[i]] = sample.labels[i];
        out.samples.push_back(std::move(lifted));
    }
    return out;
}

void check_regions(const LcmModel& model, const SampleSet& data) {
    if (model.config().regions != data.region_count) {
        throw ValidationError("dataset has " + std::to_string(data.region_count) +
                              " regions but the checkpoint expects " +
                              std::to_string(model.config().regions));
    }
}

std::string artifact_name(const std::string& dataset, const std::string& fold, std::uint64_t seed,
                          const std::string& kind, const std::string& ext) {
    return dataset + "_" + fold + "_" + std::to_string(seed) + "_" + kind + "." + ext;
}

// ---------------------------------------------------------------------------
// fold workers

std::uint64_t fold_seed(std::uint64_t base, std::size_t fold) {
    return Rng(base, "folds").stream("fold", fold).next_u64();
}

struct FoldOutcome {
    TrainResult result;
    EvalReport report;
    std::vector<fs::path> files;
};

// Runs `work` once per fold, at most `threads` folds concurrently. Folds own
// disjoint state (model, tape, RNG stream), so results do not depend on the
// worker count.
std::vector<FoldOutcome> run_folds(std::size_t k, std::size_t threads,
                                   const std::function<FoldOutcome(std::size_t)>& work) {
    std::vector<FoldOutcome> out(k);
    std::vector<std::exception_ptr> errors(k);
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const std::size_t f = next.fetch_add(1);
            if (f >= k) return;
            try {
                out[f] = work(f);
            } catch (...) {
                errors[f] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::min(std::max<std::size_t>(threads, 1), k);
    if (n <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(n);
        for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

json fold_summary(const std::vector<FoldOutcome>& outcomes) {
    json folds = json::array();
    std::map<std::string, std::pair<json, std::size_t>> totals;
    for (std::size_t f = 0; f < outcomes.size(); ++f) {
        const auto& o = outcomes[f];
        json entry;
        entry["fold"] = f;
        entry["best_epoch"] = o.result.best_epoch;
        entry["best_score"] = o.result.best_score;
        entry["epochs_run"] = o.result.epochs_run;
        entry["eval"] = o.report.to_json()["tasks"];
        folds.push_back(std::move(entry));
        for (const auto& t : o.report.tasks) {
            auto& [sums, count] = totals[t.task];
            if (count == 0) sums = {{"accuracy", 0.0}, {"macro_f1", 0.0}, {"mse", 0.0}};
            sums["accuracy"] = sums["accuracy"].get<double>() + t.accuracy;
            sums["macro_f1"] = sums["macro_f1"].get<double>() + t.macro_f1;
            sums["mse"] = sums["mse"].get<double>() + t.mse;
            count += 1;
        }
    }
    json means = json::object();
    for (auto& [task, entry] : totals) {
        auto& [sums, count] = entry;
        means[task] = {{"accuracy", sums["accuracy"].get<double>() / double(count)},
                       {"macro_f1", sums["macro_f1"].get<double>() / double(count)},
                       {"mse", sums["mse"].get<double>() / double(count)},
                       {"folds", count}};
    }
    return {{"folds", std::move(folds)}, {"mean_over_folds", std::move(means)}};
}

// ---------------------------------------------------------------------------
// commands

struct FcOpts {
    GlobalOpts g;
    std::string in, out;
};

void cmd_fc(const FcOpts& o) {
    const fs::path out_dir = prepare_out_dir(o.g);
    RunLog run("fc");
    run.add_input("scan", o.in);
    run.config = globals_json(o.g, out_dir);
    run.config["in"] = o.in;
    run.config["out"] = o.out;

    const Tensor fc = load_fc_any(o.in);
    validate_fc(fc);
    write_fc_csv(fc, o.out);
    run.wrote(o.out);
    run.finish(out_dir);
    log_info("wrote " + o.out);
}

struct SynthOpts {
    GlobalOpts g;
    std::string config;
};

void cmd_synth(const SynthOpts& o) {
    const fs::path out_dir = prepare_out_dir(o.g);
    RunLog run("synth");
    run.add_input("config", o.config);
    const SynthConfig sc = synth_config_from_json(json::parse(read_file_bytes(o.config)));
    run.config = globals_json(o.g, out_dir);
    run.config["synth"] = json::parse(read_file_bytes(o.config));

    const SynthOutput out = synth_generate(sc, o.g.seed);
    std::error_code ec;
    fs::create_directories(out_dir / "scans", ec);
    if (ec) throw IoError("cannot create '" + (out_dir / "scans").string() + "'");

    Dataset ds;
    ds.schema = out.samples.schema;
    ds.region_count = out.samples.region_count;
    std::map<std::string, std::size_t> scan_index;
    for (std::size_t i = 0; i < out.samples.samples.size(); ++i) {
        const auto& sample = out.samples.samples[i];
        const std::size_t k = scan_index[sample.subject_id]++;
        const std::string rel = "scans/" + sample.subject_id + "_s" + std::to_string(k) + ".csv";
        write_scan_csv(out.bold[i], (out_dir / rel).string());
        ds.records.push_back({sample.subject_id, {rel}, sample.labels});
    }
    write_manifest(ds, (out_dir / "manifest.json").string());
    run.wrote(out_dir / "manifest.json");
    run.config["scans_written"] = out.samples.samples.size();
    run.finish(out_dir);
    log_info("wrote " + std::to_string(out.samples.samples.size()) + " scans and " +
             (out_dir / "manifest.json").string());
}

struct PretrainOpts {
    GlobalOpts g;
    ModelOpts model;
    TrainOpts train;
    std::string data;
    std::size_t folds = 5;
};

void cmd_pretrain(const PretrainOpts& o) {
    const fs::path out_dir = prepare_out_dir(o.g);
    RunLog run("pretrain");
    const TrainConfig tc_base = resolve_train(o.train, o.g.seed);
    if (o.folds < 2) throw ConfigError("pretrain needs --folds >= 2");
    const LoadedData data = load_manifest_samples(o.data, o.g.threads, run);
    const ModelConfig mc = resolve_model(o.model, data.samples);
    const FoldSplit split = kfold_split(data.samples, o.folds, o.g.seed);

    run.config = globals_json(o.g, out_dir);
    run.config["data"] = o.data;
    run.config["folds"] = o.folds;
    run.config["model"] = mc.to_json();
    run.config["train"] = tc_base.to_json();

    const json data_input = run.inputs["manifest"];
    auto work = [&](std::size_t f) {
        const std::uint64_t fseed = fold_seed(o.g.seed, f);
        const SampleSet train_set = fold_subset(data.samples, split, f, false);
        const SampleSet val_set = fold_subset(data.samples, split, f, true);
        LcmModel model(mc, fseed);
        TrainConfig tc = tc_base;
        tc.seed = fseed;

        FoldOutcome out;
        out.result = train(model, train_set, val_set, tc);
        out.result.checkpoint.provenance = {{"command", "pretrain"},
                                            {"dataset", data.name},
                                            {"manifest", data_input},
                                            {"fold", f},
                                            {"folds", o.folds},
                                            {"seed", o.g.seed},
                                            {"fold_seed", fseed}};

        const std::string fold_str = std::to_string(f);
        const fs::path ckpt_path =
            out_dir / artifact_name(data.name, fold_str, o.g.seed, "checkpoint", "json");
        save_checkpoint(out.result.checkpoint, ckpt_path);
        out.files.push_back(ckpt_path);

        const fs::path metrics_path =
            out_dir / artifact_name(data.name, fold_str, o.g.seed, "metrics", "jsonl");
        write_metrics_history(out.result.history, metrics_path);
        out.files.push_back(metrics_path);

        out.report = evaluate(model, out.result.checkpoint, val_set);
        out.report.dataset = data.name;
        out.report.fold = fold_str;
        out.report.seed = o.g.seed;
        out.report.checkpoint_ref = ckpt_path.filename().string();
        const fs::path eval_csv = out_dir / report_filename(data.name, fold_str, o.g.seed, "eval");
        write_text_file(eval_csv, out.report.to_csv());
        out.files.push_back(eval_csv);
        const fs::path eval_json =
            out_dir / artifact_name(data.name, fold_str, o.g.seed, "eval", "json");
        write_text_file(eval_json, out.report.to_json().dump(2) + "\n");
        out.files.push_back(eval_json);

        log_info("fold " + fold_str + ": best epoch " + std::to_string(out.result.best_epoch) +
                 ", val score " + std::to_string(out.result.best_score));
        return out;
    };

    const auto outcomes = run_folds(o.folds, o.g.threads, work);
    for (const auto& out : outcomes) {
        for (const auto& f : out.files) run.wrote(f);
    }
    const fs::path summary_path =
        out_dir / artifact_name(data.name, "all", o.g.seed, "summary", "json");
    write_text_file(summary_path, fold_summary(outcomes).dump(2) + "\n");
    run.wrote(summary_path);
    run.finish(out_dir);
}

struct FinetuneOpts {
    GlobalOpts g;
    TrainOpts train;
    std::string ckpt, data, spec;
    std::size_t folds = 5;
    double fewshot = -1.0;  // <0: use the spec's ratio
    std::string stratify;
};

void cmd_finetune(const FinetuneOpts& o) {
    const fs::path out_dir = prepare_out_dir(o.g);
    RunLog run("finetune");
    run.add_input("checkpoint", o.ckpt);
    run.add_input("spec", o.spec);
    const TrainConfig tc_base = resolve_train(o.train, o.g.seed);
    if (o.folds < 2) throw ConfigError("finetune needs --folds >= 2");
    const Checkpoint base = load_checkpoint(o.ckpt);
    const LoadedData down = load_manifest_samples(o.data, o.g.threads, run);
    FinetuneSpec spec = FinetuneSpec::from_json(json::parse(read_file_bytes(o.spec)));
    if (o.fewshot >= 0.0) spec.fewshot_ratio = o.fewshot;
    if (!spec.new_tasks.empty() && !(spec.new_tasks == down.samples.schema.tasks())) {
        throw ValidationError("finetune spec tasks differ from the downstream manifest");
    }
    spec.base_checkpoint = o.ckpt;
    if (base.config.regions != down.samples.region_count) {
        throw ValidationError("downstream data has " +
                              std::to_string(down.samples.region_count) +
                              " regions but the checkpoint expects " +
                              std::to_string(base.config.regions));
    }

    // Stratify fewshot subsampling by a downstream task; the pretrained tasks
    // carry constant pseudo-labels and cannot stratify anything.
    std::optional<std::string> stratify;
    if (!o.stratify.empty()) {
        stratify = o.stratify;
    } else {
        for (const auto& task : down.samples.schema.tasks()) {
            if (task.kind == TaskKind::kCategorical) {
                stratify = task.name;
                break;
            }
        }
    }

    const SampleSet lifted =
        assign_pseudo_labels(down.samples, base.config.schema, spec);
    const FoldSplit split = kfold_split(lifted, o.folds, o.g.seed);

    run.config = globals_json(o.g, out_dir);
    run.config["ckpt"] = o.ckpt;
    run.config["data"] = o.data;
    run.config["folds"] = o.folds;
    run.config["spec"] = spec.to_json();
    run.config["stratify"] = stratify.has_value() ? json(*stratify) : json(nullptr);
    run.config["train"] = tc_base.to_json();

    const json inputs = run.inputs;
    auto work = [&](std::size_t f) {
        const std::uint64_t fseed = fold_seed(o.g.seed, f);
        LcmModel model = extend_from_checkpoint(base, down.samples.schema.tasks(), fseed);
        const SampleSet train_full = fold_subset(lifted, split, f, false);
        const SampleSet val_set = fold_subset(lifted, split, f, true);
        const SampleSet train_set =
            fewshot_subsample(train_full, spec.fewshot_ratio, fseed, stratify);
        TrainConfig tc = tc_base;
        tc.seed = fseed;

        FoldOutcome out;
        out.result = finetune(model, train_set, val_set, tc);
        out.result.checkpoint.provenance = {{"command", "finetune"},
                                            {"dataset", down.name},
                                            {"inputs", inputs},
                                            {"fold", f},
                                            {"folds", o.folds},
                                            {"seed", o.g.seed},
                                            {"fold_seed", fseed},
                                            {"fewshot_ratio", spec.fewshot_ratio},
                                            {"fewshot_subjects", unique_subjects(train_set).size()}};

        const std::string fold_str = std::to_string(f);
        const fs::path ckpt_path =
            out_dir / artifact_name(down.name, fold_str, o.g.seed, "finetuned", "json");
        save_checkpoint(out.result.checkpoint, ckpt_path);
        out.files.push_back(ckpt_path);

        const fs::path metrics_path =
            out_dir / artifact_name(down.name, fold_str, o.g.seed, "finetune-metrics", "jsonl");
        write_metrics_history(out.result.history, metrics_path);
        out.files.push_back(metrics_path);

        out.report = evaluate(model, out.result.checkpoint, val_set);
        out.report.dataset = down.name;
        out.report.fold = fold_str;
        out.report.seed = o.g.seed;
        out.report.checkpoint_ref = ckpt_path.filename().string();
        const fs::path eval_csv =
            out_dir / report_filename(down.name, fold_str, o.g.seed, "finetune-eval");
        write_text_file(eval_csv, out.report.to_csv());
        out.files.push_back(eval_csv);

        log_info("fold " + fold_str + ": trained on " +
                 std::to_string(train_set.samples.size()) + " samples, val score " +
                 std::to_string(out.result.best_score));
        return out;
    };

    const auto outcomes = run_folds(o.folds, o.g.threads, work);
    for (const auto& out : outcomes) {
        for (const auto& f : out.files) run.wrote(f);
    }
    const fs::path summary_path =
        out_dir / artifact_name(down.name, "all", o.g.seed, "finetune-summary", "json");
    write_text_file(summary_path, fold_summary(outcomes).dump(2) + "\n");
    run.wrote(summary_path);
    run.finish(out_dir);
}

struct EvalOpts {
    GlobalOpts g;
    std::string ckpt, data;
    std::size_t folds = 5;
    std::optional<std::size_t> fold;
};

void cmd_eval(const EvalOpts& o) {
    const fs::path out_dir = prepare_out_dir(o.g);
    RunLog run("eval");
    run.add_input("checkpoint", o.ckpt);
    const Checkpoint ckpt = load_checkpoint(o.ckpt);
    const LoadedData data = load_manifest_samples(o.data, o.g.threads, run);
    const LcmModel model = model_from_checkpoint(ckpt);
    const SampleSet lifted = lift_onto_schema(data.samples, model.schema());
    check_regions(model, lifted);

    std::string fold_str = "all";
    SampleSet subset = lifted;
    if (o.fold.has_value()) {
        const FoldSplit split = kfold_split(lifted, o.folds, o.g.seed);
        subset = fold_subset(lifted, split, *o.fold, true);
        fold_str = std::to_string(*o.fold);
    }

    run.config = globals_json(o.g, out_dir);
    run.config["ckpt"] = o.ckpt;
    run.config["data"] = o.data;
    run.config["folds"] = o.folds;
    run.config["fold"] = o.fold.has_value() ? json(*o.fold) : json(nullptr);

    EvalReport report = evaluate(model, ckpt, subset);
    report.dataset = data.name;
    report.fold = fold_str;
    report.seed = o.g.seed;
    report.checkpoint_ref = fs::path(o.ckpt).filename().string();

    const fs::path csv_path = out_dir / report_filename(data.name, fold_str, o.g.seed, "eval");
    write_text_file(csv_path, report.to_csv());
    run.wrote(csv_path);
    const fs::path json_path =
        out_dir / artifact_name(data.name, fold_str, o.g.seed, "eval", "json");
    write_text_file(json_path, report.to_json().dump(2) + "\n");
    run.wrote(json_path);
    run.finish(out_dir);
    log_info("wrote " + csv_path.string());
}

std::string group_label(double value) {
    const double rounded = std::nearbyint(value);
    if (std::abs(value - rounded) < 1e-9) {
        return std::to_string(static_cast<long long>(rounded));
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", value);
    std::string s = buf;
    for (auto& c : s) {
        if (c == '.') c = 'p';
        if (c == '-') c = 'm';
        if (c == '+') c = 'x';
    }
    return s;
}

struct InterpretOpts {
    GlobalOpts g;
    std::string ckpt, data, task;
    bool by_predicted = false;
    std::size_t folds = 5;
    std::optional<std::size_t> fold;
};

void cmd_interpret(const InterpretOpts& o) {
    const fs::path out_dir = prepare_out_dir(o.g);
    RunLog run("interpret");
    run.add_input("checkpoint", o.ckpt);
    const Checkpoint ckpt = load_checkpoint(o.ckpt);
    const LoadedData data = load_manifest_samples(o.data, o.g.threads, run);
    const LcmModel model = model_from_checkpoint(ckpt);
    const SampleSet lifted = lift_onto_schema(data.samples, model.schema());
    check_regions(model, lifted);

    std::string fold_str = "all";
    SampleSet subset = lifted;
    if (o.fold.has_value()) {
        const FoldSplit split = kfold_split(lifted, o.folds, o.g.seed);
        subset = fold_subset(lifted, split, *o.fold, true);
        fold_str = std::to_string(*o.fold);
    }

    run.config = globals_json(o.g, out_dir);
    run.config["ckpt"] = o.ckpt;
    run.config["data"] = o.data;
    run.config["task"] = o.task;
    run.config["group_by_predicted"] = o.by_predicted;

    const auto summaries = aggregate_attention(model, ckpt, subset, o.task, o.by_predicted);
    std::optional<std::string> layers_csv;
    if (!ckpt.selection_histograms.empty()) {
        layers_csv = best_layer_csv(best_layer_report(ckpt.selection_histograms));
    } else {
        log_warn("checkpoint has no layer-selection histograms; skipping the best-layer table");
    }

    for (const auto& s : summaries) {
        const std::string kind = "attn-" + o.task + "-" + group_label(s.group_value);
        const fs::path path = out_dir / report_filename(data.name, fold_str, o.g.seed, kind);
        write_text_file(path, attention_summary_csv(s));
        run.wrote(path);
    }
    if (layers_csv.has_value()) {
        const fs::path path =
            out_dir / report_filename(data.name, fold_str, o.g.seed, "best-layer");
        write_text_file(path, *layers_csv);
        run.wrote(path);
    }
    run.finish(out_dir);
    log_info("wrote " + std::to_string(summaries.size()) + " attention tables");
}

struct ScaleOpts {
    GlobalOpts g;
    ModelOpts model;
    TrainOpts train;
    std::string data;
    std::vector<std::size_t> depths{2, 4, 8};
    std::size_t seed_count = 3;
    bool mlp_baseline = false;
    std::size_t mlp_layers = 2;
};

void cmd_scale_study(const ScaleOpts& o) {
    const fs::path out_dir = prepare_out_dir(o.g);
    RunLog run("scale-study");
    ScalingStudyConfig cfg;
    cfg.train = resolve_train(o.train, o.g.seed);
    const LoadedData data = load_manifest_samples(o.data, o.g.threads, run);

    cfg.depths = o.depths;
    for (std::size_t i = 0; i < o.seed_count; ++i) cfg.seeds.push_back(o.g.seed + i);
    cfg.base = resolve_model(o.model, data.samples);
    // The study compares final training loss under a fixed epoch budget, so
    // early stopping is off unless a patience was given explicitly.
    if (o.train.patience_opt != nullptr && o.train.patience_opt->count() == 0) {
        cfg.train.patience = cfg.train.max_epochs;
    }
    cfg.include_mlp_baseline = o.mlp_baseline;
    cfg.mlp_layers = o.mlp_layers;

    run.config = globals_json(o.g, out_dir);
    run.config["data"] = o.data;
    run.config["depths"] = o.depths;
    run.config["seeds"] = cfg.seeds;
    run.config["mlp_baseline"] = o.mlp_baseline;
    run.config["model"] = cfg.base.to_json();
    run.config["train"] = cfg.train.to_json();

    const auto rows = scaling_study(cfg, data.samples, data.samples);

    const fs::path csv_path = out_dir / report_filename(data.name, "all", o.g.seed, "scaling");
    write_text_file(csv_path, scaling_table_csv(rows));
    run.wrote(csv_path);
    json rows_json = json::array();
    for (const auto& row : rows) {
        rows_json.push_back({{"arm", row.arm},
                             {"layers", row.layers},
                             {"parameters", row.parameter_count},
                             {"median_final_loss", row.median_final_loss},
                             {"per_seed_losses", row.per_seed_losses}});
    }
    const fs::path json_path = out_dir / artifact_name(data.name, "all", o.g.seed, "scaling", "json");
    write_text_file(json_path, rows_json.dump(2) + "\n");
    run.wrote(json_path);
    run.finish(out_dir);
    log_info("wrote " + csv_path.string());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lcm: multitask connectome transformer toolkit"};
    app.require_subcommand(1);

    auto fc = std::make_shared<FcOpts>();
    auto* fc_cmd = app.add_subcommand("fc", "Compute a functional-connectivity matrix from a scan");
    add_global_options(fc_cmd, fc->g);
    fc_cmd->add_option("--in", fc->in, "Scan CSV (or an FC CSV, copied through)")
        ->required()
        ->check(CLI::ExistingFile);
    fc_cmd->add_option("--out", fc->out, "Output FC CSV")->required();
    fc_cmd->callback([fc] { cmd_fc(*fc); });

    auto synth = std::make_shared<SynthOpts>();
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic multitask dataset");
    add_global_options(synth_cmd, synth->g);
    synth_cmd->add_option("--config", synth->config, "Generator config JSON")
        ->required()
        ->check(CLI::ExistingFile);
    synth_cmd->callback([synth] { cmd_synth(*synth); });

    auto pre = std::make_shared<PretrainOpts>();
    auto* pre_cmd = app.add_subcommand("pretrain", "Train with subject-level cross-validation");
    add_global_options(pre_cmd, pre->g);
    add_model_options(pre_cmd, pre->model);
    add_train_options(pre_cmd, pre->train);
    pre_cmd->add_option("--data", pre->data, "Dataset manifest JSON")
        ->required()
        ->check(CLI::ExistingFile);
    pre_cmd->add_option("--folds", pre->folds, "Cross-validation folds")->capture_default_str();
    pre_cmd->callback([pre] { cmd_pretrain(*pre); });

    auto ft = std::make_shared<FinetuneOpts>();
    auto* ft_cmd = app.add_subcommand("finetune", "Extend a checkpoint onto downstream tasks");
    add_global_options(ft_cmd, ft->g);
    add_train_options(ft_cmd, ft->train);
    ft_cmd->add_option("--ckpt", ft->ckpt, "Pretrained checkpoint JSON")
        ->required()
        ->check(CLI::ExistingFile);
    ft_cmd->add_option("--data", ft->data, "Downstream dataset manifest")
        ->required()
        ->check(CLI::ExistingFile);
    ft_cmd->add_option("--spec", ft->spec, "Finetune spec JSON (new tasks, pseudo-labels)")
        ->required()
        ->check(CLI::ExistingFile);
    ft_cmd->add_option("--folds", ft->folds, "Cross-validation folds")->capture_default_str();
    ft_cmd->add_option("--fewshot", ft->fewshot, "Fewshot subject ratio, overrides the spec")
        ->check(CLI::Range(0.0, 1.0));
    ft_cmd->add_option("--stratify", ft->stratify,
                       "Downstream task to stratify fewshot subsampling by");
    ft_cmd->callback([ft] { cmd_finetune(*ft); });

    auto ev = std::make_shared<EvalOpts>();
    auto* ev_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset");
    add_global_options(ev_cmd, ev->g);
    ev_cmd->add_option("--ckpt", ev->ckpt, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
    ev_cmd->add_option("--data", ev->data, "Dataset manifest JSON")
        ->required()
        ->check(CLI::ExistingFile);
    ev_cmd->add_option("--folds", ev->folds, "Folds in the split --fold refers to")
        ->capture_default_str();
    ev_cmd->add_option("--fold", ev->fold, "Score only this held-out fold");
    ev_cmd->callback([ev] { cmd_eval(*ev); });

    auto in = std::make_shared<InterpretOpts>();
    auto* in_cmd = app.add_subcommand("interpret", "Export attention maps and best-layer tables");
    add_global_options(in_cmd, in->g);
    in_cmd->add_option("--ckpt", in->ckpt, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
    in_cmd->add_option("--data", in->data, "Dataset manifest JSON")
        ->required()
        ->check(CLI::ExistingFile);
    in_cmd->add_option("--task", in->task, "Task whose attention to aggregate")->required();
    in_cmd->add_flag("--group-by-predicted", in->by_predicted,
                     "Group samples by the model's prediction instead of the label");
    in_cmd->add_option("--folds", in->folds, "Folds in the split --fold refers to")
        ->capture_default_str();
    in_cmd->add_option("--fold", in->fold, "Use only this held-out fold");
    in_cmd->callback([in] { cmd_interpret(*in); });

    auto sc = std::make_shared<ScaleOpts>();
    auto* sc_cmd = app.add_subcommand("scale-study", "Median final loss across model depths");
    add_global_options(sc_cmd, sc->g);
    add_model_options(sc_cmd, sc->model, false);
    add_train_options(sc_cmd, sc->train);
    sc_cmd->add_option("--data", sc->data, "Dataset manifest JSON")
        ->required()
        ->check(CLI::ExistingFile);
    sc_cmd->add_option("--depths", sc->depths, "Depths to train")
        ->delimiter(',')
        ->capture_default_str();
    sc_cmd->add_option("--seeds", sc->seed_count, "Seeds per depth (base seed, base+1, ...)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    sc_cmd->add_flag("--mlp-baseline", sc->mlp_baseline,
                     "Add a residual feed-forward baseline on the flattened FC");
    sc_cmd->add_option("--mlp-layers", sc->mlp_layers, "Baseline residual blocks")
        ->capture_default_str();
    sc_cmd->callback([sc] { cmd_scale_study(*sc); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        std::cerr << app.help() << '\n';
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const DegenerateSignal& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
