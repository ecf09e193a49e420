#include "lcm/checkpoint.hpp"

#include <fstream>

#include "lcm/errors.hpp"

namespace lcm {

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw ValidationError("checkpoint: " + message);
}

nlohmann::json shape_json(const std::vector<std::size_t>& shape) {
    nlohmann::json j = nlohmann::json::array();
    for (auto d : shape) j.push_back(d);
    return j;
}

std::vector<std::size_t> shape_from_json(const nlohmann::json& j) {
    require(j.is_array(), "tensor shape must be an array");
    std::vector<std::size_t> shape;
    for (const auto& d : j) {
        require(d.is_number_integer() && d.get<std::int64_t>() > 0,
                "tensor shape entries must be positive integers");
        shape.push_back(d.get<std::size_t>());
    }
    return shape;
}

}  // namespace

Checkpoint snapshot_model(const LcmModel& model) {
    Checkpoint ckpt;
    ckpt.config = model.config();
    for (const auto& p : model.parameters()) {
        TensorRecord rec;
        rec.name = p.name;
        rec.shape = p.tensor.shape();
        rec.values.assign(p.tensor.data().begin(), p.tensor.data().end());
        ckpt.tensors.push_back(std::move(rec));
    }
    return ckpt;
}

LcmModel model_from_checkpoint(const Checkpoint& ckpt) {
    LcmModel model(ckpt.config, 0);
    auto params = model.parameters();
    require(params.size() == ckpt.tensors.size(),
            "tensor list does not match the configured architecture");
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& rec : ckpt.tensors) {
        require(by_name.emplace(rec.name, &rec).second, "duplicate tensor '" + rec.name + "'");
    }
    for (auto& p : params) {
        auto it = by_name.find(p.name);
        require(it != by_name.end(), "missing tensor '" + p.name + "'");
        const TensorRecord& rec = *it->second;
        require(rec.shape == p.tensor.shape(), "tensor '" + p.name + "' has the wrong shape");
        require(rec.values.size() == p.tensor.size(),
                "tensor '" + p.name + "' has the wrong element count");
        auto dst = p.tensor.raw_data();
        for (std::size_t i = 0; i < rec.values.size(); ++i) dst[i] = rec.values[i];
    }
    return model;
}

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
    nlohmann::json j;
    j["format_version"] = ckpt.format_version;
    j["config"] = ckpt.config.to_json();
    j["tensors"] = nlohmann::json::array();
    for (const auto& rec : ckpt.tensors) {
        j["tensors"].push_back(
            {{"name", rec.name}, {"shape", shape_json(rec.shape)}, {"values", rec.values}});
    }
    if (ckpt.optimizer) {
        j["optimizer"] = {{"step", ckpt.optimizer->step},
                          {"m", ckpt.optimizer->m},
                          {"v", ckpt.optimizer->v}};
    } else {
        j["optimizer"] = nullptr;
    }
    j["selection_histograms"] = ckpt.selection_histograms;
    j["target_scalers"] = nlohmann::json::object();
    for (const auto& [task, scaler] : ckpt.target_scalers) {
        j["target_scalers"][task] = {{"mean", scaler.mean}, {"std", scaler.std_dev}};
    }
    j["provenance"] = ckpt.provenance;
    return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    require(j.is_object(), "top level must be an object");
    require(j.contains("format_version") && j["format_version"].is_number_integer(),
            "missing integer 'format_version'");
    Checkpoint ckpt;
    ckpt.format_version = j["format_version"].get<int>();
    require(ckpt.format_version == 1, "unsupported format_version");
    require(j.contains("config"), "missing 'config'");
    ckpt.config = ModelConfig::from_json(j["config"]);
    require(j.contains("tensors") && j["tensors"].is_array(), "missing 'tensors' array");
    for (const auto& t : j["tensors"]) {
        require(t.is_object() && t.contains("name") && t["name"].is_string(),
                "each tensor needs a string 'name'");
        TensorRecord rec;
        rec.name = t["name"].get<std::string>();
        require(t.contains("shape"), "tensor '" + rec.name + "' is missing 'shape'");
        rec.shape = shape_from_json(t["shape"]);
        require(t.contains("values") && t["values"].is_array(),
                "tensor '" + rec.name + "' is missing 'values'");
        for (const auto& v : t["values"]) {
            require(v.is_number(), "tensor '" + rec.name + "' has a non-numeric value");
            rec.values.push_back(v.get<double>());
        }
        ckpt.tensors.push_back(std::move(rec));
    }
    if (j.contains("optimizer") && !j["optimizer"].is_null()) {
        const auto& o = j["optimizer"];
        require(o.is_object() && o.contains("step") && o.contains("m") && o.contains("v"),
                "optimizer state needs 'step', 'm', and 'v'");
        AdamState state;
        state.step = o["step"].get<std::int64_t>();
        state.m = o["m"].get<std::vector<std::vector<double>>>();
        state.v = o["v"].get<std::vector<std::vector<double>>>();
        ckpt.optimizer = std::move(state);
    }
    if (j.contains("selection_histograms")) {
        require(j["selection_histograms"].is_object(), "'selection_histograms' must be an object");
        ckpt.selection_histograms =
            j["selection_histograms"].get<std::map<std::string, std::vector<std::size_t>>>();
    }
    if (j.contains("target_scalers")) {
        require(j["target_scalers"].is_object(), "'target_scalers' must be an object");
        for (const auto& [task, s] : j["target_scalers"].items()) {
            require(s.is_object() && s.contains("mean") && s.contains("std"),
                    "scaler for '" + task + "' needs 'mean' and 'std'");
            ckpt.target_scalers[task] = {s["mean"].get<double>(), s["std"].get<double>()};
        }
    }
    if (j.contains("provenance")) ckpt.provenance = j["provenance"];
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << checkpoint_to_json(ckpt).dump(2) << '\n';
    if (!out) throw IoError("failed writing checkpoint to '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("checkpoint '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return checkpoint_from_json(j);
}

}  // namespace lcm
