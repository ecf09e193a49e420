#include "lcm/schema.hpp"

#include <unordered_set>

#include "lcm/errors.hpp"

namespace lcm {

PhenotypeSchema::PhenotypeSchema(std::vector<TaskSpec> tasks) : tasks_(std::move(tasks)) {
    if (tasks_.empty()) {
        throw ConfigError("schema: needs at least one task");
    }
    std::unordered_set<std::string> seen;
    offsets_.reserve(tasks_.size() + 1);
    offsets_.push_back(0);
    for (const auto& t : tasks_) {
        if (t.name.empty()) {
            throw ConfigError("schema: empty task name");
        }
        if (!seen.insert(t.name).second) {
            throw ConfigError("schema: duplicate task name '" + t.name + "'");
        }
        if (t.kind == TaskKind::kCategorical && t.class_count < 2) {
            throw ConfigError("schema: categorical task '" + t.name + "' needs >= 2 classes");
        }
        if (t.kind == TaskKind::kContinuous && t.class_count != 1) {
            throw ConfigError("schema: continuous task '" + t.name + "' must have class_count 1");
        }
        if (!t.class_names.empty() && t.class_names.size() != t.class_count) {
            throw ConfigError("schema: task '" + t.name + "' has " +
                              std::to_string(t.class_names.size()) + " class names for " +
                              std::to_string(t.class_count) + " classes");
        }
        offsets_.push_back(offsets_.back() + t.class_count);
    }
}

bool PhenotypeSchema::has_task(const std::string& name) const {
    for (const auto& t : tasks_) {
        if (t.name == name) return true;
    }
    return false;
}

std::size_t PhenotypeSchema::task_index(const std::string& name) const {
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
        if (tasks_[i].name == name) return i;
    }
    throw ConfigError("schema: unknown task '" + name + "'");
}

PhenotypeSchema PhenotypeSchema::extended(const std::vector<TaskSpec>& new_tasks) const {
    std::vector<TaskSpec> all = tasks_;
    all.insert(all.end(), new_tasks.begin(), new_tasks.end());
    return PhenotypeSchema(std::move(all));
}

nlohmann::json PhenotypeSchema::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : tasks_) {
        nlohmann::json j{
            {"name", t.name},
            {"kind", t.kind == TaskKind::kCategorical ? "categorical" : "continuous"},
            {"class_count", t.class_count},
        };
        if (!t.class_names.empty()) j["classes"] = t.class_names;
        arr.push_back(std::move(j));
    }
    return arr;
}

PhenotypeSchema PhenotypeSchema::from_json(const nlohmann::json& j) {
    if (!j.is_array()) {
        throw ValidationError("schema: expected a JSON array of tasks");
    }
    std::vector<TaskSpec> tasks;
    for (const auto& item : j) {
        TaskSpec t;
        if (!item.contains("name") || !item["name"].is_string()) {
            throw ValidationError("schema: task missing string 'name'");
        }
        t.name = item["name"].get<std::string>();
        const std::string kind = item.value("kind", std::string("categorical"));
        if (kind == "categorical") {
            t.kind = TaskKind::kCategorical;
        } else if (kind == "continuous") {
            t.kind = TaskKind::kContinuous;
        } else {
            throw ValidationError("schema: task '" + t.name + "' has unknown kind '" + kind + "'");
        }
        if (t.kind == TaskKind::kContinuous) {
            t.class_count = 1;
            if (item.contains("class_count") && item["class_count"].get<std::size_t>() != 1) {
                throw ValidationError("schema: continuous task '" + t.name +
                                      "' must have class_count 1");
            }
        } else {
            if (!item.contains("class_count")) {
                throw ValidationError("schema: categorical task '" + t.name +
                                      "' missing class_count");
            }
            t.class_count = item["class_count"].get<std::size_t>();
        }
        if (item.contains("classes")) {
            t.class_names = item["classes"].get<std::vector<std::string>>();
        }
        tasks.push_back(std::move(t));
    }
    return PhenotypeSchema(std::move(tasks));
}

bool operator==(const TaskSpec& a, const TaskSpec& b) {
    return a.name == b.name && a.kind == b.kind && a.class_count == b.class_count &&
           a.class_names == b.class_names;
}

bool PhenotypeSchema::operator==(const PhenotypeSchema& other) const {
    return tasks_ == other.tasks_;
}

}  // namespace lcm
