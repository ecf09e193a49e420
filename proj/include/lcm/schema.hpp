#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

namespace lcm {

enum class TaskKind { kCategorical, kContinuous };

struct TaskSpec {
    std::string name;
    TaskKind kind = TaskKind::kCategorical;
    std::size_t class_count = 2;            // exactly 1 for continuous
    std::vector<std::string> class_names;   // optional, size class_count when present
};

// Ordered phenotype tasks. Each task owns the contiguous token rows
// [offset(i), offset(i+1)); a continuous task owns a single token.
class PhenotypeSchema {
public:
    PhenotypeSchema() = default;
    explicit PhenotypeSchema(std::vector<TaskSpec> tasks);

    const std::vector<TaskSpec>& tasks() const { return tasks_; }
    const TaskSpec& task(std::size_t i) const { return tasks_.at(i); }
    std::size_t task_count() const { return tasks_.size(); }

    // Prefix sums of class counts; offsets() has task_count()+1 entries and
    // token_count() is the last one.
    const std::vector<std::size_t>& offsets() const { return offsets_; }
    std::size_t offset(std::size_t task) const { return offsets_.at(task); }
    std::size_t token_count() const { return offsets_.empty() ? 0 : offsets_.back(); }

    bool has_task(const std::string& name) const;
    std::size_t task_index(const std::string& name) const;  // ConfigError if missing

    // Appends new tasks; duplicate names are a ConfigError.
    PhenotypeSchema extended(const std::vector<TaskSpec>& new_tasks) const;

    nlohmann::json to_json() const;
    static PhenotypeSchema from_json(const nlohmann::json& j);

    bool operator==(const PhenotypeSchema& other) const;

private:
    std::vector<TaskSpec> tasks_;
    std::vector<std::size_t> offsets_;
};

bool operator==(const TaskSpec& a, const TaskSpec& b);

}  // namespace lcm
