#pragma once

#include <array>
#include <string>
#include <string_view>

namespace codembed {

enum class TaskType { NL2Code, TechQA, Code2Code, Code2NL, Code2Completion };
enum class Role { Query, Document };

inline constexpr std::array<TaskType, 5> kAllTasks = {
    TaskType::NL2Code, TaskType::TechQA, TaskType::Code2Code, TaskType::Code2NL,
    TaskType::Code2Completion};

/// Lowercase label used in every file format and API: `nl2code`, `techqa`, ...
std::string_view to_string(TaskType task);
std::string_view to_string(Role role);

/// Throws std::invalid_argument("unknown task: ...") for labels outside the closed set.
TaskType parse_task(std::string_view label);
Role parse_role(std::string_view label);

/// Instruction string prepended to text of the given task and role. Every
/// string ends with a line feed.
std::string_view prefix_for(TaskType task, Role role);

std::string apply_prefix(TaskType task, Role role, std::string_view text);

}  // namespace codembed
