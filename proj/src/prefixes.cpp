#include <codembed/prefixes.hpp>

#include <stdexcept>

namespace codembed {

namespace {

struct PrefixPair {
  std::string_view query;
  std::string_view document;
};

constexpr PrefixPair table(TaskType task) {
  switch (task) {
    case TaskType::NL2Code:
      return {"Find the most relevant code snippet given the following query:\n",
              "Candidate code snippet:\n"};
    case TaskType::TechQA:
      return {"Find the most relevant answer given the following question:\n",
              "Candidate answer:\n"};
    case TaskType::Code2Code:
      return {"Find an equivalent code snippet given the following code snippet:\n",
              "Candidate code snippet:\n"};
    case TaskType::Code2NL:
      return {"Find the most relevant comment given the following code snippet:\n",
              "Candidate comment:\n"};
    case TaskType::Code2Completion:
      return {"Find the most relevant completion given the following start of code snippet:\n",
              "Candidate completion:\n"};
  }
  return {};
}

}  // namespace

std::string_view to_string(TaskType task) {
  switch (task) {
    case TaskType::NL2Code: return "nl2code";
    case TaskType::TechQA: return "techqa";
    case TaskType::Code2Code: return "code2code";
    case TaskType::Code2NL: return "code2nl";
    case TaskType::Code2Completion: return "code2completion";
  }
  return "unknown";
}

std::string_view to_string(Role role) { return role == Role::Query ? "query" : "document"; }

TaskType parse_task(std::string_view label) {
  for (TaskType t : kAllTasks) {
    if (to_string(t) == label) return t;
  }
  throw std::invalid_argument("unknown task: \"" + std::string(label) + "\"");
}

Role parse_role(std::string_view label) {
  if (label == "query") return Role::Query;
  if (label == "document") return Role::Document;
  throw std::invalid_argument("unknown role: \"" + std::string(label) + "\"");
}

std::string_view prefix_for(TaskType task, Role role) {
  const PrefixPair p = table(task);
  return role == Role::Query ? p.query : p.document;
}

std::string apply_prefix(TaskType task, Role role, std::string_view text) {
  std::string out(prefix_for(task, role));
  out.append(text);
  return out;
}

}  // namespace codembed
