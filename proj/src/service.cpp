#include <codembed/evaluator.hpp>
#include <codembed/prefixes.hpp>
#include <codembed/service.hpp>

#include <httplib.h>
#include <json.hpp>

#include <algorithm>

namespace codembed {

using json = nlohmann::ordered_json;

namespace {

HttpReply reply(int status, const json& body) { return HttpReply{status, body.dump()}; }

HttpReply field_errors(int status, const std::vector<std::pair<std::string, std::string>>& errors) {
  json list = json::array();
  for (const auto& [field, message] : errors) list.push_back({{"field", field}, {"message", message}});
  return reply(status, json{{"error", "invalid request"}, {"errors", list}});
}

HttpReply loading() { return reply(503, json{{"status", "loading"}}); }

}  // namespace

void EmbeddingService::load(const std::filesystem::path& checkpoint_dir) {
  CheckpointInfo info;
  EmbeddingModel<float> model = load_model<float>(checkpoint_dir, &info);
  auto loaded = std::make_shared<const Loaded>(Loaded{std::move(model), std::move(info)});
  std::lock_guard lock(mutex_);
  loaded_ = std::move(loaded);
}

bool EmbeddingService::ready() const { return current() != nullptr; }

std::shared_ptr<const EmbeddingService::Loaded> EmbeddingService::current() const {
  std::lock_guard lock(mutex_);
  return loaded_;
}

HttpReply EmbeddingService::health() const {
  const auto m = current();
  if (!m) return loading();
  return reply(200, json{{"status", "ok"},
                         {"model_id", m->info.model_id},
                         {"pooling", std::string(to_string(m->model.config().pooling))},
                         {"d_model", m->model.d_model()},
                         {"dimensions", m->info.loss.matryoshka_dims}});
}

HttpReply EmbeddingService::tasks() const {
  json list = json::array();
  for (TaskType t : kAllTasks) {
    list.push_back({{"task", std::string(to_string(t))},
                    {"query", std::string(prefix_for(t, Role::Query))},
                    {"document", std::string(prefix_for(t, Role::Document))}});
  }
  return reply(200, json{{"tasks", list}});
}

HttpReply EmbeddingService::embed(const std::string& body) const {
  const auto m = current();
  if (!m) return loading();

  json req;
  try {
    req = json::parse(body);
  } catch (const json::parse_error& e) {
    return field_errors(400, {{"body", std::string("malformed JSON: ") + e.what()}});
  }
  if (!req.is_object()) return field_errors(400, {{"body", "request must be a JSON object"}});

  std::vector<std::pair<std::string, std::string>> errors;
  std::vector<std::string> texts;
  if (!req.contains("texts")) {
    errors.emplace_back("texts", "required");
  } else if (!req["texts"].is_array()) {
    errors.emplace_back("texts", "must be an array of strings");
  } else {
    const auto& arr = req["texts"];
    if (arr.size() > kMaxTexts) {
      return field_errors(413, {{"texts", "at most " + std::to_string(kMaxTexts) + " texts per request, got " +
                                              std::to_string(arr.size())}});
    }
    if (arr.empty()) errors.emplace_back("texts", "must contain at least one text");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      if (!arr[i].is_string()) {
        errors.emplace_back("texts[" + std::to_string(i) + "]", "must be a string");
      } else {
        texts.push_back(arr[i].get<std::string>());
      }
    }
  }
  TaskType task{};
  if (!req.contains("task") || !req["task"].is_string()) {
    errors.emplace_back("task", "required string label");
  } else {
    try {
      task = parse_task(req["task"].get<std::string>());
    } catch (const std::invalid_argument& e) {
      errors.emplace_back("task", e.what());
    }
  }
  Role role{};
  if (!req.contains("role") || !req["role"].is_string()) {
    errors.emplace_back("role", "required: \"query\" or \"document\"");
  } else {
    try {
      role = parse_role(req["role"].get<std::string>());
    } catch (const std::invalid_argument& e) {
      errors.emplace_back("role", e.what());
    }
  }
  const auto& allowed = m->info.loss.matryoshka_dims;
  int dims = m->model.d_model();
  if (req.contains("dimensions") && !req["dimensions"].is_null()) {
    if (!req["dimensions"].is_number_integer()) {
      errors.emplace_back("dimensions", "must be an integer");
    } else {
      dims = req["dimensions"].get<int>();
      if (std::find(allowed.begin(), allowed.end(), dims) == allowed.end()) {
        errors.emplace_back("dimensions", "must be one of the trained widths");
      }
    }
  }
  if (!errors.empty()) return field_errors(400, errors);

  std::vector<EncodeInput> inputs;
  inputs.reserve(texts.size());
  for (auto& t : texts) inputs.push_back({task, role, std::move(t)});
  const Matrix<double> raw = m->model.embed_raw(inputs).cast<double>();
  const Matrix<double> vectors = truncate_normalize(raw, dims);

  json out_vectors = json::array();
  for (Index i = 0; i < vectors.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < vectors.cols(); ++j) row.push_back(vectors(i, j));
    out_vectors.push_back(std::move(row));
  }
  return reply(200, json{{"vectors", out_vectors}, {"dimensions", dims}, {"model_id", m->info.model_id}});
}

ServiceHost::ServiceHost() : server_(std::make_unique<httplib::Server>()) {
  auto send = [](httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  server_->Post("/embed", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service_.embed(req.body));
  });
  server_->Get("/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, service_.health()); });
  server_->Get("/tasks", [this, send](const httplib::Request&, httplib::Response& res) { send(res, service_.tasks()); });
}

ServiceHost::~ServiceHost() {
  stop();
  if (loader_.joinable()) loader_.join();
}

int ServiceHost::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = server_->bind_to_any_port(host);
  } else if (!server_->bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  listener_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void ServiceHost::load_async(const std::filesystem::path& checkpoint_dir) {
  loader_ = std::thread([this, checkpoint_dir] {
    try {
      service_.load(checkpoint_dir);
    } catch (const std::exception& e) {
      {
        std::lock_guard lock(error_mutex_);
        load_error_ = e.what();
      }
      server_->stop();
    }
  });
}

std::string ServiceHost::load_error() const {
  std::lock_guard lock(error_mutex_);
  return load_error_;
}

void ServiceHost::wait() {
  if (listener_.joinable()) listener_.join();
}

void ServiceHost::stop() {
  if (server_) server_->stop();
  if (listener_.joinable()) listener_.join();
}

}  // namespace codembed
