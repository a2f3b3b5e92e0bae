#pragma once

// Embedding HTTP service: POST /embed, GET /health, GET /tasks.

#include <codembed/checkpoint.hpp>
#include <codembed/model.hpp>

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

namespace httplib {
class Server;
}

namespace codembed {

struct HttpReply {
  int status = 200;
  std::string body;  // JSON
};

/// Request handling independent of the transport. The loaded model is
/// immutable; every request runs its own forward pass.
class EmbeddingService {
 public:
  static constexpr std::size_t kMaxTexts = 256;

  /// Replies 503 until a checkpoint has been loaded.
  EmbeddingService() = default;

  void load(const std::filesystem::path& checkpoint_dir);
  bool ready() const;

  /// Body: {"texts": [...], "task": "<label>", "role": "query"|"document",
  /// "dimensions": optional int}. 400 with field-level messages on schema
  /// violations, 413 for more than kMaxTexts texts.
  HttpReply embed(const std::string& body) const;
  HttpReply health() const;
  HttpReply tasks() const;

 private:
  struct Loaded {
    EmbeddingModel<float> model;
    CheckpointInfo info;
  };
  std::shared_ptr<const Loaded> current() const;

  mutable std::mutex mutex_;
  std::shared_ptr<const Loaded> loaded_;
};

/// HTTP front end around an EmbeddingService.
class ServiceHost {
 public:
  ServiceHost();
  ~ServiceHost();
  ServiceHost(const ServiceHost&) = delete;
  ServiceHost& operator=(const ServiceHost&) = delete;

  EmbeddingService& service() { return service_; }

  /// Binds and starts serving on a background thread; port 0 picks a free
  /// port. Returns the bound port.
  int start(const std::string& host, int port);
  /// Loads the checkpoint on a background thread; /embed answers 503 until done.
  void load_async(const std::filesystem::path& checkpoint_dir);
  /// Blocks until the listener stops.
  void wait();
  void stop();
  /// Empty unless an asynchronous load failed.
  std::string load_error() const;

 private:
  EmbeddingService service_;
  std::unique_ptr<httplib::Server> server_;
  std::thread listener_;
  std::thread loader_;
  mutable std::mutex error_mutex_;
  std::string load_error_;
};

}  // namespace codembed
