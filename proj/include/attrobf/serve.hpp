#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "attrobf/data.hpp"
#include "attrobf/models.hpp"

namespace httplib {
class Server;
}

namespace attrobf {

std::string base64_encode(const std::vector<unsigned char>& bytes);
/// Throws std::invalid_argument on characters outside the alphabet or bad length.
std::vector<unsigned char> base64_decode(const std::string& text);

struct HttpReply {
  int status = 200;
  std::string body;  // JSON
};

/// Request handling over read-only models. Every public method is safe to call
/// from many threads at once.
class ObfuscationService {
 public:
  /// Accepts a stage2 checkpoint (all actions) or a stage1 checkpoint (no obfuscate action).
  /// crop: center-crop side applied before resizing to the model resolution; 0 = shorter image side.
  explicit ObfuscationService(const std::filesystem::path& checkpoint, int crop = 0);

  HttpReply attrs() const;
  HttpReply health() const;
  HttpReply obfuscate(const std::string& request_body) const;

  const std::string& model_version() const { return version_; }
  const std::vector<std::string>& attr_names() const { return stage1().attr_names; }
  ValueRange value_range() const { return stage1().net.value_range; }
  bool supports_obfuscate() const { return stage2_.has_value(); }

 private:
  const Stage1Model& stage1() const { return stage2_ ? stage2_->stage1 : *stage1_; }

  std::optional<Stage1Model> stage1_;
  std::optional<Stage2Model> stage2_;
  PreprocessSpec spec_;
  std::string version_;
  std::chrono::steady_clock::time_point started_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 = pick a free port
  size_t threads = 4;
  size_t max_payload = 8u << 20;
};

/// HTTP front end: GET /attrs, POST /obfuscate, GET /health.
class HttpService {
 public:
  HttpService(std::shared_ptr<const ObfuscationService> service, ServeOptions options);
  ~HttpService();
  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  /// Binds and returns the bound port; throws IoError when binding fails.
  int bind();
  /// Blocks serving requests until stop() is called from another thread.
  void listen();
  /// Stops accepting connections and drains in-flight requests.
  void stop();

 private:
  std::shared_ptr<const ObfuscationService> service_;
  ServeOptions options_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace attrobf
