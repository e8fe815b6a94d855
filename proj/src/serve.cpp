#include "attrobf/serve.hpp"

#include <httplib.h>
#include <openssl/evp.h>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <algorithm>
#include <limits>
#include <set>
#include <stdexcept>

#include "attrobf/errors.hpp"
#include "attrobf/image_io.hpp"
#include "attrobf/losses.hpp"

namespace attrobf {

using json = nlohmann::json;

std::string base64_encode(const std::vector<unsigned char>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<size_t>(n));
  return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("base64 length is not a multiple of 4");
  std::vector<unsigned char> out(3 * (text.size() / 4));
  if (text.empty()) return out;
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw std::invalid_argument("invalid base64 payload");
  size_t pad = 0;
  if (text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<size_t>(n) - pad);
  return out;
}

namespace {

struct RequestError : std::runtime_error {
  RequestError(std::string f, const std::string& what) : std::runtime_error(what), field(std::move(f)) {}
  std::string field;
};

HttpReply error_reply(int status, const std::string& field, const std::string& message) {
  json body = {{"error", message}};
  if (!field.empty()) body["field"] = field;
  return {status, body.dump()};
}

enum class Action { set0, set1, invert, obfuscate };

Action parse_action(const std::string& s, const std::string& field) {
  if (s == "set0") return Action::set0;
  if (s == "set1") return Action::set1;
  if (s == "invert") return Action::invert;
  if (s == "obfuscate") return Action::obfuscate;
  throw RequestError(field, "unknown action '" + s + "' (expected set0, set1, invert or obfuscate)");
}

}  // namespace

ObfuscationService::ObfuscationService(const std::filesystem::path& checkpoint, int crop)
    : started_(std::chrono::steady_clock::now()) {
  CheckpointReader reader(checkpoint);
  version_ = reader.version_tag();
  if (reader.kind() == "stage2") {
    stage2_ = load_stage2(checkpoint);
  } else {
    stage1_ = load_stage1(checkpoint);
  }
  const auto& net = stage1().net;
  if (net.profile != NetProfile::conv) throw std::invalid_argument("the service needs an image model");
  spec_.crop = crop > 0 ? crop : std::numeric_limits<int>::max();
  spec_.resize = static_cast<int>(net.image_size);
  spec_.value_range = net.value_range;

  // Self-test: one forward pass through every network the service will use.
  torch::NoGradGuard guard;
  auto x = torch::zeros({1, net.channels, net.image_size, net.image_size});
  auto s1 = stage1();
  auto out = stage2_ ? Stage2Model(*stage2_).obfuscate(x, 0).x_prime : s1.invert(x, 0);
  if (!torch::isfinite(out).all().item<bool>()) throw StateError("model self-test produced non-finite output");
}

HttpReply ObfuscationService::attrs() const {
  json body = {{"attributes", attr_names()}, {"model_version", version_}, {"supports_obfuscate", supports_obfuscate()}};
  return {200, body.dump()};
}

HttpReply ObfuscationService::health() const {
  const double uptime = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  json body = {{"status", "ok"}, {"model_version", version_}, {"uptime_s", uptime}};
  return {200, body.dump()};
}

HttpReply ObfuscationService::obfuscate(const std::string& request_body) const {
  struct Edit {
    int64_t attr;
    std::string name;
    Action action;
    std::string action_name;
  };
  cv::Mat decoded;
  std::vector<Edit> edits;
  bool want_lambda = false;
  try {
    json req;
    try {
      req = json::parse(request_body);
    } catch (const json::parse_error& e) {
      throw RequestError("", std::string("malformed JSON: ") + e.what());
    }
    if (!req.is_object()) throw RequestError("", "request body must be a JSON object");

    if (!req.contains("image") || !req["image"].is_string()) throw RequestError("image", "missing base64 image string");
    std::vector<unsigned char> bytes;
    try {
      bytes = base64_decode(req["image"].get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw RequestError("image", e.what());
    }
    if (!bytes.empty()) decoded = cv::imdecode(bytes, cv::IMREAD_COLOR);
    if (decoded.empty()) throw RequestError("image", "payload is not a decodable image");

    if (req.contains("return_lambda_map")) {
      if (!req["return_lambda_map"].is_boolean()) throw RequestError("return_lambda_map", "must be a boolean");
      want_lambda = req["return_lambda_map"].get<bool>();
    }
    if (req.contains("edits")) {
      const auto& list = req["edits"];
      if (!list.is_array()) throw RequestError("edits", "must be an array");
      std::set<int64_t> seen;
      for (size_t i = 0; i < list.size(); ++i) {
        const auto field = "edits[" + std::to_string(i) + "]";
        const auto& e = list[i];
        if (!e.is_object()) throw RequestError(field, "must be an object with attr and action");
        if (!e.contains("attr") || !e["attr"].is_string()) throw RequestError(field + ".attr", "missing attribute name");
        if (!e.contains("action") || !e["action"].is_string()) throw RequestError(field + ".action", "missing action");
        const auto name = e["attr"].get<std::string>();
        const auto& names = attr_names();
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw RequestError(field + ".attr", "unknown attribute '" + name + "'");
        const auto idx = static_cast<int64_t>(it - names.begin());
        if (!seen.insert(idx).second) throw RequestError(field + ".attr", "more than one action for '" + name + "'");
        const auto action_name = e["action"].get<std::string>();
        const auto action = parse_action(action_name, field + ".action");
        if (action == Action::obfuscate && !supports_obfuscate())
          throw RequestError(field + ".action", "the loaded model has no obfuscation stage");
        edits.push_back({idx, name, action, action_name});
      }
    }
  } catch (const RequestError& e) {
    return error_reply(400, e.field, e.what());
  }

  try {
    torch::NoGradGuard guard;
    const auto range = value_range();
    auto x = from_mat(center_crop_resize(decoded, spec_.crop, spec_.resize), range).unsqueeze(0);
    torch::Tensor out = x, lam;
    json applied = json::array();
    if (!edits.empty()) {
      auto s1 = stage1();
      auto lat = s1.encoder->forward(x);
      const auto& c = lat.code;
      auto mask = torch::zeros_like(c), values = torch::zeros_like(c);
      bool mix = false;
      for (const auto& e : edits) {
        double v = 0;
        switch (e.action) {
          case Action::set0: v = 0; break;
          case Action::set1: v = 1; break;
          case Action::invert:
          case Action::obfuscate: v = c[0][e.attr].item<double>() > 0.5 ? 0 : 1; break;
        }
        mix = mix || e.action == Action::obfuscate;
        mask[0][e.attr] = 1;
        values[0][e.attr] = v;
        applied.push_back({{"attr", e.name}, {"action", e.action_name}, {"value", static_cast<int>(v)}});
      }
      const auto c_bar = edit_code(c, c, mask, values).c_bar;
      out = s1.decoder->forward(x, lat, c_bar);
      if (mix) {
        auto f = stage2_->mix;
        lam = f->forward(x, out, c, c_bar).lam;
        out = apply_mix(x, out, MixMap{lam});
      }
    }
    json body = {{"image", base64_encode(encode_png(out[0], range))},
                 {"lambda_map", nullptr},
                 {"applied_edits", applied},
                 {"model_version", version_}};
    if (want_lambda && lam.defined()) body["lambda_map"] = base64_encode(encode_gray_png(lam[0][0]));
    return {200, body.dump()};
  } catch (const std::exception& e) {
    return error_reply(500, "", std::string("internal error: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// HTTP front end
// ---------------------------------------------------------------------------

HttpService::HttpService(std::shared_ptr<const ObfuscationService> service, ServeOptions options)
    : service_(std::move(service)), options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  auto& svr = *server_;
  const auto threads = std::max<size_t>(1, options_.threads);
  svr.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  svr.set_payload_max_length(options_.max_payload);
  auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body, "application/json");
  };
  auto svc = service_;
  svr.Get("/attrs", [svc, send](const httplib::Request&, httplib::Response& res) { send(res, svc->attrs()); });
  svr.Get("/health", [svc, send](const httplib::Request&, httplib::Response& res) { send(res, svc->health()); });
  svr.Post("/obfuscate", [svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc->obfuscate(req.body));
  });
  svr.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
    send(res, error_reply(500, "", "internal error"));
  });
  // Errors raised inside httplib itself (413, 404, ...) still get a JSON body.
  svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) res.set_content(json{{"error", httplib::status_message(res.status)}}.dump(), "application/json");
  });
}

HttpService::~HttpService() { stop(); }

int HttpService::bind() {
  const int port = options_.port == 0 ? server_->bind_to_any_port(options_.host)
                                      : (server_->bind_to_port(options_.host, options_.port) ? options_.port : -1);
  if (port < 0) throw IoError("cannot bind " + options_.host + ":" + std::to_string(options_.port));
  return port;
}

void HttpService::listen() { server_->listen_after_bind(); }

void HttpService::stop() {
  if (server_ && server_->is_running()) server_->stop();
}

}  // namespace attrobf
