#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgi/image_io.hpp"
#include "sgi/training.hpp"

namespace sgi::service {

/// Invalid or inconsistent request fields.
class RequestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ModelNotLoaded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { restore, place, precise_removal, mask_insertion };
std::string to_string(Mode m);
Mode parse_mode(const std::string& s);

struct InpaintRequest {
  PngImage image;
  PngImage mask;  // 0 = hole
  std::optional<PngImage> seg;  // class ids
  Mode mode = Mode::restore;
  std::optional<data::ObjectClass> class_label;
  std::optional<PngImage> instance_mask;
  std::optional<std::array<int, 2>> click;  // (x, y) for precise removal from seg
  uint64_t seed = 0;
  int variants = 1;
};

struct Variant {
  PngImage image;
  PngImage segmentation;
  uint64_t seed = 0;
};

struct InpaintResponse {
  std::vector<Variant> variants;
  double latency_ms = 0.0;
};

/// Throws RequestError when the fields do not fit the mode.
void validate_request(const InpaintRequest& req);

/// Runs one request; variant v uses seed + v. Not reentrant for a shared model.
InpaintResponse handle_inpaint(const InpaintRequest& req, train::LoadedModel* model);

/// JSON wire format with base-64 PNG fields.
InpaintRequest request_from_json(const std::string& body);
std::string request_to_json(const InpaintRequest& req);
std::string response_to_json(const InpaintResponse& resp);
InpaintResponse response_from_json(const std::string& body);

/// Serializes requests against one loaded model.
class InpaintService {
 public:
  explicit InpaintService(std::shared_ptr<train::LoadedModel> model) : model_(std::move(model)) {}
  /// HTTP status and JSON body for a POST /api/inpaint body.
  std::pair<int, std::string> inpaint(const std::string& body);
  std::string health() const;

 private:
  std::shared_ptr<train::LoadedModel> model_;
  std::mutex mu_;
};

/// Blocks serving /api/inpaint and /api/health until stop() is called from another thread.
class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<InpaintService> service);
  ~HttpServer();
  /// Binds and serves; returns false if the port cannot be bound.
  bool listen(const std::string& host, int port);
  /// Binds to a free port and returns it (serve with listen_after_bind).
  int bind_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace sgi::service
