#include "sgi/service.hpp"

#include <httplib/httplib.h>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>

#include "sgi/inference.hpp"
#include "sgi/masking.hpp"

namespace sgi::service {

using nlohmann::json;

std::string to_string(Mode m) {
  switch (m) {
    case Mode::restore:
      return "restore";
    case Mode::place:
      return "place";
    case Mode::precise_removal:
      return "precise_removal";
    case Mode::mask_insertion:
      return "mask_insertion";
  }
  return "restore";
}

Mode parse_mode(const std::string& s) {
  if (s == "restore") return Mode::restore;
  if (s == "place") return Mode::place;
  if (s == "precise_removal") return Mode::precise_removal;
  if (s == "mask_insertion") return Mode::mask_insertion;
  throw RequestError("unknown mode: " + s);
}

namespace {

bool any_set(const PngImage& p) {
  for (auto v : p.samples)
    if (v != 0) return true;
  return false;
}

/// Binary map (1 where the first channel is at least half range).
std::vector<uint8_t> binary_of(const PngImage& p) {
  const uint16_t half = p.bit_depth == 16 ? 32768 : 128;
  std::vector<uint8_t> out(static_cast<size_t>(p.width) * p.height);
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x) out[static_cast<size_t>(y) * p.width + x] = p.at(y, x, 0) >= half ? 1 : 0;
  return out;
}

void require_dims(const PngImage& p, const PngImage& ref, const char* what) {
  if (p.width != ref.width || p.height != ref.height)
    throw RequestError(std::string(what) + " is " + std::to_string(p.width) + "x" + std::to_string(p.height) +
                       ", image is " + std::to_string(ref.width) + "x" + std::to_string(ref.height));
}

Tensor image_to_tensor(const PngImage& p) {
  const double maxv = p.bit_depth == 16 ? 65535.0 : 255.0;
  Tensor t({1, 3, p.height, p.width});
  const int64_t hw = static_cast<int64_t>(p.height) * p.width;
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x)
      for (int c = 0; c < 3; ++c)
        t[c * hw + static_cast<int64_t>(y) * p.width + x] = p.at(y, x, p.channels == 3 ? c : 0) / maxv;
  return t;
}

/// Connected region of the clicked pixel's class.
std::vector<uint8_t> flood_region(const std::vector<int32_t>& labels, int w, int h, int cx, int cy) {
  std::vector<uint8_t> out(labels.size(), 0);
  const int32_t cls = labels[static_cast<size_t>(cy) * w + cx];
  std::vector<int> stack{cy * w + cx};
  out[static_cast<size_t>(cy) * w + cx] = 1;
  while (!stack.empty()) {
    const int p = stack.back();
    stack.pop_back();
    const int y = p / w, x = p % w;
    const int nb[4][2] = {{0, 1}, {0, -1}, {1, 0}, {-1, 0}};
    for (const auto& d : nb) {
      const int yy = y + d[0], xx = x + d[1];
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      const size_t q = static_cast<size_t>(yy) * w + xx;
      if (out[q] || labels[q] != cls) continue;
      out[q] = 1;
      stack.push_back(yy * w + xx);
    }
  }
  return out;
}

}  // namespace

void validate_request(const InpaintRequest& req) {
  if (req.image.width <= 0 || req.image.height <= 0) throw RequestError("image is empty");
  require_dims(req.mask, req.image, "mask");
  if (req.seg) require_dims(*req.seg, req.image, "seg");
  if (req.instance_mask) require_dims(*req.instance_mask, req.image, "instance_mask");
  if (req.variants < 1) throw RequestError("variants must be >= 1");
  if (req.variants > 64) throw RequestError("variants must be <= 64");
  switch (req.mode) {
    case Mode::place:
      if (!req.class_label) throw RequestError("place requires class_label");
      break;
    case Mode::mask_insertion:
      if (!req.instance_mask || !any_set(*req.instance_mask))
        throw RequestError("mask_insertion requires a non-empty instance_mask");
      break;
    case Mode::precise_removal:
      if (req.instance_mask) {
        if (!any_set(*req.instance_mask)) throw RequestError("precise_removal instance_mask is empty");
      } else if (!(req.seg && req.click)) {
        throw RequestError("precise_removal requires instance_mask or seg with click");
      } else if ((*req.click)[0] < 0 || (*req.click)[0] >= req.image.width || (*req.click)[1] < 0 ||
                 (*req.click)[1] >= req.image.height) {
        throw RequestError("click lies outside the image");
      }
      break;
    case Mode::restore:
      break;
  }
}

InpaintResponse handle_inpaint(const InpaintRequest& req, train::LoadedModel* model) {
  if (!model) throw ModelNotLoaded("no model loaded");
  validate_request(req);
  const auto t0 = std::chrono::steady_clock::now();
  const int w = req.image.width, h = req.image.height;
  if (w % 16 != 0 || h % 16 != 0) throw RequestError("image dimensions must be multiples of 16");
  const int64_t hw = static_cast<int64_t>(w) * h;
  const int classes = model->num_classes;

  const Tensor image = image_to_tensor(req.image);
  Tensor m = mask::mask_from_png(req.mask);
  std::vector<int32_t> seg_labels;
  Tensor seg({1, classes, h, w});
  if (req.seg) {
    seg_labels.resize(static_cast<size_t>(hw));
    for (int64_t j = 0; j < hw; ++j) {
      const int v = req.seg->samples[static_cast<size_t>(j) * req.seg->channels];
      if (v >= classes) throw RequestError("seg class id " + std::to_string(v) + " exceeds the model's classes");
      seg_labels[static_cast<size_t>(j)] = v;
      seg[v * hw + j] = 1.0;
    }
  }

  Tensor instance({1, 1, h, w});
  if (req.mode == Mode::precise_removal) {
    const auto region = req.instance_mask ? binary_of(*req.instance_mask)
                                          : flood_region(seg_labels, w, h, (*req.click)[0], (*req.click)[1]);
    for (int64_t j = 0; j < hw; ++j)
      if (region[static_cast<size_t>(j)]) m[j] = 0.0;
  } else if (req.mode == Mode::mask_insertion) {
    const auto region = binary_of(*req.instance_mask);
    for (int64_t j = 0; j < hw; ++j) instance[j] = region[static_cast<size_t>(j)];
  }
  const auto hole = infer::hole_bbox(m);
  if (!hole) throw RequestError("mask has no hole pixels");

  InpaintResponse resp;
  for (int v = 0; v < req.variants; ++v) {
    const uint64_t seed = req.seed + static_cast<uint64_t>(v);
    Tensor inst = instance;
    if (req.mode == Mode::place) {
      Rng rng = split_rng(seed, "place");
      const auto box = infer::sample_location(model->prior, *req.class_label, *hole, h, w, rng);
      const auto theta = mask::bbox_theta(box, model->models.gs.cfg.canonical_size);
      inst = infer::generate_instance(model->models, *req.class_label, theta, h, w, rng);
      for (int64_t j = 0; j < hw; ++j) inst[j] *= 1.0 - m[j];
    }
    const auto out = infer::inpaint(model->models, image, seg, m, inst);

    Variant var;
    var.seed = seed;
    var.image = req.image;
    const double maxv = req.image.bit_depth == 16 ? 65535.0 : 255.0;
    for (int64_t j = 0; j < hw; ++j) {
      if (m[j] >= 0.5) continue;
      for (int c = 0; c < req.image.channels; ++c) {
        double val = req.image.channels == 3
                         ? out.composite[c * hw + j]
                         : (out.composite[j] + out.composite[hw + j] + out.composite[2 * hw + j]) / 3.0;
        var.image.samples[static_cast<size_t>(j) * req.image.channels + c] =
            static_cast<uint16_t>(std::lround(std::clamp(val, 0.0, 1.0) * maxv));
      }
    }
    var.segmentation = make_png(w, h, 1, 8);
    for (int64_t j = 0; j < hw; ++j) {
      const bool keep_input = req.seg && m[j] >= 0.5;
      var.segmentation.samples[static_cast<size_t>(j)] =
          static_cast<uint16_t>(keep_input ? seg_labels[static_cast<size_t>(j)] : out.labels[static_cast<size_t>(j)]);
    }
    resp.variants.push_back(std::move(var));
  }
  resp.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return resp;
}

namespace {

PngImage png_field(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) throw RequestError(std::string("missing or non-string field: ") + key);
  try {
    return decode_png(base64_decode(j[key].get<std::string>()));
  } catch (const IoError& e) {
    throw RequestError(std::string(key) + ": " + e.what());
  }
}

std::string png_b64(const PngImage& p) { return base64_encode(encode_png(p)); }

}  // namespace

InpaintRequest request_from_json(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw RequestError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw RequestError("request body must be a JSON object");
  InpaintRequest r;
  r.image = png_field(j, "image");
  r.mask = png_field(j, "mask");
  try {
    if (j.contains("seg") && !j["seg"].is_null()) r.seg = png_field(j, "seg");
    if (j.contains("instance_mask") && !j["instance_mask"].is_null()) r.instance_mask = png_field(j, "instance_mask");
    if (j.contains("mode")) r.mode = parse_mode(j.at("mode").get<std::string>());
    if (j.contains("class_label") && !j["class_label"].is_null()) {
      try {
        r.class_label = data::parse_object_class(j["class_label"].get<std::string>());
      } catch (const std::exception&) {
        throw RequestError("class_label must be car or pedestrian");
      }
    }
    if (j.contains("click") && !j["click"].is_null()) {
      const auto c = j["click"].get<std::vector<int>>();
      if (c.size() != 2) throw RequestError("click must be [x, y]");
      r.click = std::array<int, 2>{c[0], c[1]};
    }
    if (j.contains("seed") && !j["seed"].is_null()) r.seed = j["seed"].get<uint64_t>();
    if (j.contains("variants") && !j["variants"].is_null()) r.variants = j["variants"].get<int>();
  } catch (const json::exception& e) {
    throw RequestError(std::string("bad field type: ") + e.what());
  }
  return r;
}

std::string request_to_json(const InpaintRequest& r) {
  json j;
  j["image"] = png_b64(r.image);
  j["mask"] = png_b64(r.mask);
  if (r.seg) j["seg"] = png_b64(*r.seg);
  if (r.instance_mask) j["instance_mask"] = png_b64(*r.instance_mask);
  j["mode"] = to_string(r.mode);
  if (r.class_label) j["class_label"] = data::to_string(*r.class_label);
  if (r.click) j["click"] = {(*r.click)[0], (*r.click)[1]};
  j["seed"] = r.seed;
  j["variants"] = r.variants;
  return j.dump();
}

std::string response_to_json(const InpaintResponse& resp) {
  json j;
  j["variants"] = json::array();
  for (const auto& v : resp.variants)
    j["variants"].push_back({{"image", png_b64(v.image)}, {"segmentation", png_b64(v.segmentation)}, {"seed", v.seed}});
  j["latency_ms"] = resp.latency_ms;
  return j.dump();
}

InpaintResponse response_from_json(const std::string& body) {
  const json j = json::parse(body);
  InpaintResponse r;
  for (const auto& v : j.at("variants")) {
    Variant var;
    var.image = decode_png(base64_decode(v.at("image").get<std::string>()));
    var.segmentation = decode_png(base64_decode(v.at("segmentation").get<std::string>()));
    var.seed = v.at("seed").get<uint64_t>();
    r.variants.push_back(std::move(var));
  }
  r.latency_ms = j.at("latency_ms").get<double>();
  return r;
}

std::pair<int, std::string> InpaintService::inpaint(const std::string& body) {
  auto error = [](int status, const std::string& msg) { return std::make_pair(status, json{{"error", msg}}.dump()); };
  try {
    const auto req = request_from_json(body);
    std::lock_guard<std::mutex> lock(mu_);
    return {200, response_to_json(handle_inpaint(req, model_.get()))};
  } catch (const RequestError& e) {
    return error(400, e.what());
  } catch (const ModelNotLoaded& e) {
    return error(503, e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
}

std::string InpaintService::health() const {
  json j{{"status", "ok"}, {"model_loaded", model_ != nullptr}};
  if (model_) {
    j["image_size"] = train::effective_image_size(model_->cfg);
    j["num_classes"] = model_->num_classes;
    j["profile"] = model_->cfg.profile;
  }
  return j.dump();
}

struct HttpServer::Impl {
  httplib::Server server;
  std::shared_ptr<InpaintService> service;
};

HttpServer::HttpServer(std::shared_ptr<InpaintService> service) : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  auto& svr = impl_->server;
  auto svc = impl_->service;
  svr.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  svr.Get("/api/health", [svc](const httplib::Request&, httplib::Response& res) {
    res.set_content(svc->health(), "application/json");
  });
  svr.Post("/api/inpaint", [svc](const httplib::Request& req, httplib::Response& res) {
    const auto [status, body] = svc->inpaint(req.body);
    res.status = status;
    res.set_content(body, "application/json");
  });
  svr.Options("/api/inpaint", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

HttpServer::~HttpServer() = default;

bool HttpServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }
int HttpServer::bind_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }
bool HttpServer::listen_after_bind() { return impl_->server.listen_after_bind(); }
void HttpServer::stop() { impl_->server.stop(); }

}  // namespace sgi::service
