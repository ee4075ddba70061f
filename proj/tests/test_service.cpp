#include <gtest/gtest.h>

#include <httplib/httplib.h>
#include <nlohmann/json.hpp>

#include <thread>

#include "sgi/service.hpp"
#include "test_util.hpp"

using namespace sgi;
using namespace sgi::service;
using sgi::testing::TempDir;

namespace fs = std::filesystem;

namespace {

fs::path processed() { return sgi::testing::source_dir() / "data/fixture/processed"; }

// A briefly trained narrow model, shared by every test in this file.
std::shared_ptr<train::LoadedModel> model() {
  static std::shared_ptr<train::LoadedModel> m = [] {
    TempDir dir("svc_model");
    train::TrainConfig c = train::overfit_config();
    c.data_dir = processed().string();
    c.width_divisor = 16;
    c.shape_width_divisor = 8;
    c.canonical_size = 16;
    c.latent_dim = 8;
    c.batch_size = 2;
    c.d_scales = 1;
    c.steps = 4;
    c.checkpoint_every = 0;
    train::run_training(c, train::RunOptions{dir.path(), std::nullopt, true});
    return std::make_shared<train::LoadedModel>(train::load_model(dir.path() / "final.bin"));
  }();
  return m;
}

PngImage rect_mask(int w, int h, int x0, int y0, int rw, int rh) {
  PngImage m = make_png(w, h, 1, 8);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(y, x) = (x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh) ? 0 : 255;
  return m;
}

InpaintRequest base_request() {
  InpaintRequest r;
  r.image = read_png(processed() / "images/val/val_00.png");
  r.seg = read_png(processed() / "labels/val/val_00.png");
  r.mask = rect_mask(r.image.width, r.image.height, 16, 20, 24, 20);
  return r;
}

double hole_l1(const PngImage& a, const PngImage& b, const PngImage& mask) {
  double s = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x)
      if (mask.at(y, x) == 0)
        for (int c = 0; c < a.channels; ++c) s += std::abs(a.at(y, x, c) - b.at(y, x, c));
  return s;
}

}  // namespace

TEST(Validation, ModeArguments) {
  InpaintRequest r = base_request();
  EXPECT_NO_THROW(validate_request(r));
  r.mode = Mode::place;
  EXPECT_THROW(validate_request(r), RequestError);
  r.class_label = data::ObjectClass::car;
  EXPECT_NO_THROW(validate_request(r));

  r.mode = Mode::mask_insertion;
  EXPECT_THROW(validate_request(r), RequestError);
  r.instance_mask = make_png(r.image.width, r.image.height, 1, 8);
  EXPECT_THROW(validate_request(r), RequestError);  // empty
  r.instance_mask->at(30, 30) = 255;
  EXPECT_NO_THROW(validate_request(r));

  InpaintRequest p = base_request();
  p.mode = Mode::precise_removal;
  EXPECT_THROW(validate_request(p), RequestError);
  p.click = std::array<int, 2>{10, 10};
  EXPECT_NO_THROW(validate_request(p));
  p.click = std::array<int, 2>{-1, 10};
  EXPECT_THROW(validate_request(p), RequestError);

  InpaintRequest d = base_request();
  d.mask = make_png(8, 8, 1, 8);
  EXPECT_THROW(validate_request(d), RequestError);
  d = base_request();
  d.variants = 0;
  EXPECT_THROW(validate_request(d), RequestError);
}

TEST(Handle, ModelNotLoaded) { EXPECT_THROW(handle_inpaint(base_request(), nullptr), ModelNotLoaded); }

TEST(Handle, RestoreKeepsUnmaskedPixelsBitExact) {
  const auto req = base_request();
  const auto resp = handle_inpaint(req, model().get());
  ASSERT_EQ(resp.variants.size(), 1u);
  const auto& out = resp.variants[0].image;
  ASSERT_EQ(out.width, req.image.width);
  ASSERT_EQ(out.channels, req.image.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      if (req.mask.at(y, x) != 0)
        for (int c = 0; c < out.channels; ++c) ASSERT_EQ(out.at(y, x, c), req.image.at(y, x, c));
  EXPECT_EQ(resp.variants[0].segmentation.width, req.image.width);
}

TEST(Handle, SixteenBitInputStaysSixteenBit) {
  InpaintRequest req = base_request();
  PngImage deep = make_png(req.image.width, req.image.height, 3, 16);
  for (size_t i = 0; i < deep.samples.size(); ++i) deep.samples[i] = static_cast<uint16_t>(req.image.samples[i] * 257 + 3);
  req.image = deep;
  const auto resp = handle_inpaint(req, model().get());
  const auto& out = resp.variants[0].image;
  EXPECT_EQ(out.bit_depth, 16);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      if (req.mask.at(y, x) != 0) ASSERT_EQ(out.at(y, x, 1), deep.at(y, x, 1));
  // and survives the wire
  const auto back = response_from_json(response_to_json(resp));
  EXPECT_EQ(back.variants[0].image.bit_depth, 16);
  EXPECT_EQ(back.variants[0].image.samples, out.samples);
}

TEST(Handle, PlaceVariantsDifferAndAreSeeded) {
  InpaintRequest req = base_request();
  req.mode = Mode::place;
  req.class_label = data::ObjectClass::car;
  req.variants = 3;
  req.seed = 11;
  const auto resp = handle_inpaint(req, model().get());
  ASSERT_EQ(resp.variants.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(resp.variants[static_cast<size_t>(i)].seed, 11u + static_cast<uint64_t>(i));
    for (int j = i + 1; j < 3; ++j)
      EXPECT_GT(hole_l1(resp.variants[static_cast<size_t>(i)].image, resp.variants[static_cast<size_t>(j)].image,
                        req.mask),
                0.0);
  }
  // a single request at seed 12 reproduces the second variant
  InpaintRequest one = req;
  one.variants = 1;
  one.seed = 12;
  EXPECT_EQ(handle_inpaint(one, model().get()).variants[0].image.samples, resp.variants[1].image.samples);
}

TEST(Handle, PreciseRemovalUsesClickedRegion) {
  InpaintRequest req = base_request();
  req.mode = Mode::precise_removal;
  req.mask = rect_mask(req.image.width, req.image.height, 0, 0, 0, 0);  // nothing masked by hand
  req.click = std::array<int, 2>{5, 60};
  const int clicked = req.seg->at(60, 5);
  const auto resp = handle_inpaint(req, model().get());
  const auto& out = resp.variants[0].image;
  // pixels outside the clicked class are never touched
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      if (req.seg->at(y, x) != clicked) ASSERT_EQ(out.at(y, x, 0), req.image.at(y, x, 0));
}

TEST(Handle, MaskWithoutHoleFails) {
  InpaintRequest req = base_request();
  req.mask = rect_mask(req.image.width, req.image.height, 0, 0, 0, 0);
  EXPECT_THROW(handle_inpaint(req, model().get()), RequestError);
}

TEST(Wire, RequestRoundTrip) {
  InpaintRequest r = base_request();
  r.mode = Mode::mask_insertion;
  r.instance_mask = rect_mask(r.image.width, r.image.height, 1, 1, 5, 5);
  r.class_label = data::ObjectClass::pedestrian;
  r.click = std::array<int, 2>{3, 4};
  r.seed = 1234567890123ull;
  r.variants = 5;
  const auto back = request_from_json(request_to_json(r));
  EXPECT_EQ(back.image.samples, r.image.samples);
  EXPECT_EQ(back.mask.samples, r.mask.samples);
  EXPECT_EQ(back.seg->samples, r.seg->samples);
  EXPECT_EQ(back.instance_mask->samples, r.instance_mask->samples);
  EXPECT_EQ(back.mode, r.mode);
  EXPECT_EQ(back.class_label, r.class_label);
  EXPECT_EQ(back.click, r.click);
  EXPECT_EQ(back.seed, r.seed);
  EXPECT_EQ(back.variants, r.variants);
}

TEST(Wire, MalformedRequestsAreRequestErrors) {
  EXPECT_THROW(request_from_json("{"), RequestError);
  EXPECT_THROW(request_from_json("[]"), RequestError);
  EXPECT_THROW(request_from_json(R"({"mask": "AAAA"})"), RequestError);
  EXPECT_THROW(request_from_json(R"({"image": "not png", "mask": "AAAA"})"), RequestError);
  nlohmann::json j = nlohmann::json::parse(request_to_json(base_request()));
  j["mode"] = "teleport";
  EXPECT_THROW(request_from_json(j.dump()), RequestError);
  j["mode"] = "place";
  j["class_label"] = "bicycle";
  EXPECT_THROW(request_from_json(j.dump()), RequestError);
}

// What the editor sends: rectangles and freehand strokes rasterized to a gray PNG.
TEST(Wire, MaskBitmapsSurviveTheWire) {
  const int w = 64, h = 64;
  Tensor rect({1, 1, h, w}, 1.0), stroke({1, 1, h, w}, 1.0);
  for (int y = 10; y < 30; ++y)
    for (int x = 5; x < 45; ++x) rect.at(0, 0, y, x) = 0.0;
  for (int t = 0; t < 200; ++t) {
    const double a = t * 0.05;
    const int cx = 32 + static_cast<int>(20 * std::cos(a) * std::sin(0.5 * a));
    const int cy = 32 + static_cast<int>(20 * std::sin(a));
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx)
        if (dx * dx + dy * dy <= 4) stroke.at(0, 0, cy + dy, cx + dx) = 0.0;
  }
  for (const Tensor* m : {&rect, &stroke}) {
    InpaintRequest r;
    r.image = make_png(w, h, 3, 8);
    r.mask = mask::mask_to_png(*m);
    const auto back = request_from_json(request_to_json(r));
    EXPECT_EQ(mask::mask_from_png(back.mask).storage(), m->storage());
  }
}

TEST(Http, HealthAndInpaint) {
  auto svc = std::make_shared<InpaintService>(model());
  HttpServer server(svc);
  const int port = server.bind_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  httplib::Client cli("127.0.0.1", port);

  const auto health = cli.Get("/api/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  const auto hj = nlohmann::json::parse(health->body);
  EXPECT_EQ(hj["status"], "ok");
  EXPECT_EQ(hj["model_loaded"], true);
  EXPECT_EQ(hj["num_classes"], 17);

  const auto req = base_request();
  const auto ok = cli.Post("/api/inpaint", request_to_json(req), "application/json");
  ASSERT_TRUE(ok);
  EXPECT_EQ(ok->status, 200);
  const auto resp = response_from_json(ok->body);
  ASSERT_EQ(resp.variants.size(), 1u);
  EXPECT_EQ(resp.variants[0].image.samples, handle_inpaint(req, model().get()).variants[0].image.samples);

  const auto bad = cli.Post("/api/inpaint", "{\"image\": 1}", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_TRUE(nlohmann::json::parse(bad->body).contains("error"));

  server.stop();
  th.join();
}

TEST(Http, NoModelIsServiceUnavailable) {
  InpaintService svc(nullptr);
  EXPECT_EQ(nlohmann::json::parse(svc.health())["model_loaded"], false);
  EXPECT_EQ(svc.inpaint(request_to_json(base_request())).first, 503);
}
