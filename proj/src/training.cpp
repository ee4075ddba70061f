#include "sgi/training.hpp"

#include <CLI11/CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

namespace sgi::train {

namespace fs = std::filesystem;
using namespace sgi::nn;

namespace {

template <class F>
void for_each_field(TrainConfig& c, F&& f) {
  f("profile", c.profile);
  f("data_dir", c.data_dir);
  f("split", c.split);
  f("manifest", c.manifest);
  f("mask_mode", c.mask_mode);
  f("batch_size", c.batch_size);
  f("lr", c.lr);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("epochs", c.epochs);
  f("steps", c.steps);
  f("seed", c.seed);
  f("device", c.device);
  f("checkpoint_every", c.checkpoint_every);
  f("log_every", c.log_every);
  f("pretrain_shape_steps", c.pretrain_shape_steps);
  f("lambda_rec", c.lambda_rec);
  f("lambda_perc", c.lambda_perc);
  f("lambda_fm", c.lambda_fm);
  f("lambda_cross", c.lambda_cross);
  f("lambda_style", c.lambda_style);
  f("lambda_adv", c.lambda_adv);
  f("lambda_vae", c.lambda_vae);
  f("lambda_inst_rec", c.lambda_inst_rec);
  f("lambda_shape_adv", c.lambda_shape_adv);
  f("image_size", c.image_size);
  f("width_divisor", c.width_divisor);
  f("d_scales", c.d_scales);
  f("canonical_size", c.canonical_size);
  f("latent_dim", c.latent_dim);
  f("shape_width_divisor", c.shape_width_divisor);
  f("use_spade", c.use_spade);
  f("learned_skip", c.learned_skip);
  f("use_semantic_encoder", c.use_semantic_encoder);
  f("norm", c.norm);
  f("extractor", c.extractor);
}

std::string format_value(const std::string& v) { return v.empty() ? "\"\"" : v; }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(int v) { return std::to_string(v); }
std::string format_value(uint64_t v) { return std::to_string(v); }
std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void bind(CLI::App& app, TrainConfig& c) {
  for_each_field(c, [&](const char* name, auto& field) { app.add_option(std::string("--") + name, field); });
}

void apply_overrides(TrainConfig& c, const std::vector<std::string>& overrides) {
  if (overrides.empty()) return;
  CLI::App app;
  bind(app, c);
  std::vector<std::string> args;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw TrainError("override must be key=value: " + o);
    std::string key = o.substr(0, eq), value = o.substr(eq + 1);
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    args.push_back("--" + trim(key) + "=" + trim(value));
  }
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    throw TrainError(std::string("config override: ") + e.what());
  }
}

int divided(int width, int divisor) { return std::max(1, width / divisor); }

}  // namespace

obj::LossWeights TrainConfig::weights() const {
  obj::LossWeights w;
  w.rec = lambda_rec;
  w.perc = lambda_perc;
  w.fm = lambda_fm;
  w.cross = lambda_cross;
  w.style = lambda_style;
  w.adv = lambda_adv;
  w.vae = lambda_vae;
  w.inst_rec = lambda_inst_rec;
  w.shape_adv = lambda_shape_adv;
  return w;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw TrainError("lr must be positive");
  if (batch_size < 1) throw TrainError("batch_size must be >= 1");
  if (steps < 0 || epochs < 0) throw TrainError("steps and epochs must be non-negative");
  if (checkpoint_every < 0 || log_every < 1) throw TrainError("checkpoint_every >= 0 and log_every >= 1 required");
  if (mask_mode != "restore" && mask_mode != "place" && mask_mode != "mixed")
    throw TrainError("mask_mode must be restore, place or mixed");
  if (device != "cpu") throw TrainError("unsupported device: " + device);
  if (width_divisor < 1 || shape_width_divisor < 1 || d_scales < 1) throw TrainError("divisors and d_scales must be >= 1");
  if (norm != "instance" && norm != "batch") throw TrainError("norm must be instance or batch");
  const double ls[] = {lambda_rec, lambda_perc, lambda_fm, lambda_cross, lambda_style,
                       lambda_adv, lambda_vae,  lambda_inst_rec, lambda_shape_adv};
  for (double l : ls)
    if (!(l >= 0.0)) throw TrainError("loss weights must be non-negative");
  data::profile_by_name(profile);
}

TrainConfig parse_train_config(const std::string& text, const std::vector<std::string>& overrides) {
  TrainConfig c;
  CLI::App app;
  app.allow_config_extras(false);
  bind(app, c);
  std::istringstream in(text);
  try {
    app.parse_from_stream(in);
  } catch (const CLI::Error& e) {
    throw TrainError(std::string("config: ") + e.what());
  }
  apply_overrides(c, overrides);
  c.validate();
  return c;
}

TrainConfig load_train_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw TrainError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  return parse_train_config(text, overrides);
}

std::string to_config_text(const TrainConfig& cfg) {
  TrainConfig c = cfg;
  std::string out;
  for_each_field(c, [&](const char* name, auto& field) { out += std::string(name) + " = " + format_value(field) + "\n"; });
  return out;
}

TrainConfig overfit_config() {
  TrainConfig c;
  c.profile = "fixture";
  c.data_dir = "data/fixture/processed";
  c.manifest = "auto";
  c.steps = 200;
  c.batch_size = 4;
  c.checkpoint_every = 50;
  c.width_divisor = 8;
  c.canonical_size = 32;
  c.shape_width_divisor = 4;
  return c;
}

int effective_image_size(const TrainConfig& c) {
  return c.image_size > 0 ? c.image_size : data::profile_by_name(c.profile).image_size;
}

gen::GeneratorConfig generator_config(const TrainConfig& c, int num_classes) {
  gen::GeneratorConfig g;
  g.num_classes = num_classes;
  g.image_size = effective_image_size(c);
  for (auto& w : g.enc_widths) w = divided(w, c.width_divisor);
  for (auto& w : g.dec_widths) w = divided(w, c.width_divisor);
  g.final_width = divided(g.final_width, c.width_divisor);
  g.spade_hidden = divided(g.spade_hidden, c.width_divisor);
  g.use_spade = c.use_spade;
  g.learned_skip = c.learned_skip;
  g.use_semantic_encoder = c.use_semantic_encoder;
  g.norm = gen::parse_norm_kind(c.norm);
  return g;
}

obj::DiscriminatorConfig discriminator_config(const TrainConfig& c, int num_classes) {
  obj::DiscriminatorConfig d;
  d.in_channels = 3 + num_classes;
  for (auto& w : d.widths) w = divided(w, c.width_divisor);
  d.num_scales = c.d_scales;
  return d;
}

shape::ShapeNetConfig shape_config(const TrainConfig& c) {
  shape::ShapeNetConfig s;
  s.canonical_size = c.canonical_size;
  s.latent_dim = c.latent_dim;
  s.enc_width = divided(s.enc_width, c.shape_width_divisor);
  s.gen_width = divided(s.gen_width, c.shape_width_divisor);
  s.disc_width = divided(s.disc_width, c.shape_width_divisor);
  return s;
}

size_t LocationPrior::size() const {
  size_t n = 0;
  for (const auto& s : samples) n += s.size();
  return n;
}

std::vector<ParamRef> Models::generator_params() {
  Registry r;
  r.child("g", g);
  r.child("es", es);
  r.child("gs", gs);
  return r.params();
}

std::vector<ParamRef> Models::discriminator_params() {
  Registry r;
  r.child("d", d);
  r.child("ds", ds);
  return r.params();
}

std::vector<BufferRef> Models::buffers() {
  Registry r;
  r.child("g", g);
  r.child("es", es);
  r.child("gs", gs);
  r.child("d", d);
  r.child("ds", ds);
  return r.buffers();
}

std::shared_ptr<obj::FeatureExtractor> make_extractor(const std::string& name) {
  if (name == "stub") return std::make_shared<obj::StubExtractor>();
  if (name == "identity") return std::make_shared<obj::IdentityExtractor>();
  throw TrainError("feature extractor unavailable: " + name);
}

Models build_models(const TrainConfig& c, int num_classes) {
  Models m;
  m.g = gen::InpaintGenerator(generator_config(c, num_classes));
  m.d = obj::MultiScaleDiscriminator(discriminator_config(c, num_classes));
  const auto sc = shape_config(c);
  m.es = shape::ShapeEncoder(sc);
  m.gs = shape::ShapeGenerator(sc);
  m.ds = shape::ShapeDiscriminator(sc);
  m.fx = make_extractor(c.extractor);
  Rng rg = split_rng(c.seed, "init/g");
  m.g.init(rg);
  Rng rd = split_rng(c.seed, "init/d");
  m.d.init(rd);
  Rng re = split_rng(c.seed, "init/es");
  m.es.init(re);
  Rng rs = split_rng(c.seed, "init/gs");
  m.gs.init(rs);
  Rng rds = split_rng(c.seed, "init/ds");
  m.ds.init(rds);
  return m;
}

std::vector<Sample> load_samples(const TrainConfig& c, const data::DatasetProfile& profile) {
  const int size = effective_image_size(c);
  const auto split = data::parse_split(c.split);
  std::vector<Sample> out;
  for (const auto& id : data::list_scene_ids(c.data_dir, split)) {
    Sample s;
    s.scene = data::load_scene(c.data_dir, split, id);
    if (s.scene.height != size || s.scene.width != size)
      throw TrainError("scene " + id + " is " + std::to_string(s.scene.height) + "x" + std::to_string(s.scene.width) +
                       ", expected " + std::to_string(size) + "x" + std::to_string(size) + " (run prepare first)");
    for (int32_t l : s.scene.labels)
      if (l < 0 || l >= profile.aggregation.num_groups)
        throw TrainError("scene " + id + " has label " + std::to_string(l) + " outside the profile's classes");
    s.instances = data::index_instances(s.scene, profile, profile.min_instance_pixels, profile.max_occlusion);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw TrainError("no scenes under " + c.data_dir + " for split " + c.split);
  return out;
}

LocationPrior fit_location_prior(const std::vector<Sample>& samples) {
  LocationPrior p;
  for (const auto& s : samples)
    for (const auto& r : s.instances) p.add(r.class_label, mask::bbox_location(r.bbox, s.scene.height));
  return p;
}

std::optional<data::InstanceRecord> supervising_instance(const Sample& s, const mask::MaskRect& rect) {
  std::optional<data::InstanceRecord> best;
  int64_t best_count = 0;
  for (const auto& r : s.instances) {
    int64_t count = 0;
    for (int y = std::max(rect.y, r.bbox.y); y < std::min(rect.y + rect.h, r.bbox.y + r.bbox.h); ++y)
      for (int x = std::max(rect.x, r.bbox.x); x < std::min(rect.x + rect.w, r.bbox.x + r.bbox.w); ++x)
        if (s.scene.instance(y, x) == r.instance_id) ++count;
    if (count == 0) continue;
    if (rect.target_instance && *rect.target_instance == r.instance_id) return r;
    if (count > best_count) {
      best = r;
      best_count = count;
    }
  }
  return best;
}

TrainBatch build_batch(const std::vector<const Sample*>& samples, const std::vector<mask::MaskRect>& rects,
                       int num_classes, int canonical) {
  if (samples.empty() || samples.size() != rects.size()) throw TrainError("build_batch: samples and masks differ");
  std::vector<Var> xg, xi, sg, sb, ms;
  TrainBatch b;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = *samples[i];
    const auto masked = mask::apply_mask(s.scene, rects[i], num_classes);
    Tensor x = mask::image_tensor(s.scene);
    for (auto& v : x.values()) v = 2.0 * v - 1.0;
    Tensor x_in = x;
    const int64_t hw = x.dim(2) * x.dim(3);
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t j = 0; j < hw; ++j) x_in[c * hw + j] *= masked.m[j];
    xg.emplace_back(x);
    xi.emplace_back(x_in);
    sg.emplace_back(mask::one_hot(s.scene, num_classes));
    sb.emplace_back(masked.s_blanked);
    ms.emplace_back(masked.m);
    b.rects.push_back(rects[i]);
    const auto inst = supervising_instance(s, rects[i]);
    b.specs.emplace_back();
    if (inst) b.specs.back().emplace(mask::extract_instance_spec(s.scene, *inst, canonical));
  }
  NoGradGuard guard;
  b.x_gt = concat_batch(xg).value();
  b.x_in = concat_batch(xi).value();
  b.s_gt = concat_batch(sg).value();
  b.s_blanked = concat_batch(sb).value();
  b.m = concat_batch(ms).value();
  return b;
}

ShapeBranch run_shape_branch(Models& models, const TrainBatch& b, Rng& rng, int image_size) {
  ShapeBranch out;
  const int64_t n = b.x_gt.dim(0);
  std::vector<mask::InstanceSpec> specs;
  std::vector<Affine> thetas;
  for (const auto& s : b.specs)
    if (s) {
      specs.push_back(*s);
      thetas.push_back(s->theta);
    }
  if (specs.empty()) {
    out.instance = Var(Tensor({n, 1, image_size, image_size}));
    return out;
  }
  out.active = true;
  out.m_s = Var(shape::canonical_masks(specs));
  out.post = models.es(Var(shape::shape_inputs(specs, image_size)));
  Var z = shape::sample_latent(out.post, rng);
  out.m_hat = models.gs(z, Var(shape::shape_conditions(specs, image_size)));
  Var placed = place_canonical(out.m_hat, thetas, image_size, image_size);
  std::vector<Var> parts;
  int64_t k = 0;
  for (const auto& s : b.specs) {
    if (s)
      parts.push_back(slice_batch(placed, k++, 1));
    else
      parts.push_back(Var(Tensor({1, 1, image_size, image_size})));
  }
  out.instance = concat_batch(parts);
  return out;
}

Trainer::Trainer(TrainConfig c, int classes)
    : cfg(std::move(c)),
      num_classes(classes),
      models(build_models(cfg, classes)),
      opt_g(models.generator_params(), AdamOptions{cfg.lr, cfg.beta1, cfg.beta2, 1e-8}),
      opt_d(models.discriminator_params(), AdamOptions{cfg.lr, cfg.beta1, cfg.beta2, 1e-8}),
      rng(split_rng(cfg.seed, "trainer")) {}

namespace {

void check_finite(std::map<std::string, Var>& terms, const std::string& inject) {
  for (auto& [name, v] : terms) {
    if (name == inject) v.mutable_value()[0] = std::nan("");
    if (!std::isfinite(v.item())) throw TrainError("non-finite loss term: " + name);
  }
}

std::vector<std::vector<Var>> drop_patch_maps(const std::vector<std::vector<Var>>& acts) {
  std::vector<std::vector<Var>> out;
  for (const auto& a : acts) out.emplace_back(a.begin(), a.end() - 1);
  return out;
}

}  // namespace

StepResult Trainer::step(const TrainBatch& b) {
  const auto w = cfg.weights();
  const int size = effective_image_size(cfg);
  const int64_t n = b.x_gt.dim(0);
  Rng srng = split_rng(cfg.seed, "step/" + std::to_string(step_count));
  const bool shape_only = step_count < cfg.pretrain_shape_steps;

  Var x_gt(b.x_gt), s_gt(b.s_gt), m(b.m);
  Tensor hole_t = b.m;
  for (auto& v : hole_t.values()) v = 1.0 - v;
  Var hole(hole_t);

  ShapeBranch sb = run_shape_branch(models, b, srng, size);
  StepResult res;
  auto& terms = res.bundle.terms;
  for (const auto& t : obj::kGeneratorTerms) terms[t] = 0.0;
  terms["adv_D"] = 0.0;
  for (const auto& t : obj::kShapeTerms) res.shape_terms[t] = 0.0;
  res.shape_terms["shape_adv_D"] = 0.0;

  gen::GenerationOutput out;
  Var x_comp, real_in;
  if (!shape_only) {
    out = models.g(Var(b.x_in), m, Var(b.s_blanked), sb.instance);
    x_comp = add(mul_bcast(x_gt, m), mul_bcast(out.x_filled, hole));
    real_in = concat_channels({x_gt, s_gt});
  }

  // Discriminator update.
  {
    std::map<std::string, Var> d_terms;
    if (!shape_only) {
      models.d.set_update_estimate(true);
      const auto acts = models.d(concat_batch({real_in, concat_channels({x_comp.detach(), s_gt})}));
      std::vector<Var> real_maps, fake_maps;
      for (const auto& a : acts) {
        real_maps.push_back(slice_batch(a.back(), 0, n));
        fake_maps.push_back(slice_batch(a.back(), n, n));
      }
      d_terms["adv_D"] = obj::lsgan_d_loss(real_maps, fake_maps);
    }
    if (sb.active) d_terms["shape_adv_D"] = shape::shape_adversarial(models.ds(sb.m_s), models.ds(sb.m_hat.detach())).d_loss;
    check_finite(d_terms, inject_nonfinite);
    if (!d_terms.empty()) {
      Var total;
      for (auto& [name, v] : d_terms) total = total.defined() ? add(total, v) : v;
      opt_d.zero_grad();
      total.backward();
      opt_d.step();
    }
    if (d_terms.count("adv_D")) terms["adv_D"] = d_terms["adv_D"].item();
    if (d_terms.count("shape_adv_D")) res.shape_terms["shape_adv_D"] = d_terms["shape_adv_D"].item();
  }

  // Generator update (G, E_s, G_s).
  std::map<std::string, Var> g_terms, s_terms;
  if (!shape_only) {
    models.d.set_update_estimate(false);
    std::vector<std::vector<Var>> real_acts;
    {
      NoGradGuard guard;
      real_acts = models.d(real_in);
    }
    const auto fake_acts = models.d(concat_channels({x_comp, s_gt}));
    models.d.set_update_estimate(true);
    g_terms["adv_G"] = obj::lsgan_g_loss(obj::patch_maps(fake_acts));
    g_terms["feature_match"] = obj::feature_matching_loss(drop_patch_maps(real_acts), drop_patch_maps(fake_acts));
    g_terms["pixel_rec"] = obj::pixel_rec_loss(out.x_filled, x_gt, b.m);
    g_terms["perceptual"] = obj::perceptual_loss(out.x_filled, x_gt, *models.fx);
    g_terms["style"] = obj::style_loss(out.x_filled, x_gt, *models.fx);
    g_terms["seg_ms"] = obj::seg_multiscale_loss(out.scale_segs, s_gt);
  }
  if (sb.active) {
    const auto sl = shape::shape_losses(sb.m_s, sb.m_hat, sb.post);
    Var d_fake = models.ds(sb.m_hat);
    s_terms["shape_vae"] = sl.vae;
    s_terms["shape_rec"] = sl.rec;
    s_terms["shape_adv_G"] = shape::shape_adversarial(d_fake, d_fake).g_loss;
  }
  check_finite(g_terms, inject_nonfinite);
  check_finite(s_terms, inject_nonfinite);

  Var total;
  if (!g_terms.empty()) total = obj::weighted_generator_total(g_terms, w);
  if (!s_terms.empty()) {
    Var st = obj::weighted_shape_total(s_terms, w);
    total = total.defined() ? add(total, st) : st;
  }
  if (total.defined()) {
    opt_g.zero_grad();
    total.backward();
    opt_g.step();
  }
  for (auto& [name, v] : g_terms) terms[name] = v.item();
  for (auto& [name, v] : s_terms) res.shape_terms[name] = v.item();
  obj::total_losses(res.bundle, w);
  ++step_count;
  return res;
}

std::vector<const Sample*> Trainer::next_samples(const std::vector<Sample>& all) {
  const int64_t n = static_cast<int64_t>(all.size());
  const int64_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t epoch = step_count / per_epoch, pos = step_count % per_epoch;
  std::vector<int64_t> perm(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  Rng r = split_rng(cfg.seed, "epoch/" + std::to_string(epoch));
  // Fisher-Yates with our own draws keeps the order independent of the standard library.
  for (int64_t i = n - 1; i > 0; --i) std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(uniform_int(r, 0, static_cast<int>(i)))]);
  std::vector<const Sample*> out;
  for (int64_t k = 0; k < cfg.batch_size; ++k) out.push_back(&all[static_cast<size_t>(perm[static_cast<size_t>((pos * cfg.batch_size + k) % n)])]);
  return out;
}

std::vector<mask::MaskRect> Trainer::next_rects(const std::vector<const Sample*>& samples) {
  const int size = effective_image_size(cfg);
  std::vector<mask::MaskRect> out;
  for (const auto* s : samples) {
    auto it = fixed_masks.find(s->scene.id);
    if (it != fixed_masks.end()) {
      out.push_back(it->second);
      continue;
    }
    Rng r = split_rng(cfg.seed, "mask/" + std::to_string(step_count) + "/" + s->scene.id);
    bool place = cfg.mask_mode == "place" || (cfg.mask_mode == "mixed" && uniform_int(r, 0, 1) == 1);
    out.push_back(place ? mask::sample_place_mask(r, s->instances, size) : mask::sample_restore_mask(r, size));
  }
  return out;
}

// Checkpoint format: magic, then length-prefixed records.
namespace {

constexpr char kMagic[8] = {'S', 'G', 'I', 'C', 'K', 'P', 'T', '1'};

class Writer {
 public:
  explicit Writer(std::ostream& o) : out_(o) {}
  void u64(uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void f64(double v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const Tensor& t) {
    u64(static_cast<uint64_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) u64(static_cast<uint64_t>(t.dim(i)));
    out_.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  void tensors(const std::map<std::string, Tensor>& m) {
    u64(m.size());
    for (const auto& [k, v] : m) {
      str(k);
      tensor(v);
    }
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& i, std::string src) : in_(i), src_(std::move(src)) {}
  uint64_t u64() {
    uint64_t v = 0;
    read(&v, sizeof v);
    return v;
  }
  double f64() {
    double v = 0;
    read(&v, sizeof v);
    return v;
  }
  std::string str() {
    const uint64_t n = u64();
    if (n > (1ull << 30)) fail();
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  Tensor tensor() {
    const uint64_t rank = u64();
    if (rank > 8) fail();
    Shape shape;
    for (uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(u64()));
    Tensor t(shape);
    read(t.data(), static_cast<size_t>(t.numel()) * sizeof(double));
    return t;
  }
  std::map<std::string, Tensor> tensors() {
    std::map<std::string, Tensor> m;
    const uint64_t n = u64();
    for (uint64_t i = 0; i < n; ++i) {
      std::string k = str();
      m[k] = tensor();
    }
    return m;
  }

 private:
  void read(void* p, size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) fail();
  }
  [[noreturn]] void fail() { throw TrainError("truncated or corrupt checkpoint: " + src_); }
  std::istream& in_;
  std::string src_;
};

struct CheckpointData {
  std::string config;
  int num_classes = 0;
  int64_t step = 0;
  std::string rng;
  std::map<std::string, Tensor> params, buffers;
  int64_t g_steps = 0, d_steps = 0;
  std::map<std::string, Tensor> g_m, g_v, d_m, d_v;
  LocationPrior prior;
};

std::map<std::string, Tensor> values_of(const std::vector<ParamRef>& ps) {
  std::map<std::string, Tensor> m;
  for (const auto& p : ps) m[p.name] = p.var.value();
  return m;
}

CheckpointData read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TrainError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw TrainError("not a checkpoint: " + path.string());
  Reader r(in, path.string());
  CheckpointData d;
  d.config = r.str();
  d.num_classes = static_cast<int>(r.u64());
  d.step = static_cast<int64_t>(r.u64());
  d.rng = r.str();
  d.params = r.tensors();
  d.buffers = r.tensors();
  d.g_steps = static_cast<int64_t>(r.u64());
  d.g_m = r.tensors();
  d.g_v = r.tensors();
  d.d_steps = static_cast<int64_t>(r.u64());
  d.d_m = r.tensors();
  d.d_v = r.tensors();
  for (auto& cls : d.prior.samples) {
    const uint64_t n = r.u64();
    for (uint64_t i = 0; i < n; ++i) {
      std::array<double, 4> l{};
      for (auto& v : l) v = r.f64();
      cls.push_back(l);
    }
  }
  return d;
}

void restore_models(Models& m, const CheckpointData& d) {
  std::vector<ParamRef> params = m.generator_params();
  const auto dp = m.discriminator_params();
  params.insert(params.end(), dp.begin(), dp.end());
  for (auto& p : params) {
    auto it = d.params.find(p.name);
    if (it == d.params.end()) throw TrainError("checkpoint lacks parameter " + p.name);
    if (!it->second.same_shape(p.var.value()))
      throw TrainError("checkpoint parameter " + p.name + " has shape " + shape_str(it->second.shape()));
    p.var.mutable_value() = it->second;
  }
  for (auto& b : m.buffers()) {
    auto it = d.buffers.find(b.name);
    if (it == d.buffers.end()) throw TrainError("checkpoint lacks buffer " + b.name);
    *b.tensor = it->second;
  }
}

}  // namespace

void Trainer::save(const fs::path& path) const {
  auto& self = const_cast<Trainer&>(*this);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw TrainError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, 8);
    Writer w(out);
    w.str(to_config_text(cfg));
    w.u64(static_cast<uint64_t>(num_classes));
    w.u64(static_cast<uint64_t>(step_count));
    w.str(rng_state(rng));
    auto params = values_of(self.models.generator_params());
    for (auto& [k, v] : values_of(self.models.discriminator_params())) params[k] = v;
    w.tensors(params);
    std::map<std::string, Tensor> buffers;
    for (const auto& b : self.models.buffers()) buffers[b.name] = *b.tensor;
    w.tensors(buffers);
    w.u64(static_cast<uint64_t>(opt_g.steps()));
    w.tensors(self.opt_g.first_moments());
    w.tensors(self.opt_g.second_moments());
    w.u64(static_cast<uint64_t>(opt_d.steps()));
    w.tensors(self.opt_d.first_moments());
    w.tensors(self.opt_d.second_moments());
    for (const auto& cls : prior.samples) {
      w.u64(cls.size());
      for (const auto& l : cls)
        for (double v : l) w.f64(v);
    }
    if (!out) throw TrainError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void Trainer::load(const fs::path& path) {
  const auto d = read_checkpoint(path);
  if (d.num_classes != num_classes) throw TrainError("checkpoint class count differs: " + path.string());
  restore_models(models, d);
  step_count = d.step;
  set_rng_state(rng, d.rng);
  opt_g.set_steps(d.g_steps);
  opt_g.first_moments() = d.g_m;
  opt_g.second_moments() = d.g_v;
  opt_d.set_steps(d.d_steps);
  opt_d.first_moments() = d.d_m;
  opt_d.second_moments() = d.d_v;
  prior = d.prior;
}

LoadedModel load_model(const fs::path& checkpoint) {
  const auto d = read_checkpoint(checkpoint);
  LoadedModel lm;
  lm.cfg = parse_train_config(d.config);
  lm.num_classes = d.num_classes;
  lm.models = build_models(lm.cfg, d.num_classes);
  restore_models(lm.models, d);
  lm.prior = d.prior;
  return lm;
}

const std::vector<std::string>& metrics_fields() {
  static const std::vector<std::string> f{"step",       "G_total",    "D_total",     "adv_G",       "adv_D",
                                          "pixel_rec",  "perceptual", "style",       "feature_match", "seg_ms",
                                          "shape_vae",  "shape_rec",  "shape_adv_G", "shape_adv_D", "wall_s"};
  return f;
}

std::string metrics_header() {
  std::string s = "#";
  for (const auto& f : metrics_fields()) s += " " + f;
  return s;
}

std::string metrics_line(int64_t step, const StepResult& r, double wall) {
  std::string s = std::to_string(step);
  char buf[40];
  for (size_t i = 1; i + 1 < metrics_fields().size(); ++i) {
    const auto& f = metrics_fields()[i];
    double v = 0.0;
    if (f == "G_total")
      v = r.bundle.g_total;
    else if (f == "D_total")
      v = r.bundle.d_total;
    else if (r.bundle.terms.count(f))
      v = r.bundle.terms.at(f);
    else
      v = r.shape_terms.at(f);
    std::snprintf(buf, sizeof buf, " %.10g", v);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, " %.3f", wall);
  return s + buf;
}

std::map<std::string, double> parse_metrics_line(const std::string& line) {
  std::istringstream in(line);
  std::map<std::string, double> out;
  for (const auto& f : metrics_fields()) {
    std::string tok;
    if (!(in >> tok)) throw TrainError("metrics line has too few fields: " + line);
    try {
      size_t used = 0;
      out[f] = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw TrainError("bad metrics value '" + tok + "' for " + f);
    }
  }
  std::string extra;
  if (in >> extra) throw TrainError("metrics line has too many fields: " + line);
  return out;
}

void run_training(const TrainConfig& cfg_in, const RunOptions& opt) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  const auto profile = data::profile_by_name(cfg.profile);
  const int size = effective_image_size(cfg);
  const auto samples = load_samples(cfg, profile);
  fs::create_directories(opt.run_dir);

  Trainer trainer(cfg, profile.aggregation.num_groups);
  trainer.prior = fit_location_prior(samples);

  if (!cfg.manifest.empty()) {
    std::vector<mask::ManifestEntry> entries;
    if (cfg.manifest == "auto") {
      std::vector<std::string> ids;
      std::vector<std::vector<data::InstanceRecord>> inst;
      for (const auto& s : samples) {
        ids.push_back(s.scene.id);
        inst.push_back(s.instances);
      }
      entries = mask::generate_manifest(ids, inst, mask::MaskMode::place, cfg.seed, size);
      mask::write_manifest(opt.run_dir / "masks.manifest", entries);
    } else {
      entries = mask::read_manifest(fs::path(cfg.manifest));
    }
    for (const auto& e : entries) {
      mask::validate_rect(e.rect, size);
      trainer.fixed_masks[e.id] = e.rect;
    }
  }

  const fs::path log_path = opt.run_dir / "metrics.log";
  if (opt.resume) {
    trainer.load(*opt.resume);
    // keep the log up to the resumed step
    std::vector<std::string> kept;
    std::ifstream in(log_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (line[0] == '#' || parse_metrics_line(line).at("step") <= static_cast<double>(trainer.step_count))
        kept.push_back(line);
    }
    std::ofstream out(log_path, std::ios::trunc);
    if (kept.empty()) kept.push_back(metrics_header());
    for (const auto& l : kept) out << l << "\n";
  } else {
    std::ofstream out(log_path, std::ios::trunc);
    out << metrics_header() << "\n";
  }
  {
    std::ofstream snap(opt.run_dir / "config.snapshot", std::ios::trunc);
    snap << to_config_text(cfg);
  }

  int64_t total_steps = cfg.steps;
  if (cfg.epochs > 0) {
    const int64_t per_epoch = (static_cast<int64_t>(samples.size()) + cfg.batch_size - 1) / cfg.batch_size;
    total_steps = static_cast<int64_t>(cfg.epochs) * per_epoch;
  }

  std::ofstream log(log_path, std::ios::app);
  const auto t0 = std::chrono::steady_clock::now();
  while (trainer.step_count < total_steps) {
    const auto batch_samples = trainer.next_samples(samples);
    const auto rects = trainer.next_rects(batch_samples);
    const auto batch = build_batch(batch_samples, rects, trainer.num_classes, cfg.canonical_size);
    const auto r = trainer.step(batch);
    const int64_t step = trainer.step_count;
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (step % cfg.log_every == 0 || step == total_steps) {
      const auto line = metrics_line(step, r, wall);
      log << line << "\n";
      log.flush();
      if (!opt.quiet) std::cout << line << std::endl;
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      trainer.save(opt.run_dir / ("ckpt_" + std::to_string(step) + ".bin"));
  }
  trainer.save(opt.run_dir / "final.bin");
}

}  // namespace sgi::train
