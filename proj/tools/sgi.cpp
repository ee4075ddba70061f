// sgi: dataset preparation, mask manifests, training, evaluation, inference and serving.
#include <CLI11/CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>

#include "sgi/dataset.hpp"
#include "sgi/evaluation.hpp"
#include "sgi/masking.hpp"
#include "sgi/service.hpp"
#include "sgi/training.hpp"

namespace fs = std::filesystem;
using namespace sgi;

namespace {

struct Globals {
  std::string config;
  std::optional<uint64_t> seed;
  std::optional<std::string> profile;
};

data::DatasetProfile profile_of(const Globals& g, const std::string& fallback = "fixture") {
  return data::profile_by_name(g.profile.value_or(fallback));
}

void check_device() {
  if (const char* dev = std::getenv("SGI_DEVICE"); dev && std::string(dev) != "cpu")
    throw std::runtime_error(std::string("SGI_DEVICE=") + dev + " is not available (cpu only)");
}

std::vector<train::Sample> samples_at(const fs::path& dir, const std::string& split, const data::DatasetProfile& p,
                                      int size) {
  train::TrainConfig c;
  c.profile = p.name;
  c.data_dir = dir.string();
  c.split = split;
  c.image_size = size;
  return train::load_samples(c, p);
}

int scene_size(const fs::path& dir, const std::string& split) {
  const auto ids = data::list_scene_ids(dir, data::parse_split(split));
  if (ids.empty()) throw std::runtime_error("no scenes under " + dir.string() + " for split " + split);
  return data::load_scene(dir, data::parse_split(split), ids.front()).height;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic-guided inpainting for urban scenes"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Run configuration (flat key = value file)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for masks, training and sampling");
  app.add_option("--profile", g.profile, "Dataset profile")->check(CLI::IsMember({"cityscapes", "idd", "fixture"}));

  // prepare
  auto* prep = app.add_subcommand("prepare", "Aggregate classes, resize and crop a raw dataset");
  std::string raw_dir, out_dir, prep_split = "train";
  int prep_size = 0;
  prep->add_option("--raw", raw_dir, "Raw dataset root (images/, labels/, instances/)")->required();
  prep->add_option("--out", out_dir, "Output root")->required();
  prep->add_option("--split", prep_split, "train or val")->check(CLI::IsMember({"train", "val"}));
  prep->add_option("--size", prep_size, "Output side length (default: profile)");

  // gen-masks
  auto* gm = app.add_subcommand("gen-masks", "Write a seed-deterministic mask manifest");
  std::string gm_data, gm_split = "val", gm_mode = "restore", gm_out;
  gm->add_option("--data", gm_data, "Prepared dataset root")->required();
  gm->add_option("--split", gm_split, "train or val")->check(CLI::IsMember({"train", "val"}));
  gm->add_option("--mode", gm_mode, "restore or place")->check(CLI::IsMember({"restore", "place"}));
  gm->add_option("--out", gm_out, "Manifest path")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train the networks");
  std::string run_dir, resume;
  std::vector<std::string> sets;
  bool verbose = false, overfit = false;
  tr->add_option("--run-dir", run_dir, "Output directory")->required();
  tr->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  tr->add_option("--set", sets, "Config override key=value (repeatable)");
  tr->add_flag("--overfit", overfit, "Start from the desk-scale overfit profile");
  tr->add_flag("--verbose", verbose, "Print each logged step");

  // eval
  auto* ev = app.add_subcommand("eval", "Benchmark a checkpoint on a mask manifest");
  std::string ev_ckpt, ev_data, ev_split = "val", ev_manifest, ev_task = "restore", ev_out = "eval_out";
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "Prepared dataset root (default: the checkpoint's)");
  ev->add_option("--split", ev_split, "train or val")->check(CLI::IsMember({"train", "val"}));
  ev->add_option("--manifest", ev_manifest, "Mask manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--task", ev_task, "restore or place")->check(CLI::IsMember({"restore", "place"}));
  ev->add_option("--out", ev_out, "Report directory");

  // infer
  auto* inf = app.add_subcommand("infer", "Inpaint one image");
  std::string in_ckpt, in_image, in_mask, in_seg, in_inst, in_mode = "restore", in_class, in_out = "out";
  std::vector<int> in_click;
  int in_variants = 1;
  inf->add_option("--checkpoint", in_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--image", in_image, "Input PNG")->required()->check(CLI::ExistingFile);
  inf->add_option("--mask", in_mask, "Keep-mask PNG (0 = hole)")->required()->check(CLI::ExistingFile);
  inf->add_option("--seg", in_seg, "Class-id PNG")->check(CLI::ExistingFile);
  inf->add_option("--instance-mask", in_inst, "Instance silhouette PNG")->check(CLI::ExistingFile);
  inf->add_option("--mode", in_mode, "restore, place, precise_removal or mask_insertion")
      ->check(CLI::IsMember({"restore", "place", "precise_removal", "mask_insertion"}));
  inf->add_option("--class", in_class, "car or pedestrian")->check(CLI::IsMember({"car", "pedestrian"}));
  inf->add_option("--click", in_click, "x y of the object to remove")->expected(2);
  inf->add_option("--variants", in_variants, "Number of variants")->check(CLI::PositiveNumber);
  inf->add_option("--out", in_out, "Output prefix");

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP inference service");
  std::string sv_ckpt, sv_host = "127.0.0.1";
  int sv_port = 8080;
  sv->add_option("--checkpoint", sv_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  sv->add_option("--port", sv_port, "Port")->check(CLI::Range(1, 65535));
  sv->add_option("--host", sv_host, "Bind address");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    // name an unknown flag before any missing-option complaint it may have caused
    std::vector<std::string> extras = app.remaining(true);
    for (auto* sub : app.get_subcommands())
      for (const auto& r : sub->remaining(true)) extras.push_back(r);
    for (const auto& x : extras)
      if (x.rfind("-", 0) == 0) {
        std::cerr << "unrecognized argument: " << x << "\n" << "Run with --help for more information.\n";
        return 2;
      }
    app.exit(e);
    return 2;
  }

  try {
    check_device();
    if (*prep) {
      const auto p = profile_of(g, "cityscapes");
      const int size = prep_size > 0 ? prep_size : p.image_size;
      const int n = data::prepare_dataset(raw_dir, out_dir, p, data::parse_split(prep_split), size, g.seed.value_or(0));
      std::cout << "prepared " << n << " scenes into " << out_dir << "\n";
    } else if (*gm) {
      const auto p = profile_of(g);
      const int size = scene_size(gm_data, gm_split);
      const auto samples = samples_at(gm_data, gm_split, p, size);
      std::vector<std::string> ids;
      std::vector<std::vector<data::InstanceRecord>> inst;
      for (const auto& s : samples) {
        ids.push_back(s.scene.id);
        inst.push_back(s.instances);
      }
      const auto entries = mask::generate_manifest(ids, inst, mask::parse_mask_mode(gm_mode), g.seed.value_or(0), size);
      mask::write_manifest(fs::path(gm_out), entries);
      std::cout << "wrote " << entries.size() << " masks to " << gm_out << "\n";
    } else if (*tr) {
      std::vector<std::string> overrides;
      if (g.seed) overrides.push_back("seed=" + std::to_string(*g.seed));
      if (g.profile) overrides.push_back("profile=" + *g.profile);
      overrides.insert(overrides.end(), sets.begin(), sets.end());
      train::TrainConfig cfg;
      if (overfit) {
        const auto base = train::to_config_text(train::overfit_config());
        std::string text = base;
        if (!g.config.empty()) {
          std::ifstream in(g.config);
          std::stringstream ss;
          ss << in.rdbuf();
          text += ss.str();
        }
        cfg = train::parse_train_config(text, overrides);
      } else {
        cfg = train::load_train_config(g.config, overrides);
      }
      train::RunOptions opt;
      opt.run_dir = run_dir;
      if (!resume.empty()) opt.resume = fs::path(resume);
      opt.quiet = !verbose;
      train::run_training(cfg, opt);
      std::cout << "finished; final model at " << (fs::path(run_dir) / "final.bin").string() << "\n";
    } else if (*ev) {
      auto lm = train::load_model(ev_ckpt);
      const auto p = data::profile_by_name(g.profile.value_or(lm.cfg.profile));
      const std::string dir = ev_data.empty() ? lm.cfg.data_dir : ev_data;
      const auto samples = samples_at(dir, ev_split, p, train::effective_image_size(lm.cfg));
      const auto entries = mask::read_manifest(fs::path(ev_manifest));
      eval::NetworkInpainter model(lm.models, lm.cfg.canonical_size, fs::path(ev_ckpt).filename().string());
      eval::SegmentationDetector det(p, p.min_instance_pixels);
      eval::BenchmarkInputs bi{&samples, &entries, ev_manifest, eval::parse_task(ev_task)};
      const auto rep = eval::run_benchmark(model, bi, det, *lm.models.fx);
      eval::write_report(ev_out, rep);
      std::cout << eval::format_report(rep);
    } else if (*inf) {
      auto lm = std::make_shared<train::LoadedModel>(train::load_model(in_ckpt));
      service::InpaintRequest req;
      req.image = read_png(in_image);
      req.mask = read_png(in_mask);
      if (!in_seg.empty()) req.seg = read_png(in_seg);
      if (!in_inst.empty()) req.instance_mask = read_png(in_inst);
      req.mode = service::parse_mode(in_mode);
      if (!in_class.empty()) req.class_label = data::parse_object_class(in_class);
      if (in_click.size() == 2) req.click = std::array<int, 2>{in_click[0], in_click[1]};
      req.seed = g.seed.value_or(0);
      req.variants = in_variants;
      const auto resp = service::handle_inpaint(req, lm.get());
      for (const auto& v : resp.variants) {
        const std::string stem = in_out + "_" + std::to_string(v.seed);
        write_png(stem + ".png", v.image);
        write_png(stem + "_seg.png", v.segmentation);
        std::cout << stem << ".png\n";
      }
    } else if (*sv) {
      auto lm = std::make_shared<train::LoadedModel>(train::load_model(sv_ckpt));
      auto svc = std::make_shared<service::InpaintService>(lm);
      service::HttpServer server(svc);
      std::cout << "serving on http://" << sv_host << ":" << sv_port << std::endl;
      if (!server.listen(sv_host, sv_port)) throw std::runtime_error("cannot bind " + sv_host + ":" + std::to_string(sv_port));
    }
  } catch (const service::RequestError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
