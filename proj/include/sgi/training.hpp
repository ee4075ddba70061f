#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgi/dataset.hpp"
#include "sgi/generator.hpp"
#include "sgi/masking.hpp"
#include "sgi/objectives.hpp"
#include "sgi/optim.hpp"
#include "sgi/shape_net.hpp"

namespace sgi::train {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` run configuration. Keys match the field names.
struct TrainConfig {
  std::string profile = "fixture";
  std::string data_dir = "data/fixture";
  std::string split = "train";
  std::string manifest;              // fixed masks; empty = resample every step
  std::string mask_mode = "mixed";   // restore | place | mixed
  int batch_size = 4;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int epochs = 0;       // > 0 overrides steps with epochs * batches_per_epoch
  int steps = 200;
  uint64_t seed = 0;
  std::string device = "cpu";
  int checkpoint_every = 50;
  int log_every = 1;
  int pretrain_shape_steps = 0;

  double lambda_rec = 10.0;
  double lambda_perc = 10.0;
  double lambda_fm = 10.0;
  double lambda_cross = 10.0;
  double lambda_style = 250.0;
  double lambda_adv = 1.0;
  double lambda_vae = 5.0;
  double lambda_inst_rec = 20.0;
  double lambda_shape_adv = 1.0;

  int image_size = 0;          // 0 = profile default
  int width_divisor = 1;       // generator and D_g widths are divided by this
  int d_scales = 2;
  int canonical_size = 64;
  int latent_dim = 64;
  int shape_width_divisor = 1;
  bool use_spade = true;
  bool learned_skip = false;
  bool use_semantic_encoder = true;
  std::string norm = "instance";
  std::string extractor = "stub";

  obj::LossWeights weights() const;
  /// Throws TrainError on an invalid value.
  void validate() const;
};

/// Parses a config file (may be empty) then applies `key=value` overrides.
TrainConfig load_train_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
TrainConfig parse_train_config(const std::string& text, const std::vector<std::string>& overrides = {});
/// Canonical text form; parse_train_config(to_config_text(c)) == c.
std::string to_config_text(const TrainConfig& c);
/// Desk-scale defaults for the fixture profile.
TrainConfig overfit_config();

gen::GeneratorConfig generator_config(const TrainConfig& c, int num_classes);
obj::DiscriminatorConfig discriminator_config(const TrainConfig& c, int num_classes);
shape::ShapeNetConfig shape_config(const TrainConfig& c);
int effective_image_size(const TrainConfig& c);

/// Empirical bbox locations (cx, cy, w, h) / image size per object class.
struct LocationPrior {
  std::array<std::vector<std::array<double, 4>>, data::kNumObjectClasses> samples;
  void add(data::ObjectClass cls, const std::array<double, 4>& l) { samples[static_cast<int>(cls)].push_back(l); }
  size_t size() const;
};

struct Models {
  gen::InpaintGenerator g;
  obj::MultiScaleDiscriminator d;
  shape::ShapeEncoder es;
  shape::ShapeGenerator gs;
  shape::ShapeDiscriminator ds;
  std::shared_ptr<obj::FeatureExtractor> fx;

  /// Everything updated on the generator objective (G, E_s, G_s).
  std::vector<nn::ParamRef> generator_params();
  /// Everything updated on the discriminator objective (D_g, D_s).
  std::vector<nn::ParamRef> discriminator_params();
  std::vector<nn::BufferRef> buffers();
};

Models build_models(const TrainConfig& c, int num_classes);
std::shared_ptr<obj::FeatureExtractor> make_extractor(const std::string& name);

/// A scene ready for training: resized to the profile's square size.
struct Sample {
  data::Scene scene;
  std::vector<data::InstanceRecord> instances;
};

std::vector<Sample> load_samples(const TrainConfig& c, const data::DatasetProfile& profile);
LocationPrior fit_location_prior(const std::vector<Sample>& samples);

struct TrainBatch {
  Tensor x_gt;      // (N,3,S,S) in [-1, 1]
  Tensor x_in;      // (2x - 1) * m
  Tensor s_gt;      // (N,C,S,S)
  Tensor s_blanked;
  Tensor m;         // (N,1,S,S)
  std::vector<mask::MaskRect> rects;
  /// Per sample, the instance supervising the shape branch (hole overlaps a modelled object).
  std::vector<std::optional<mask::InstanceSpec>> specs;
};

/// Instance with the most pixels inside the rect, preferring the rect's target; nullopt if none overlap.
std::optional<data::InstanceRecord> supervising_instance(const Sample& s, const mask::MaskRect& rect);

TrainBatch build_batch(const std::vector<const Sample*>& samples, const std::vector<mask::MaskRect>& rects,
                       int num_classes, int canonical);

/// Instance channel for a batch: placed shapes where a spec exists, zeros elsewhere.
struct ShapeBranch {
  Var instance;  // (N,1,S,S)
  Var m_s;       // (K,1,c,c) for the K samples with a spec
  Var m_hat;
  shape::LatentPosterior post;
  bool active = false;
};
ShapeBranch run_shape_branch(Models& models, const TrainBatch& b, Rng& rng, int image_size);

struct StepResult {
  obj::LossBundle bundle;
  std::map<std::string, double> shape_terms;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, int num_classes);

  StepResult step(const TrainBatch& batch);
  /// Masks for the next batch: from the manifest when one is loaded, else sampled.
  std::vector<mask::MaskRect> next_rects(const std::vector<const Sample*>& samples);
  std::vector<const Sample*> next_samples(const std::vector<Sample>& all);

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

  TrainConfig cfg;
  int num_classes;
  Models models;
  nn::Adam opt_g, opt_d;
  Rng rng;
  int64_t step_count = 0;
  LocationPrior prior;
  std::map<std::string, mask::MaskRect> fixed_masks;
  /// When set, the named term is replaced by NaN (exercise the non-finite check).
  std::string inject_nonfinite;
};

/// Ordered metrics-log fields: step, every loss term, wall time.
const std::vector<std::string>& metrics_fields();
std::string metrics_header();
std::string metrics_line(int64_t step, const StepResult& r, double wall_seconds);
std::map<std::string, double> parse_metrics_line(const std::string& line);

struct RunOptions {
  std::filesystem::path run_dir;
  std::optional<std::filesystem::path> resume;
  bool quiet = true;
};

/// Trains to completion, writing config.snapshot, metrics.log, ckpt_{step}.bin and final.bin.
void run_training(const TrainConfig& cfg, const RunOptions& opt);

/// Inference-side bundle restored from a checkpoint.
struct LoadedModel {
  TrainConfig cfg;
  int num_classes = 0;
  Models models;
  LocationPrior prior;
};
LoadedModel load_model(const std::filesystem::path& checkpoint);

}  // namespace sgi::train
