#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgi/inference.hpp"
#include "sgi/masking.hpp"
#include "sgi/objectives.hpp"
#include "sgi/training.hpp"

namespace sgi::eval {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / MSE) for images in [0, 1]; identical inputs give the cap.
double psnr(const Tensor& a, const Tensor& b);
/// PSNR restricted to pixels where m == 0 (all channels).
double masked_psnr(const Tensor& a, const Tensor& b, const Tensor& m);

/// Frechet distance between Gaussian fits of two feature sets (rows are samples).
double fid(const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake);
Eigen::MatrixXd to_matrix(const Tensor& rows);

struct Detection {
  std::string class_name;  // "car" or "pedestrian"; anything else is ignored
  data::BBox bbox;
  double confidence = 1.0;
};

struct DetectionInput {
  std::string id;
  const Tensor* image = nullptr;               // (1,3,H,W) composited output
  const std::vector<int32_t>* labels = nullptr;  // predicted class map, H*W
  int height = 0, width = 0;
};

class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::vector<Detection> detect(const DetectionInput& in) = 0;
};

/// Returns planted detections keyed by image id.
class ScriptedDetector : public Detector {
 public:
  explicit ScriptedDetector(std::map<std::string, std::vector<Detection>> planted) : planted_(std::move(planted)) {}
  std::vector<Detection> detect(const DetectionInput& in) override;

 private:
  std::map<std::string, std::vector<Detection>> planted_;
};

/// Connected components of the car and pedestrian classes in the predicted
/// segmentation, one box per component of at least `min_pixels`.
class SegmentationDetector : public Detector {
 public:
  SegmentationDetector(const data::DatasetProfile& profile, int min_pixels) : profile_(profile), min_pixels_(min_pixels) {}
  std::vector<Detection> detect(const DetectionInput& in) override;

 private:
  data::DatasetProfile profile_;
  int min_pixels_;
};

double iou(const data::BBox& a, const data::BBox& b);

enum class Task { restore, place };
std::string to_string(Task t);
Task parse_task(const std::string& s);

struct InsertionResult {
  std::vector<Detection> detections;
  /// Place: the class that must appear. Restore: set when the original hole held a modelled instance.
  std::optional<data::ObjectClass> target;
  mask::MaskRect rect;
};

constexpr double kDetectionIou = 0.3;

struct F1Counts {
  int tp = 0, fp = 0, fn = 0;
  /// 2TP / (2TP + FP + FN); 1 when there is nothing to find and nothing was found.
  double f1() const;
};
F1Counts count_insertions(const std::vector<InsertionResult>& results, Task task);
double f1_insertion(const std::vector<InsertionResult>& results, Task task);

/// Produces the composited [0,1] image for one benchmark entry.
class Inpainter {
 public:
  virtual ~Inpainter() = default;
  virtual infer::Inpainting run(const train::Sample& sample, const mask::MaskRect& rect) = 0;
  virtual std::string id() const = 0;
};

/// The trained network; place entries insert the target class at its ground-truth box with z drawn from the entry seed.
class NetworkInpainter : public Inpainter {
 public:
  NetworkInpainter(train::Models& models, int canonical, std::string model_id)
      : models_(models), canonical_(canonical), id_(std::move(model_id)) {}
  infer::Inpainting run(const train::Sample& sample, const mask::MaskRect& rect) override;
  std::string id() const override { return id_; }

 private:
  train::Models& models_;
  int canonical_;
  std::string id_;
};

/// Returns the ground truth.
class OracleInpainter : public Inpainter {
 public:
  infer::Inpainting run(const train::Sample& sample, const mask::MaskRect& rect) override;
  std::string id() const override { return "oracle"; }
};

/// Fills holes with a constant gray level.
class ConstantInpainter : public Inpainter {
 public:
  explicit ConstantInpainter(double level = 0.5) : level_(level) {}
  infer::Inpainting run(const train::Sample& sample, const mask::MaskRect& rect) override;
  std::string id() const override { return "constant"; }

 private:
  double level_;
};

struct ImageRow {
  std::string id;
  double psnr = 0.0;
  double hole_psnr = 0.0;
  int detections = 0;
  bool target_found = false;
};

struct MetricReport {
  Task task = Task::restore;
  double psnr_mean = 0.0;
  double hole_psnr_mean = 0.0;
  double fid = 0.0;
  double f1 = 0.0;
  F1Counts counts;
  int n_images = 0;
  std::string manifest_path;
  std::string model_id;
  std::vector<ImageRow> rows;
};

struct BenchmarkInputs {
  const std::vector<train::Sample>* samples = nullptr;
  const std::vector<mask::ManifestEntry>* manifest = nullptr;
  std::string manifest_path;
  Task task = Task::restore;
};

MetricReport run_benchmark(Inpainter& model, const BenchmarkInputs& in, Detector& detector,
                           const obj::FeatureExtractor& fx);

std::string format_report(const MetricReport& r);
std::string format_rows(const MetricReport& r);
/// Writes report.txt and rows.tsv into dir.
void write_report(const std::filesystem::path& dir, const MetricReport& r);

}  // namespace sgi::eval
