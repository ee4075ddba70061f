#include "sgi/evaluation.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace sgi::eval {

namespace fs = std::filesystem;

namespace {

double psnr_from_mse(double mse) {
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

void moments(const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  mu = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
  cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw EvalError("psnr: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.numel() == 0) throw EvalError("psnr: empty images");
  double se = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  return psnr_from_mse(se / static_cast<double>(a.numel()));
}

double masked_psnr(const Tensor& a, const Tensor& b, const Tensor& m) {
  if (!a.same_shape(b)) throw EvalError("masked_psnr: shape mismatch");
  const int64_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  if (m.numel() != n * hw) throw EvalError("masked_psnr: mask shape mismatch");
  double se = 0.0;
  int64_t count = 0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < hw; ++j) {
      if (m[i * hw + j] >= 0.5) continue;
      for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t k = (i * c + ch) * hw + j;
        se += (a[k] - b[k]) * (a[k] - b[k]);
        ++count;
      }
    }
  if (count == 0) throw EvalError("masked_psnr: mask has no hole pixels");
  return psnr_from_mse(se / static_cast<double>(count));
}

double fid(const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake) {
  if (real.rows() < 2 || fake.rows() < 2) throw EvalError("fid: need at least two samples per set");
  if (real.cols() != fake.cols()) throw EvalError("fid: feature dimensions differ");
  Eigen::VectorXd mu1, mu2;
  Eigen::MatrixXd s1, s2;
  moments(real, mu1, s1);
  moments(fake, mu2, s2);
  // Tr((S1 S2)^1/2) = Tr((S1^1/2 S2 S1^1/2)^1/2), which stays symmetric.
  const Eigen::MatrixXd r1 = sym_sqrt(s1);
  const double cross = sym_sqrt(r1 * s2 * r1).trace();
  const double d = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * cross;
  return std::max(0.0, d);
}

Eigen::MatrixXd to_matrix(const Tensor& rows) {
  require_rank(rows, 2, "feature matrix");
  Eigen::MatrixXd m(rows.dim(0), rows.dim(1));
  for (int64_t i = 0; i < rows.dim(0); ++i)
    for (int64_t j = 0; j < rows.dim(1); ++j) m(i, j) = rows[i * rows.dim(1) + j];
  return m;
}

std::vector<Detection> ScriptedDetector::detect(const DetectionInput& in) {
  auto it = planted_.find(in.id);
  return it == planted_.end() ? std::vector<Detection>{} : it->second;
}

std::vector<Detection> SegmentationDetector::detect(const DetectionInput& in) {
  if (!in.labels) throw EvalError("segmentation detector needs a label map");
  const int h = in.height, w = in.width;
  const auto& lab = *in.labels;
  std::vector<uint8_t> seen(lab.size(), 0);
  std::vector<Detection> out;
  std::vector<int> stack;
  for (int start = 0; start < h * w; ++start) {
    if (seen[static_cast<size_t>(start)]) continue;
    const auto cls = data::object_class_of_group(profile_, lab[static_cast<size_t>(start)]);
    if (!cls) continue;
    const int32_t group = lab[static_cast<size_t>(start)];
    int x0 = w, y0 = h, x1 = -1, y1 = -1, count = 0;
    stack.assign(1, start);
    seen[static_cast<size_t>(start)] = 1;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int y = p / w, x = p % w;
      ++count;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
      const int nb[4][2] = {{0, 1}, {0, -1}, {1, 0}, {-1, 0}};
      for (const auto& d : nb) {
        const int yy = y + d[0], xx = x + d[1];
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        const int q = yy * w + xx;
        if (seen[static_cast<size_t>(q)] || lab[static_cast<size_t>(q)] != group) continue;
        seen[static_cast<size_t>(q)] = 1;
        stack.push_back(q);
      }
    }
    if (count >= min_pixels_)
      out.push_back({data::to_string(*cls), {x0, y0, x1 - x0 + 1, y1 - y0 + 1}, 1.0});
  }
  return out;
}

double iou(const data::BBox& a, const data::BBox& b) {
  const int ix = std::max(0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const int iy = std::max(0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = static_cast<double>(ix) * iy;
  const double uni = static_cast<double>(a.w) * a.h + static_cast<double>(b.w) * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::string to_string(Task t) { return t == Task::restore ? "restore" : "place"; }

Task parse_task(const std::string& s) {
  if (s == "restore") return Task::restore;
  if (s == "place") return Task::place;
  throw EvalError("unknown task: " + s);
}

double F1Counts::f1() const {
  const int denom = 2 * tp + fp + fn;
  return denom == 0 ? 1.0 : 2.0 * tp / denom;
}

F1Counts count_insertions(const std::vector<InsertionResult>& results, Task task) {
  F1Counts c;
  for (const auto& r : results) {
    const data::BBox rect{r.rect.x, r.rect.y, r.rect.w, r.rect.h};
    bool any = false, target_hit = false;
    for (const auto& d : r.detections) {
      if (d.class_name != "car" && d.class_name != "pedestrian") continue;
      if (iou(d.bbox, rect) <= kDetectionIou) continue;
      any = true;
      if (r.target && d.class_name == data::to_string(*r.target)) target_hit = true;
    }
    if (task == Task::place) {
      if (!r.target) {
        if (any) ++c.fp;
      } else if (target_hit) {
        ++c.tp;
      } else {
        ++c.fn;
        if (any) ++c.fp;
      }
    } else {
      if (r.target && any) ++c.tp;
      if (r.target && !any) ++c.fn;
      if (!r.target && any) ++c.fp;
    }
  }
  return c;
}

double f1_insertion(const std::vector<InsertionResult>& results, Task task) {
  return count_insertions(results, task).f1();
}

namespace {

const data::InstanceRecord* find_instance(const train::Sample& s, std::optional<int32_t> id) {
  if (!id) return nullptr;
  for (const auto& r : s.instances)
    if (r.instance_id == *id) return &r;
  return nullptr;
}

infer::Inpainting fixed_output(const train::Sample& sample, const mask::MaskRect& rect, const Tensor& raw,
                               const std::vector<int32_t>& labels) {
  const Tensor img = mask::image_tensor(sample.scene);
  const Tensor m = mask::keep_mask(rect, sample.scene.height, sample.scene.width);
  const int64_t hw = m.numel();
  infer::Inpainting r;
  r.raw = raw;
  r.composite = raw;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t j = 0; j < hw; ++j)
      if (m[j] >= 0.5) r.composite[c * hw + j] = img[c * hw + j];
  r.labels = labels;
  return r;
}

}  // namespace

infer::Inpainting NetworkInpainter::run(const train::Sample& sample, const mask::MaskRect& rect) {
  const auto& sc = sample.scene;
  const Tensor img = mask::image_tensor(sc);
  const Tensor seg = mask::one_hot(sc, models_.g.cfg.num_classes);
  const Tensor m = mask::keep_mask(rect, sc.height, sc.width);
  Tensor inst({1, 1, sc.height, sc.width});
  if (rect.mode == mask::MaskMode::place) {
    if (const auto* rec = find_instance(sample, rect.target_instance)) {
      Rng rng = split_rng(rect.seed, "place/" + sc.id);
      inst = infer::generate_instance(models_, rec->class_label, mask::bbox_theta(rec->bbox, canonical_), sc.height,
                                      sc.width, rng);
    }
  }
  return infer::inpaint(models_, img, seg, m, inst);
}

infer::Inpainting OracleInpainter::run(const train::Sample& sample, const mask::MaskRect& rect) {
  return fixed_output(sample, rect, mask::image_tensor(sample.scene), sample.scene.labels);
}

infer::Inpainting ConstantInpainter::run(const train::Sample& sample, const mask::MaskRect& rect) {
  Tensor raw({1, 3, sample.scene.height, sample.scene.width}, level_);
  std::vector<int32_t> labels = sample.scene.labels;
  for (int y = rect.y; y < rect.y + rect.h; ++y)
    for (int x = rect.x; x < rect.x + rect.w; ++x) labels[static_cast<size_t>(y) * sample.scene.width + x] = 0;
  return fixed_output(sample, rect, raw, labels);
}

MetricReport run_benchmark(Inpainter& model, const BenchmarkInputs& in, Detector& detector,
                           const obj::FeatureExtractor& fx) {
  if (!in.samples || !in.manifest) throw EvalError("benchmark needs samples and a manifest");
  std::map<std::string, const train::Sample*> by_id;
  for (const auto& s : *in.samples) by_id[s.scene.id] = &s;

  MetricReport rep;
  rep.task = in.task;
  rep.manifest_path = in.manifest_path;
  rep.model_id = model.id();
  std::vector<InsertionResult> insertions;
  std::vector<Tensor> real_feats, fake_feats;
  for (const auto& e : *in.manifest) {
    auto it = by_id.find(e.id);
    if (it == by_id.end()) throw EvalError("manifest entry " + e.id + " has no scene in the dataset");
    const auto& s = *it->second;
    mask::validate_rect(e.rect, s.scene.height);
    const auto out = model.run(s, e.rect);
    const Tensor gt = mask::image_tensor(s.scene);
    const Tensor m = mask::keep_mask(e.rect, s.scene.height, s.scene.width);

    ImageRow row;
    row.id = e.id;
    row.psnr = psnr(out.composite, gt);
    row.hole_psnr = masked_psnr(out.composite, gt, m);

    InsertionResult ins;
    ins.rect = e.rect;
    if (in.task == Task::place) {
      if (const auto* rec = find_instance(s, e.rect.target_instance)) ins.target = rec->class_label;
    } else if (const auto sup = train::supervising_instance(s, e.rect)) {
      ins.target = sup->class_label;
    }
    DetectionInput di{e.id, &out.composite, &out.labels, s.scene.height, s.scene.width};
    ins.detections = detector.detect(di);
    row.detections = static_cast<int>(ins.detections.size());
    row.target_found = count_insertions({ins}, in.task).tp > 0;
    insertions.push_back(std::move(ins));

    auto net = [](Tensor t) {
      for (auto& v : t.values()) v = 2.0 * v - 1.0;
      return t;
    };
    real_feats.push_back(fx.embed(net(gt)));
    fake_feats.push_back(fx.embed(net(out.composite)));
    rep.rows.push_back(row);
  }
  rep.n_images = static_cast<int>(rep.rows.size());
  if (rep.n_images == 0) throw EvalError("benchmark manifest is empty");
  for (const auto& r : rep.rows) {
    rep.psnr_mean += r.psnr;
    rep.hole_psnr_mean += r.hole_psnr;
  }
  rep.psnr_mean /= rep.n_images;
  rep.hole_psnr_mean /= rep.n_images;
  rep.counts = count_insertions(insertions, in.task);
  rep.f1 = rep.counts.f1();
  auto stack = [](const std::vector<Tensor>& rows) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.front().dim(1));
    for (size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = to_matrix(rows[i]).row(0);
    return m;
  };
  rep.fid = fid(stack(real_feats), stack(fake_feats));
  return rep;
}

std::string format_report(const MetricReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "task              %s\n"
                "model             %s\n"
                "manifest          %s\n"
                "images            %d\n"
                "psnr_mean_db      %.6f\n"
                "hole_psnr_mean_db %.6f\n"
                "small_sample_fid  %.6f\n"
                "f1                %.6f\n"
                "tp fp fn          %d %d %d\n",
                to_string(r.task).c_str(), r.model_id.c_str(), r.manifest_path.c_str(), r.n_images, r.psnr_mean,
                r.hole_psnr_mean, r.fid, r.f1, r.counts.tp, r.counts.fp, r.counts.fn);
  return buf;
}

std::string format_rows(const MetricReport& r) {
  std::string s = "id\tpsnr_db\thole_psnr_db\tdetections\ttarget_found\n";
  char buf[256];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%d\t%d\n", row.id.c_str(), row.psnr, row.hole_psnr, row.detections,
                  row.target_found ? 1 : 0);
    s += buf;
  }
  return s;
}

void write_report(const fs::path& dir, const MetricReport& r) {
  fs::create_directories(dir);
  std::ofstream(dir / "report.txt", std::ios::trunc) << format_report(r);
  std::ofstream(dir / "rows.tsv", std::ios::trunc) << format_rows(r);
}

}  // namespace sgi::eval
