#include "sgi/generator.hpp"

#include <algorithm>
#include <stdexcept>

namespace sgi::gen {

using namespace sgi::nn;

namespace {

void record(ShapeTrace* trace, const std::string& name, const Var& v) {
  if (trace) trace->emplace_back(name, v.shape());
}

}  // namespace

std::string to_string(NormKind k) { return k == NormKind::instance ? "instance" : "batch"; }

NormKind parse_norm_kind(const std::string& s) {
  if (s == "instance") return NormKind::instance;
  if (s == "batch") return NormKind::batch;
  throw std::invalid_argument("unknown normalization '" + s + "'");
}

void GeneratorConfig::validate() const {
  if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
  if (enc_widths.size() != 5) throw std::invalid_argument("encoder needs 5 widths");
  if (dec_widths.size() != 4) throw std::invalid_argument("decoder needs 4 widths");
  if (image_size % 16 != 0 || image_size < 16) throw std::invalid_argument("image_size must be a multiple of 16");
  for (int w : enc_widths)
    if (w <= 0) throw std::invalid_argument("encoder widths must be positive");
  for (int w : dec_widths)
    if (w <= 0) throw std::invalid_argument("decoder widths must be positive");
  if (final_width <= 0 || spade_hidden <= 0) throw std::invalid_argument("widths must be positive");
  for (int d : dilations)
    if (d <= 0) throw std::invalid_argument("dilations must be positive");
}

Var normalize(const Var& x, NormKind kind) { return kind == NormKind::instance ? instance_norm(x) : batch_norm(x); }

Encoder::Encoder(int in_channels, const std::vector<int>& widths) {
  convs.emplace_back(in_channels, widths[0], 5, ConvOptions{1, 2, 1});
  convs.emplace_back(widths[0], widths[1], 5, ConvOptions{2, 2, 1});
  for (size_t i = 2; i < widths.size(); ++i) convs.emplace_back(widths[i - 1], widths[i], 4, ConvOptions{2, 1, 1});
}

Var Encoder::operator()(const Var& x, NormKind norm, ShapeTrace* trace, const std::string& tag) const {
  if (x.value().rank() != 4 || x.dim(1) != convs[0].in_channels)
    throw ShapeError(tag + " expects " + std::to_string(convs[0].in_channels) + " input channels, got " +
                     shape_str(x.shape()));
  Var h = x;
  record(trace, tag + ".input", h);
  for (size_t i = 0; i < convs.size(); ++i) {
    h = elu(normalize(convs[i](h), norm));
    record(trace, tag + ".conv" + std::to_string(i), h);
  }
  return h;
}

void Encoder::init(Rng& rng, double std) {
  for (auto& c : convs) c.init(rng, {std});
}

void Encoder::visit(Registry& r) {
  for (size_t i = 0; i < convs.size(); ++i) r.child("conv" + std::to_string(i), convs[i]);
}

DilatedResBlock::DilatedResBlock(int channels, int dilation)
    : conv1(channels, channels, 3, ConvOptions{1, dilation, dilation}), conv2(channels, channels, 3, ConvOptions{1, 1, 1}) {}

Var DilatedResBlock::operator()(const Var& x, NormKind norm) const {
  Var h = elu(normalize(conv1(x), norm));
  h = normalize(conv2(h), norm);
  return add(x, h);
}

void DilatedResBlock::init(Rng& rng, double std) {
  conv1.init(rng, {std});
  conv2.init(rng, {std});
}

void DilatedResBlock::visit(Registry& r) {
  r.child("conv1", conv1);
  r.child("conv2", conv2);
}

Spade::Spade(int channels, int label_channels, int hidden)
    : shared(label_channels, hidden, 3, ConvOptions{1, 1, 1}),
      gamma(hidden, channels, 3, ConvOptions{1, 1, 1}),
      beta(hidden, channels, 3, ConvOptions{1, 1, 1}) {}

Var Spade::operator()(const Var& x, const Var& seg, NormKind norm) const {
  if (seg.dim(2) != x.dim(2) || seg.dim(3) != x.dim(3))
    throw ShapeError("spade: segmentation " + shape_str(seg.shape()) + " does not match features " +
                     shape_str(x.shape()));
  Var act = relu(shared(seg));
  Var g = gamma(act);
  Var b = beta(act);
  Var n = normalize(x, norm);
  return add(add(n, mul(n, g)), b);
}

void Spade::init(Rng& rng, double std) {
  shared.init(rng, {std});
  gamma.init(rng, {std});
  beta.init(rng, {std});
}

void Spade::visit(Registry& r) {
  r.child("shared", shared);
  r.child("gamma", gamma);
  r.child("beta", beta);
}

SpadeResBlock::SpadeResBlock(int fin_, int fout_, int label_channels, int hidden, bool spade, bool learned)
    : fin(fin_), fout(fout_), use_spade(spade), learned_skip(learned || fin_ != fout_) {
  const int fmid = std::min(fin, fout);
  conv0 = Conv2d(fin, fmid, 3, ConvOptions{1, 1, 1});
  conv1 = Conv2d(fmid, fout, 3, ConvOptions{1, 1, 1});
  if (use_spade) {
    norm0 = Spade(fin, label_channels, hidden);
    norm1 = Spade(fmid, label_channels, hidden);
  }
  if (learned_skip) {
    conv_skip = Conv2d(fin, fout, 1, {}, false);
    if (use_spade) norm_skip = Spade(fin, label_channels, hidden);
  }
}

Var SpadeResBlock::operator()(const Var& x, const Var& seg, NormKind norm) const {
  auto modulate = [&](const Spade& s, const Var& v) { return use_spade ? s(v, seg, norm) : normalize(v, norm); };
  Var dx = conv0(leaky_relu(modulate(norm0, x), 0.2));
  dx = conv1(leaky_relu(modulate(norm1, dx), 0.2));
  Var xs = learned_skip ? conv_skip(modulate(norm_skip, x)) : x;
  return add(xs, dx);
}

void SpadeResBlock::init(Rng& rng, double std) {
  conv0.init(rng, {std});
  conv1.init(rng, {std});
  if (use_spade) {
    norm0.init(rng, std);
    norm1.init(rng, std);
  }
  if (learned_skip) {
    conv_skip.init(rng, {std});
    if (use_spade) norm_skip.init(rng, std);
  }
}

void SpadeResBlock::visit(Registry& r) {
  r.child("conv0", conv0);
  r.child("conv1", conv1);
  if (use_spade) {
    r.child("norm0", norm0);
    r.child("norm1", norm1);
  }
  if (learned_skip) {
    r.child("conv_skip", conv_skip);
    if (use_spade) r.child("norm_skip", norm_skip);
  }
}

DecoderBlock::DecoderBlock(int fin, int fout, const GeneratorConfig& cfg)
    : upsample(fin, 4 * fout, 3, ConvOptions{1, 1, 1}),
      seg_head(fout, cfg.num_classes, 1),
      res(fout, fout, cfg.num_classes, cfg.spade_hidden, cfg.use_spade, cfg.learned_skip) {}

DecoderOutput DecoderBlock::operator()(const Var& x, NormKind norm) const {
  Var up = pixel_shuffle(upsample(x), 2);
  Var seg = softmax_channels(seg_head(up));
  return {res(up, seg, norm), seg};
}

void DecoderBlock::init(Rng& rng, double std) {
  upsample.init(rng, {std});
  seg_head.init(rng, {std});
  res.init(rng, std);
}

void DecoderBlock::visit(Registry& r) {
  r.child("upsample", upsample);
  r.child("seg_head", seg_head);
  r.child("res", res);
}

InpaintGenerator::InpaintGenerator(const GeneratorConfig& c) : cfg(c) {
  cfg.validate();
  const int c_cls = cfg.num_classes;
  if (cfg.use_semantic_encoder) {
    e_im = Encoder(3 + 1, cfg.enc_widths);
    e_se = Encoder(c_cls + 1 + 1, cfg.enc_widths);
  } else {
    e_im = Encoder(3 + 1 + c_cls + 1, cfg.enc_widths);
  }
  const int fw = cfg.fused_width();
  for (int d : cfg.dilations) fusion.emplace_back(fw, d);
  int in = fw;
  for (int w : cfg.dec_widths) {
    blocks.emplace_back(in, w, cfg);
    in = w;
  }
  final_block = SpadeResBlock(in, cfg.final_width, c_cls, cfg.spade_hidden, cfg.use_spade, true);
  to_rgb = Conv2d(cfg.final_width, 3, 7, ConvOptions{1, 3, 1});
}

namespace {

void check_map(const Var& v, int64_t n, int64_t c, int size, const char* what) {
  require_shape(v.value(), {n, c, size, size}, what);
}

}  // namespace

Var InpaintGenerator::encode_image(const Var& x_in, const Var& m, ShapeTrace* trace) const {
  if (!cfg.use_semantic_encoder) throw std::logic_error("encode_image: single-encoder variant");
  const int64_t n = x_in.dim(0);
  check_map(x_in, n, 3, cfg.image_size, "image input");
  check_map(m, n, 1, cfg.image_size, "mask input");
  return e_im(concat_channels({x_in, m}), cfg.norm, trace, "e_im");
}

Var InpaintGenerator::encode_semantics(const Var& s_blanked, const Var& m, const Var& instance,
                                       ShapeTrace* trace) const {
  if (!cfg.use_semantic_encoder) throw std::logic_error("encode_semantics: single-encoder variant");
  const int64_t n = s_blanked.dim(0);
  check_map(s_blanked, n, cfg.num_classes, cfg.image_size, "segmentation input");
  check_map(m, n, 1, cfg.image_size, "mask input");
  check_map(instance, n, 1, cfg.image_size, "instance input");
  return e_se(concat_channels({s_blanked, m, instance}), cfg.norm, trace, "e_se");
}

Var InpaintGenerator::fuse(const Var& f_im, const Var& f_se, ShapeTrace* trace) const {
  Var h = f_se.defined() ? concat_channels({f_im, f_se}) : f_im;
  if (h.dim(1) != cfg.fused_width()) throw ShapeError("fuse: expected " + std::to_string(cfg.fused_width()) +
                                                      " channels, got " + shape_str(h.shape()));
  record(trace, "fuse.concat", h);
  for (size_t i = 0; i < fusion.size(); ++i) {
    h = fusion[i](h, cfg.norm);
    record(trace, "fuse.block" + std::to_string(i), h);
  }
  return h;
}

GenerationOutput InpaintGenerator::decode(const Var& fused, ShapeTrace* trace) const {
  const int bottleneck = cfg.image_size / 16;
  require_shape(fused.value(), {fused.dim(0), cfg.fused_width(), bottleneck, bottleneck}, "decoder input");
  GenerationOutput out;
  Var h = fused;
  for (size_t i = 0; i < blocks.size(); ++i) {
    DecoderOutput d = blocks[i](h, cfg.norm);
    h = d.features;
    record(trace, "block" + std::to_string(i) + ".features", h);
    record(trace, "block" + std::to_string(i) + ".seg", d.seg);
    out.scale_segs.push_back(d.seg);
  }
  out.s_filled = out.scale_segs.back();
  h = final_block(h, out.s_filled, cfg.norm);
  record(trace, "final_block", h);
  out.x_filled = tanh(to_rgb(h));
  record(trace, "x_filled", out.x_filled);
  return out;
}

GenerationOutput InpaintGenerator::operator()(const Var& x_in, const Var& m, const Var& s_blanked,
                                              const Var& instance, ShapeTrace* trace) const {
  if (cfg.use_semantic_encoder) {
    Var f_im = encode_image(x_in, m, trace);
    Var f_se = encode_semantics(s_blanked, m, instance, trace);
    return decode(fuse(f_im, f_se, trace), trace);
  }
  const int64_t n = x_in.dim(0);
  check_map(x_in, n, 3, cfg.image_size, "image input");
  check_map(s_blanked, n, cfg.num_classes, cfg.image_size, "segmentation input");
  Var f = e_im(concat_channels({x_in, m, s_blanked, instance}), cfg.norm, trace, "e_im");
  return decode(fuse(f, Var(), trace), trace);
}

void InpaintGenerator::init(Rng& rng) {
  const double s = cfg.init_std;
  e_im.init(rng, s);
  if (cfg.use_semantic_encoder) e_se.init(rng, s);
  for (auto& b : fusion) b.init(rng, s);
  for (auto& b : blocks) b.init(rng, s);
  final_block.init(rng, s);
  to_rgb.init(rng, {s});
}

void InpaintGenerator::visit(Registry& r) {
  r.child("e_im", e_im);
  if (cfg.use_semantic_encoder) r.child("e_se", e_se);
  for (size_t i = 0; i < fusion.size(); ++i) r.child("fusion" + std::to_string(i), fusion[i]);
  for (size_t i = 0; i < blocks.size(); ++i) r.child("block" + std::to_string(i), blocks[i]);
  r.child("final", final_block);
  r.child("to_rgb", to_rgb);
}

Tensor composite(const Tensor& known, const Tensor& generated, const Tensor& m) {
  require_shape(generated, known.shape(), "composite");
  const int64_t n = known.dim(0), c = known.dim(1), plane = known.dim(2) * known.dim(3);
  require_shape(m, {n, 1, known.dim(2), known.dim(3)}, "composite mask");
  Tensor out = known;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t i = 0; i < plane; ++i) {
        const double keep = m[b * plane + i];
        const int64_t k = (b * c + ch) * plane + i;
        out[k] = keep >= 0.5 ? known[k] : generated[k];
      }
  return out;
}

}  // namespace sgi::gen
