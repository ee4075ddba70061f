#pragma once

#include <string>
#include <vector>

#include "sgi/layers.hpp"
#include "sgi/shape_net.hpp"

namespace sgi::gen {

using shape::ShapeTrace;

enum class NormKind { instance, batch };
std::string to_string(NormKind k);
NormKind parse_norm_kind(const std::string& s);

struct GeneratorConfig {
  int num_classes = 17;
  int image_size = 256;
  std::vector<int> enc_widths{32, 64, 128, 256, 512};
  std::vector<int> dec_widths{512, 256, 128, 64};
  int final_width = 32;
  int spade_hidden = 128;
  std::vector<int> dilations{2, 2, 2, 4, 4, 4, 8, 8, 8};
  bool use_spade = true;
  bool learned_skip = false;
  bool use_semantic_encoder = true;
  NormKind norm = NormKind::instance;
  double init_std = 0.02;

  int fused_width() const { return use_semantic_encoder ? 2 * enc_widths.back() : enc_widths.back(); }
  void validate() const;
};

/// Feature normalization selected by the config (parameter-free).
Var normalize(const Var& x, NormKind kind);

/// Two-stage downsampling encoder: K5 S1, K5 S2, then K4 S2 stages.
class Encoder {
 public:
  Encoder() = default;
  Encoder(int in_channels, const std::vector<int>& widths);
  Var operator()(const Var& x, NormKind norm, ShapeTrace* trace, const std::string& tag) const;
  void init(Rng& rng, double std);
  void visit(nn::Registry& r);
  std::vector<nn::Conv2d> convs;
};

/// x + IN(conv(ELU(IN(dilated_conv(x))))), no activation after the sum.
class DilatedResBlock {
 public:
  DilatedResBlock() = default;
  DilatedResBlock(int channels, int dilation);
  Var operator()(const Var& x, NormKind norm) const;
  void init(Rng& rng, double std);
  void visit(nn::Registry& r);
  nn::Conv2d conv1, conv2;
};

/// normalize(x) * (1 + gamma(seg)) + beta(seg).
class Spade {
 public:
  Spade() = default;
  Spade(int channels, int label_channels, int hidden);
  Var operator()(const Var& x, const Var& seg, NormKind norm) const;
  void init(Rng& rng, double std);
  void visit(nn::Registry& r);
  nn::Conv2d shared, gamma, beta;
};

/// Residual block with SPADE (or plain normalization when `spade` is false).
class SpadeResBlock {
 public:
  SpadeResBlock() = default;
  SpadeResBlock(int fin, int fout, int label_channels, int hidden, bool spade, bool learned_skip);
  Var operator()(const Var& x, const Var& seg, NormKind norm) const;
  void init(Rng& rng, double std);
  void visit(nn::Registry& r);
  int fin = 0, fout = 0;
  bool use_spade = true, learned_skip = false;
  Spade norm0, norm1, norm_skip;
  nn::Conv2d conv0, conv1, conv_skip;
};

struct DecoderOutput {
  Var features;
  Var seg;
};

/// Sub-pixel x2 upsampling, a 1x1 softmax segmentation head, then a SPADE
/// residual block modulated by the predicted segmentation.
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(int fin, int fout, const GeneratorConfig& cfg);
  DecoderOutput operator()(const Var& x, NormKind norm) const;
  void init(Rng& rng, double std);
  void visit(nn::Registry& r);
  nn::Conv2d upsample, seg_head;
  SpadeResBlock res;
};

struct GenerationOutput {
  Var x_filled;                // (N,3,H,W) in [-1, 1]
  Var s_filled;                // (N,C,H,W) per-pixel simplex
  std::vector<Var> scale_segs;  // one per decoder block, coarse to fine
};

class InpaintGenerator {
 public:
  InpaintGenerator() = default;
  explicit InpaintGenerator(const GeneratorConfig& cfg);

  /// x_in (N,3,H,W) network-space image already multiplied by m; m (N,1,H,W);
  /// s_blanked (N,C,H,W); instance channel (N,1,H,W).
  GenerationOutput operator()(const Var& x_in, const Var& m, const Var& s_blanked, const Var& instance,
                              ShapeTrace* trace = nullptr) const;

  Var encode_image(const Var& x_in, const Var& m, ShapeTrace* trace = nullptr) const;
  Var encode_semantics(const Var& s_blanked, const Var& m, const Var& instance, ShapeTrace* trace = nullptr) const;
  Var fuse(const Var& f_im, const Var& f_se, ShapeTrace* trace = nullptr) const;
  GenerationOutput decode(const Var& fused, ShapeTrace* trace = nullptr) const;

  void init(Rng& rng);
  void visit(nn::Registry& r);

  GeneratorConfig cfg;
  Encoder e_im, e_se;
  std::vector<DilatedResBlock> fusion;
  std::vector<DecoderBlock> blocks;
  SpadeResBlock final_block;
  nn::Conv2d to_rgb;
};

/// Composites generated hole pixels into the known image: x * m + y * (1 - m).
Tensor composite(const Tensor& known, const Tensor& generated, const Tensor& m);

}  // namespace sgi::gen
