#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include "sgi/training.hpp"

namespace sgi::infer {

class InferenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Inpainting {
  Tensor composite;  // (1,3,H,W) in [0,1], known pixels copied from the input
  Tensor raw;        // (1,3,H,W) generator output mapped to [0,1]
  Tensor seg;        // (1,C,H,W) predicted class probabilities
  std::vector<int32_t> labels;  // argmax of seg, H*W
};

/// image (1,3,H,W) in [0,1]; seg_onehot (1,C,H,W) (blanked inside the hole here);
/// m (1,1,H,W) keep-mask; instance (1,1,H,W). H and W must be multiples of 16.
Inpainting inpaint(train::Models& models, const Tensor& image, const Tensor& seg_onehot, const Tensor& m,
                   const Tensor& instance);

/// Samples z ~ N(0, I) from rng, generates a canonical shape and places it at theta (thresholded).
Tensor generate_instance(train::Models& models, data::ObjectClass cls, const nn::Affine& theta, int height, int width,
                         Rng& rng);

/// Bounding box of the hole (m == 0); nullopt for a mask without holes.
std::optional<data::BBox> hole_bbox(const Tensor& m);

/// Location for a new instance: a prior sample whose box fits inside the hole
/// box, else a prior sample scaled down into it, else the hole box itself.
data::BBox sample_location(const train::LocationPrior& prior, data::ObjectClass cls, const data::BBox& hole, int height,
                           int width, Rng& rng);

}  // namespace sgi::infer
