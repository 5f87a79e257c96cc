#pragma once

#include "sslseg/bbox.hpp"
#include "sslseg/image.hpp"

namespace sslseg {

/// One scored prediction. `patch` is the head output resampled later to the
/// box: real-valued pixels in the restoration phase, probabilities in the
/// mask phase (and box-sized original content in test oracles).
struct Detection {
  BBox box;
  int class_id = 0;  // 0 = background
  double score = 0.0;
  Image patch;
};

}  // namespace sslseg
