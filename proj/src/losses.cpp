#include "sslseg/losses.hpp"

#include <nlohmann/json.hpp>

namespace sslseg {

nlohmann::json LossReport::to_json() const {
  return nlohmann::json{{"l_total", l_total},   {"l_rpn_obj", l_rpn_obj},
                        {"l_rpn_box", l_rpn_box}, {"l_cls", l_cls},
                        {"l_bbox", l_bbox},     {"l_patch", l_patch},
                        {"n_pos", n_pos},       {"n_sampled", n_sampled},
                        {"no_positives", no_positives}};
}

}  // namespace sslseg
