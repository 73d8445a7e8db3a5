#pragma once

#include <cstdint>
#include <string>

#include "voldeform/deform.hpp"
#include "voldeform/errors.hpp"

namespace voldeform {

// The spatial mixing operator inside an encoder block. kPlainDepthwise runs
// the deformable kernel with a zero offset field and no offset branch, so a
// freshly initialized deformable network and its plain twin produce
// bit-identical outputs.
enum class BlockOperator { kDdc, kStandardDeform, kPlainDepthwise };

// Second residual branch of a block.
enum class ScalingKind { kMlp, kDepthwiseConv, kNone };

struct BlockSettings {
  BlockOperator op = BlockOperator::kDdc;
  int64_t offset_kernel = 1;  // pointwise (1) or 3-cube offset prediction
  PlaneMask plane_mask{};
  ScalingKind scaling = ScalingKind::kMlp;
  int64_t mlp_ratio = 4;

  bool has_offset_branch() const {
    return op != BlockOperator::kPlainDepthwise;
  }

  void validate() const {
    plane_mask.validate();
    if (offset_kernel != 1 && offset_kernel != 3) {
      throw ConfigError("offset kernel must be 1 or 3, got " +
                        std::to_string(offset_kernel));
    }
    if (mlp_ratio < 1) {
      throw ConfigError("mlp ratio must be positive");
    }
  }
};

inline std::string to_string(BlockOperator op) {
  switch (op) {
    case BlockOperator::kDdc:
      return "ddc";
    case BlockOperator::kStandardDeform:
      return "standard-deform";
    case BlockOperator::kPlainDepthwise:
      return "plain-depthwise";
  }
  throw ConfigError("bad block operator value");
}

inline BlockOperator block_operator_from_string(const std::string& s) {
  if (s == "ddc") return BlockOperator::kDdc;
  if (s == "standard-deform") return BlockOperator::kStandardDeform;
  if (s == "plain-depthwise") return BlockOperator::kPlainDepthwise;
  throw ConfigError("unknown block operator '" + s +
                    "' (expected ddc, standard-deform or plain-depthwise)");
}

inline std::string to_string(ScalingKind s) {
  switch (s) {
    case ScalingKind::kMlp:
      return "mlp";
    case ScalingKind::kDepthwiseConv:
      return "depthwise-conv";
    case ScalingKind::kNone:
      return "none";
  }
  throw ConfigError("bad scaling kind value");
}

inline ScalingKind scaling_from_string(const std::string& s) {
  if (s == "mlp") return ScalingKind::kMlp;
  if (s == "depthwise-conv") return ScalingKind::kDepthwiseConv;
  if (s == "none") return ScalingKind::kNone;
  throw ConfigError("unknown scaling kind '" + s +
                    "' (expected mlp, depthwise-conv or none)");
}

// "hwd", "hw", "hd", "wd" style axis sets for the plane ablation
inline std::string to_string(const PlaneMask& m) {
  std::string s;
  if (m.height) s += 'h';
  if (m.width) s += 'w';
  if (m.depth) s += 'd';
  return s;
}

inline PlaneMask plane_mask_from_string(const std::string& s) {
  PlaneMask m{false, false, false};
  for (char c : s) {
    if (c == 'h') {
      m.height = true;
    } else if (c == 'w') {
      m.width = true;
    } else if (c == 'd') {
      m.depth = true;
    } else {
      throw ConfigError("unknown plane axis '" + std::string(1, c) +
                        "' in mask '" + s + "' (use subsets of hwd)");
    }
  }
  if (!m.height && !m.width && !m.depth) {
    throw ConfigError("plane mask '" + s + "' keeps no axis");
  }
  return m;
}

}  // namespace voldeform
