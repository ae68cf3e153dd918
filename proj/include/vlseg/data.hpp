#pragma once

// Episode-level domain types shared by the generator, model, and metrics.
// All region coordinates are normalized to [0, 1] so they are resolution-free.

#include "vlseg/config.hpp"
#include "vlseg/tensor.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace vlseg {

// Binary mask, row-major h x w.
struct BinMask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> v;

  BinMask() = default;
  BinMask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}

  std::uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  std::int64_t area() const {
    std::int64_t a = 0;
    for (auto b : v) a += b;
    return a;
  }
  bool empty() const { return area() == 0; }
  bool operator==(const BinMask& o) const { return h == o.h && w == o.w && v == o.v; }
};

inline std::int64_t mask_intersection(const BinMask& a, const BinMask& b) {
  std::int64_t n = 0;
  for (size_t i = 0; i < a.v.size(); ++i) n += (a.v[i] & b.v[i]);
  return n;
}
inline std::int64_t mask_union(const BinMask& a, const BinMask& b) {
  std::int64_t n = 0;
  for (size_t i = 0; i < a.v.size(); ++i) n += (a.v[i] | b.v[i]);
  return n;
}

struct Region {
  enum class Kind { box, point, mask };
  Kind kind = Kind::box;
  std::array<double, 4> box{};   // x0, y0, x1, y1 normalized
  std::array<double, 2> point{}; // x, y normalized
  BinMask mask;                  // full-resolution binary mask

  bool operator==(const Region& o) const {
    return kind == o.kind && box == o.box && point == o.point && mask == o.mask;
  }
};

struct PromptSpec {
  enum class Kind { classes, sentence, regions };
  Kind kind = Kind::classes;
  std::string instruction;
  std::vector<std::string> class_names;  // kind == classes
  std::string sentence;                  // kind == sentence
  std::vector<Region> regions;           // kind == regions

  // Number of condition entries K.
  int condition_count() const {
    switch (kind) {
      case Kind::classes: return static_cast<int>(class_names.size());
      case Kind::sentence: return 1;
      case Kind::regions: return static_cast<int>(regions.size());
    }
    return 0;
  }

  bool operator==(const PromptSpec& o) const {
    return kind == o.kind && instruction == o.instruction && class_names == o.class_names &&
           sentence == o.sentence && regions == o.regions;
  }
};

// One training/eval unit. Frames are (H*W) x 3 float tensors in [0, 1].
// gt_masks[t][i] is object i's visible mask in frame t (disjoint within a
// frame). gt_classes are condition-relative indices supervising class scores;
// gt_shape_classes index the global shape-class list and drive the entity
// names of the text target.
struct EpisodeSample {
  TaskTag task = TaskTag::panoptic;
  std::vector<TensorF> frames;
  PromptSpec prompt;
  std::vector<std::vector<BinMask>> gt_masks;
  std::vector<int> gt_classes;
  std::vector<int> gt_shape_classes;
  std::vector<int> gt_identities;
  std::string gt_text;  // entity-name prefix of the text target, e.g. "circle square"

  int num_frames() const { return static_cast<int>(frames.size()); }
  int num_objects() const { return static_cast<int>(gt_classes.size()); }

  // Classes visible (nonempty mask) in one frame, as shape-class indices.
  std::vector<int> present_shape_classes(int frame) const {
    std::vector<int> present;
    for (size_t i = 0; i < gt_masks[static_cast<size_t>(frame)].size(); ++i)
      if (!gt_masks[static_cast<size_t>(frame)][i].empty())
        present.push_back(gt_shape_classes[i]);
    std::sort(present.begin(), present.end());
    present.erase(std::unique(present.begin(), present.end()), present.end());
    return present;
  }
};

inline bool episode_equal(const EpisodeSample& a, const EpisodeSample& b) {
  if (a.task != b.task || a.frames.size() != b.frames.size()) return false;
  for (size_t t = 0; t < a.frames.size(); ++t)
    if (!bitwise_equal(a.frames[t], b.frames[t])) return false;
  if (!(a.prompt == b.prompt)) return false;
  if (a.gt_masks != b.gt_masks) return false;
  return a.gt_classes == b.gt_classes && a.gt_shape_classes == b.gt_shape_classes &&
         a.gt_identities == b.gt_identities && a.gt_text == b.gt_text;
}

}  // namespace vlseg
