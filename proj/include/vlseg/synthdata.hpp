#pragma once

// Shape-world episode generator. Scenes hold 1..max_objects colored shapes;
// rasterization is exact, so ground-truth masks are pixel-perfect and motion
// translates masks by integer offsets (modulo clipping at the border).
// Overlaps are resolved by depth order: a later object occludes earlier ones.

#include "vlseg/data.hpp"
#include "vlseg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace vlseg::synth {

enum class Shape { circle = 0, square = 1, triangle = 2 };

struct SceneObject {
  Shape shape = Shape::circle;
  int color = 0;          // index into color_names()
  double cx = 0, cy = 0;  // pixel coords, frame 0
  double size = 0;        // radius for circles, half-extent otherwise
  double vx = 0, vy = 0;  // pixels per frame
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  int frame_count = 1;
  int image_size = 64;
};

// Palette as exact u8/255 values so frames round-trip through 8-bit files.
inline std::array<std::array<std::uint8_t, 3>, 4> color_palette() {
  return {{{200, 40, 40}, {40, 180, 70}, {50, 90, 220}, {230, 205, 50}}};
}
inline std::array<std::uint8_t, 3> background_color() { return {36, 38, 44}; }

// Point-in-shape test at pixel center (x + .5, y + .5), frame-0 coordinates
// shifted by t * velocity. Pure function of (pixel - center), so integer
// translation of the center translates the mask exactly.
inline bool inside_object(const SceneObject& o, int frame, int x, int y) {
  double px = x + 0.5 - (o.cx + frame * o.vx);
  double py = y + 0.5 - (o.cy + frame * o.vy);
  switch (o.shape) {
    case Shape::circle:
      return px * px + py * py <= o.size * o.size;
    case Shape::square:
      return std::max(std::abs(px), std::abs(py)) <= o.size;
    case Shape::triangle: {
      // Apex-up triangle: vertices (0,-s), (-s,s), (s,s) around the center.
      double s = o.size;
      if (py < -s || py > s) return false;
      double half_width = (py + s) * 0.5;  // grows linearly from apex to base
      return std::abs(px) <= half_width;
    }
  }
  return false;
}

// Renders one frame: occlusion-resolved per-object visible masks plus the
// RGB image as an (H*W) x 3 float tensor.
struct RenderedFrame {
  TensorF image;
  std::vector<BinMask> visible_masks;
};

inline RenderedFrame render_frame(const SceneSpec& scene, int frame) {
  int n = scene.image_size;
  RenderedFrame out;
  out.image = TensorF({n * n, 3});
  out.visible_masks.assign(scene.objects.size(), BinMask(n, n));
  auto palette = color_palette();
  auto bg = background_color();
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      int owner = -1;
      for (int i = 0; i < static_cast<int>(scene.objects.size()); ++i)
        if (inside_object(scene.objects[static_cast<size_t>(i)], frame, x, y)) owner = i;
      int row = y * n + x;
      const auto& c = owner >= 0 ? palette[static_cast<size_t>(
                                       scene.objects[static_cast<size_t>(owner)].color)]
                                 : bg;
      for (int ch = 0; ch < 3; ++ch)
        out.image.at(row, ch) = static_cast<float>(c[static_cast<size_t>(ch)]) / 255.0f;
      if (owner >= 0) out.visible_masks[static_cast<size_t>(owner)].at(y, x) = 1;
    }
  return out;
}

inline std::string shape_word(Shape s) { return class_names()[static_cast<size_t>(s)]; }

// Fixed one-hop property table for reasoning prompts.
struct ReasoningEntry {
  const char* expression;
  Shape target;
};
inline const std::vector<ReasoningEntry>& reasoning_table() {
  static const std::vector<ReasoningEntry> t = {
      {"the object that can roll", Shape::circle},
      {"the object that can stack", Shape::square},
      {"the object with three corners", Shape::triangle}};
  return t;
}

// Which scene objects satisfy a referring expression. This is the generator's
// notion; tests re-derive it independently.
inline std::vector<int> match_expression(const SceneSpec& scene, const std::string& expr) {
  std::vector<int> hit;
  for (int i = 0; i < static_cast<int>(scene.objects.size()); ++i) {
    const auto& o = scene.objects[static_cast<size_t>(i)];
    std::string full = "the " + color_names()[static_cast<size_t>(o.color)] + " " +
                       shape_word(o.shape);
    std::string by_shape = "the " + shape_word(o.shape);
    std::string by_color = "the " + color_names()[static_cast<size_t>(o.color)] + " object";
    if (expr == full || expr == by_shape || expr == by_color) hit.push_back(i);
  }
  return hit;
}

inline const char* instruction_for(TaskTag task) {
  switch (task) {
    case TaskTag::panoptic:
    case TaskTag::vis:
      return "segment all objects by class";
    case TaskTag::referring:
    case TaskTag::reasoning:
      return "segment by expression";
    case TaskTag::visual:
    case TaskTag::vos:
      return "segment given regions";
  }
  return "";
}

// Normalized tight bounding box of a mask.
inline std::array<double, 4> mask_bbox(const BinMask& m) {
  int x0 = m.w, y0 = m.h, x1 = -1, y1 = -1;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.at(y, x)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) return {0, 0, 0, 0};
  return {static_cast<double>(x0) / m.w, static_cast<double>(y0) / m.h,
          static_cast<double>(x1 + 1) / m.w, static_cast<double>(y1 + 1) / m.h};
}

struct GeneratorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Samples a scene whose objects fit inside the image in frame 0, carry
// distinct (color, shape) pairs, and keep enough pairwise distance that
// nothing starts fully occluded.
inline SceneSpec sample_scene(Rng& rng, const ModelConfig& cfg, int frame_count,
                              bool with_motion) {
  int n = cfg.image_size;
  for (int attempt = 0; attempt < 200; ++attempt) {
    SceneSpec scene;
    scene.image_size = n;
    scene.frame_count = frame_count;
    int count = rng.uniform_int(1, cfg.max_objects);
    std::vector<std::pair<int, int>> used;  // (shape, color)
    bool ok = true;
    for (int i = 0; i < count && ok; ++i) {
      SceneObject o;
      for (int tries = 0;; ++tries) {
        if (tries >= 50) {
          ok = false;
          break;
        }
        o.shape = static_cast<Shape>(rng.uniform_int(0, 2));
        o.color = rng.uniform_int(0, static_cast<int>(color_names().size()) - 1);
        if (std::find(used.begin(), used.end(),
                      std::make_pair(static_cast<int>(o.shape), o.color)) == used.end())
          break;
      }
      if (!ok) break;
      used.push_back({static_cast<int>(o.shape), o.color});
      o.size = rng.uniform(n * 0.12, n * 0.2);
      double margin = o.size + 2;
      o.cx = rng.uniform(margin, n - margin);
      o.cy = rng.uniform(margin, n - margin);
      if (with_motion) {
        do {
          o.vx = rng.uniform_int(-2, 2);
          o.vy = rng.uniform_int(-2, 2);
        } while (o.vx == 0 && o.vy == 0);
      }
      bool clear = true;
      for (const auto& prev : scene.objects) {
        double d = std::hypot(prev.cx - o.cx, prev.cy - o.cy);
        if (d < (prev.size + o.size) * 0.9) clear = false;
      }
      if (!clear) {
        ok = false;
        break;
      }
      scene.objects.push_back(o);
    }
    if (ok && !scene.objects.empty()) return scene;
  }
  throw GeneratorError("sample_scene: could not place objects after 200 attempts");
}

namespace detail {

inline std::string canonical_entity_text(const std::vector<int>& shape_classes) {
  std::vector<int> present = shape_classes;
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());
  if (present.empty()) return "none";
  std::string s;
  for (size_t i = 0; i < present.size(); ++i) {
    if (i) s += ' ';
    s += class_names()[static_cast<size_t>(present[i])];
  }
  return s;
}

inline void fill_frames_and_masks(EpisodeSample& ep, const SceneSpec& scene,
                                  const std::vector<int>& object_ids) {
  ep.frames.clear();
  ep.gt_masks.clear();
  for (int t = 0; t < scene.frame_count; ++t) {
    RenderedFrame rf = render_frame(scene, t);
    ep.frames.push_back(std::move(rf.image));
    std::vector<BinMask> frame_masks;
    for (int id : object_ids)
      frame_masks.push_back(rf.visible_masks[static_cast<size_t>(id)]);
    ep.gt_masks.push_back(std::move(frame_masks));
  }
}

}  // namespace detail

// Builds one episode for the requested task family. Referring episodes are
// guaranteed unambiguous: the emitted expression matches exactly the target
// objects (retried against match_expression up to a bound).
inline EpisodeSample generate_episode(Rng& rng, TaskTag task, const ModelConfig& cfg) {
  EpisodeSample ep;
  ep.task = task;
  ep.prompt.instruction = instruction_for(task);
  bool video = is_video_task(task);
  int frames = video ? cfg.video_frames : 1;
  SceneSpec scene = sample_scene(rng, cfg, frames, video);

  auto all_ids = [&] {
    std::vector<int> ids(scene.objects.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    return ids;
  };
  auto shape_of = [&](int id) {
    return static_cast<int>(scene.objects[static_cast<size_t>(id)].shape);
  };

  switch (task) {
    case TaskTag::panoptic:
    case TaskTag::vis: {
      ep.prompt.kind = PromptSpec::Kind::classes;
      ep.prompt.class_names = class_names();
      std::vector<int> ids = all_ids();
      detail::fill_frames_and_masks(ep, scene, ids);
      for (int id : ids) {
        ep.gt_classes.push_back(shape_of(id));
        ep.gt_shape_classes.push_back(shape_of(id));
        ep.gt_identities.push_back(id);
      }
      break;
    }
    case TaskTag::referring: {
      ep.prompt.kind = PromptSpec::Kind::sentence;
      if (rng.bernoulli(cfg.no_target_fraction)) {
        // gRefCOCO-style no-target expression: a (color, shape) pair absent
        // from the scene. Always exists: pairs are distinct and
        // |shapes| * |colors| > max_objects.
        std::string expr;
        for (int tries = 0; tries < 100; ++tries) {
          int s = rng.uniform_int(0, 2);
          int c = rng.uniform_int(0, static_cast<int>(color_names().size()) - 1);
          expr = "the " + color_names()[static_cast<size_t>(c)] + " " +
                 shape_word(static_cast<Shape>(s));
          if (match_expression(scene, expr).empty()) break;
          expr.clear();
        }
        if (expr.empty())
          throw GeneratorError("generate_episode: no unambiguous no-target expression exists");
        ep.prompt.sentence = expr;
        detail::fill_frames_and_masks(ep, scene, {});
      } else {
        int target = rng.uniform_int(0, static_cast<int>(scene.objects.size()) - 1);
        const auto& o = scene.objects[static_cast<size_t>(target)];
        std::vector<std::string> forms;
        forms.push_back("the " + color_names()[static_cast<size_t>(o.color)] + " " +
                        shape_word(o.shape));
        forms.push_back("the " + shape_word(o.shape));
        forms.push_back("the " + color_names()[static_cast<size_t>(o.color)] + " object");
        std::string expr;
        for (int tries = 0; tries < 100; ++tries) {
          const std::string& cand = forms[static_cast<size_t>(
              rng.uniform_int(0, static_cast<int>(forms.size()) - 1))];
          auto hits = match_expression(scene, cand);
          if (hits.size() == 1 && hits[0] == target) {
            expr = cand;
            break;
          }
        }
        if (expr.empty())
          throw GeneratorError("generate_episode: no unambiguous expression for target");
        ep.prompt.sentence = expr;
        detail::fill_frames_and_masks(ep, scene, {target});
        ep.gt_classes.push_back(0);  // the single sentence condition
        ep.gt_shape_classes.push_back(shape_of(target));
        ep.gt_identities.push_back(target);
      }
      break;
    }
    case TaskTag::reasoning: {
      ep.prompt.kind = PromptSpec::Kind::sentence;
      // Pick a property whose class is present; targets = all such objects.
      std::vector<int> candidates;
      for (const auto& entry : reasoning_table()) {
        for (const auto& o : scene.objects)
          if (o.shape == entry.target) {
            candidates.push_back(static_cast<int>(&entry - reasoning_table().data()));
            break;
          }
      }
      int pick = candidates[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))];
      const auto& entry = reasoning_table()[static_cast<size_t>(pick)];
      ep.prompt.sentence = entry.expression;
      std::vector<int> targets;
      for (int i = 0; i < static_cast<int>(scene.objects.size()); ++i)
        if (scene.objects[static_cast<size_t>(i)].shape == entry.target) targets.push_back(i);
      detail::fill_frames_and_masks(ep, scene, targets);
      for (int id : targets) {
        ep.gt_classes.push_back(0);
        ep.gt_shape_classes.push_back(shape_of(id));
        ep.gt_identities.push_back(id);
      }
      break;
    }
    case TaskTag::visual:
    case TaskTag::vos: {
      ep.prompt.kind = PromptSpec::Kind::regions;
      int max_regions = std::min<int>(2, static_cast<int>(scene.objects.size()));
      int k = rng.uniform_int(1, max_regions);
      std::vector<int> ids = all_ids();
      for (int i = static_cast<int>(ids.size()) - 1; i > 0; --i)
        std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(rng.uniform_int(0, i))]);
      ids.resize(static_cast<size_t>(k));
      RenderedFrame f0 = render_frame(scene, 0);
      for (int id : ids) {
        const BinMask& m = f0.visible_masks[static_cast<size_t>(id)];
        Region r;
        if (task == TaskTag::vos) {
          r.kind = Region::Kind::mask;  // first-frame gt mask is the prompt
          r.mask = m;
        } else {
          int kind = rng.uniform_int(0, 2);
          if (kind == 0) {
            r.kind = Region::Kind::box;
            r.box = mask_bbox(m);
          } else if (kind == 1) {
            r.kind = Region::Kind::point;
            const auto& o = scene.objects[static_cast<size_t>(id)];
            r.point = {o.cx / scene.image_size, o.cy / scene.image_size};
          } else {
            r.kind = Region::Kind::mask;
            r.mask = m;
          }
        }
        ep.prompt.regions.push_back(std::move(r));
      }
      detail::fill_frames_and_masks(ep, scene, ids);
      for (size_t i = 0; i < ids.size(); ++i) {
        ep.gt_classes.push_back(static_cast<int>(i));  // region index
        ep.gt_shape_classes.push_back(shape_of(ids[i]));
        ep.gt_identities.push_back(ids[i]);
      }
      break;
    }
  }

  ep.gt_text = detail::canonical_entity_text(ep.gt_shape_classes);
  return ep;
}

// Task mix with optional per-task weights; returns `count` episodes drawn
// with independent per-sample substreams of `seed`.
inline std::vector<EpisodeSample> generate_dataset(std::uint64_t seed, int count,
                                                   const ModelConfig& cfg,
                                                   const std::map<std::string, double>* mix =
                                                       nullptr) {
  std::vector<double> weights;
  for (TaskTag t : kAllTasks) {
    double w = 1.0;
    if (mix) {
      auto it = mix->find(task_name(t));
      w = it == mix->end() ? 0.0 : it->second;
    }
    weights.push_back(w);
  }
  double total = 0;
  for (double w : weights) total += w;
  if (total <= 0) throw std::invalid_argument("generate_dataset: task mix sums to zero");

  Rng master(seed);
  std::vector<EpisodeSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng sub = master.fork(static_cast<std::uint64_t>(i));
    double u = sub.uniform() * total;
    size_t pick = 0;
    for (; pick + 1 < weights.size(); ++pick) {
      if (u < weights[pick]) break;
      u -= weights[pick];
    }
    out.push_back(generate_episode(sub, kAllTasks[pick], cfg));
  }
  return out;
}

}  // namespace vlseg::synth
