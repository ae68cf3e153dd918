#pragma once

// Evaluation harness: runs inference per episode, applies the task's output
// selection, and aggregates the metric battery into a structured-text report
// with stable keys. Entity-name token accuracy compares the generated prefix
// (tokens before the first mask token) against the target prefix.

#include "vlseg/her.hpp"
#include "vlseg/metrics.hpp"
#include "vlseg/model.hpp"
#include "vlseg/predictor.hpp"

#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace vlseg::eval {

struct Report {
  std::string task;
  int samples = 0;
  std::vector<std::pair<std::string, double>> values;

  double get(const std::string& key) const {
    for (const auto& [k, v] : values)
      if (k == key) return v;
    throw std::out_of_range("report has no key '" + key + "'");
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "task = " << task << "\n";
    os << "samples = " << samples << "\n";
    os << std::fixed << std::setprecision(6);
    for (const auto& [k, v] : values) os << k << " = " << v << "\n";
    return os.str();
  }

  void write(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write report: " + path);
    f << to_text();
  }
};

namespace detail {

inline BinMask union_of(const std::vector<BinMask>& masks, int h, int w) {
  BinMask out(h, w);
  for (const auto& m : masks)
    for (size_t i = 0; i < m.v.size(); ++i) out.v[i] |= m.v[i];
  return out;
}

// Generation-only strategy: class probabilities come from the parsed entity
// names, uniform over the parsed set (repeats collapsed); applies to
// class-list prompts, where condition index == shape class index.
inline void override_probs_from_entities(PredictionView& view,
                                         const her::ParsedEntities& parsed) {
  int k = view.z.cols() - 1;
  std::vector<double> probs(static_cast<size_t>(k) + 1, 0.0);
  if (parsed.entities.empty()) {
    probs[static_cast<size_t>(k)] = 1.0;
  } else {
    for (int c : parsed.entities)
      if (c >= 0 && c < k) probs[static_cast<size_t>(c)] = 1.0 / parsed.entities.size();
  }
  for (auto& row : view.class_probs) row = probs;
}

// Token accuracy of the generated entity prefix against the target prefix;
// length mismatches count as errors on the longer side.
inline std::pair<double, double> entity_token_accuracy(const std::vector<int>& generated,
                                                       const EpisodeSample& sample, int frame,
                                                       const Vocab& vocab) {
  std::vector<int> target;
  for (int id : her::build_her_target(sample, frame, vocab)) {
    if (vocab.is_seg(id)) break;
    target.push_back(id);
  }
  std::vector<int> got;
  for (int id : generated) {
    if (vocab.is_seg(id) || id == vocab.eos) break;
    got.push_back(id);
  }
  size_t denom = std::max(target.size(), got.size());
  if (denom == 0) return {1.0, 1.0};
  size_t hit = 0;
  for (size_t i = 0; i < std::min(target.size(), got.size()); ++i)
    if (target[i] == got[i]) ++hit;
  return {static_cast<double>(hit), static_cast<double>(denom)};
}

}  // namespace detail

template <typename T>
Report evaluate(const SegModel<T>& model, const std::vector<EpisodeSample>& dataset,
                TaskTag task) {
  const ModelConfig& cfg = model.config();
  std::vector<const EpisodeSample*> samples;
  for (const auto& s : dataset)
    if (s.task == task) samples.push_back(&s);
  if (samples.empty())
    throw std::invalid_argument("evaluate: dataset contains no '" + task_name(task) +
                                "' samples (task/dataset mismatch)");

  Report report;
  report.task = task_name(task);
  report.samples = static_cast<int>(samples.size());

  double her_hits = 0, her_total = 0;
  bool generation_path = cfg.recognition != Recognition::decode_only;

  std::vector<BinMask> pred_masks, gt_masks;            // referring/reasoning/visual
  int no_target = 0, no_target_correct = 0;
  metrics::PanopticAccumulator pano;
  double jf_j = 0, jf_f = 0, jf_sum = 0;
  int jf_objects = 0;
  double map_sum = 0;
  int map_videos = 0;

  for (const EpisodeSample* sp : samples) {
    const EpisodeSample& s = *sp;
    auto out = model.forward_episode(s, false);
    std::vector<PredictionView> views;
    for (auto& f : out.frames) {
      PredictionView v = PredictionView::from(f.pred);
      if (cfg.recognition == Recognition::generation_only &&
          s.prompt.kind == PromptSpec::Kind::classes)
        detail::override_probs_from_entities(v, f.extract.parsed);
      views.push_back(std::move(v));
    }
    if (generation_path)
      for (size_t t = 0; t < out.frames.size(); ++t) {
        auto [hit, denom] = detail::entity_token_accuracy(out.frames[t].generated, s,
                                                          static_cast<int>(t), cfg.vocab);
        her_hits += hit;
        her_total += denom;
      }

    switch (task) {
      case TaskTag::referring:
      case TaskTag::reasoning: {
        BinMask pred = select_referring(views[0], cfg.target_threshold, cfg.mask_threshold);
        BinMask gt = detail::union_of(s.gt_masks[0], cfg.image_size, cfg.image_size);
        if (gt.empty()) {
          ++no_target;
          if (pred.empty()) ++no_target_correct;
        }
        pred_masks.push_back(std::move(pred));
        gt_masks.push_back(std::move(gt));
        break;
      }
      case TaskTag::visual: {
        auto region_masks =
            select_visual(views[0], s.prompt.condition_count(), cfg.mask_threshold);
        for (int r = 0; r < s.prompt.condition_count(); ++r) {
          pred_masks.push_back(region_masks[static_cast<size_t>(r)]);
          gt_masks.push_back(s.gt_masks[0][static_cast<size_t>(r)]);
        }
        break;
      }
      case TaskTag::panoptic: {
        auto segs = select_panoptic(views[0], cfg.mask_threshold);
        std::vector<metrics::LabeledSegment> pred_segs, gt_segs;
        for (auto& sg : segs) pred_segs.push_back({std::move(sg.mask), sg.class_id});
        for (size_t i = 0; i < s.gt_masks[0].size(); ++i)
          if (!s.gt_masks[0][i].empty())
            gt_segs.push_back({s.gt_masks[0][i], s.gt_classes[i]});
        pano.add(pred_segs, gt_segs);
        break;
      }
      case TaskTag::vos: {
        auto per_region = select_vos(views, s.prompt.condition_count(), cfg.mask_threshold);
        for (int r = 0; r < s.prompt.condition_count(); ++r) {
          std::vector<BinMask> gt_frames;
          for (int t = 0; t < s.num_frames(); ++t)
            gt_frames.push_back(s.gt_masks[static_cast<size_t>(t)][static_cast<size_t>(r)]);
          auto jf = metrics::j_and_f(per_region[static_cast<size_t>(r)], gt_frames);
          jf_j += jf.j;
          jf_f += jf.f;
          jf_sum += jf.jf;
          ++jf_objects;
        }
        break;
      }
      case TaskTag::vis: {
        auto tracks = link_tracks(views, cfg.mask_threshold, cfg.link_threshold);
        std::vector<metrics::EvalTrack> preds, gts;
        for (auto& tr : tracks)
          preds.push_back({std::move(tr.masks), tr.class_id, tr.confidence});
        for (int i = 0; i < s.num_objects(); ++i) {
          metrics::EvalTrack g;
          g.class_id = s.gt_classes[static_cast<size_t>(i)];
          for (int t = 0; t < s.num_frames(); ++t)
            g.masks.push_back(s.gt_masks[static_cast<size_t>(t)][static_cast<size_t>(i)]);
          gts.push_back(std::move(g));
        }
        map_sum += metrics::video_map(preds, gts);
        ++map_videos;
        break;
      }
    }
  }

  switch (task) {
    case TaskTag::referring:
    case TaskTag::reasoning:
      report.values.push_back({"ciou", metrics::ciou(pred_masks, gt_masks)});
      report.values.push_back({"giou", metrics::giou(pred_masks, gt_masks)});
      report.values.push_back({"no_target_count", static_cast<double>(no_target)});
      report.values.push_back({"no_target_correct", static_cast<double>(no_target_correct)});
      break;
    case TaskTag::visual:
      report.values.push_back({"ciou", metrics::ciou(pred_masks, gt_masks)});
      report.values.push_back({"giou", metrics::giou(pred_masks, gt_masks)});
      break;
    case TaskTag::panoptic: {
      auto pr = pano.result();
      report.values.push_back({"pq", pr.pq});
      report.values.push_back({"sq", pr.sq});
      report.values.push_back({"rq", pr.rq});
      report.values.push_back({"miou", pr.miou});
      break;
    }
    case TaskTag::vos:
      report.values.push_back({"j", jf_objects ? jf_j / jf_objects : 0.0});
      report.values.push_back({"f", jf_objects ? jf_f / jf_objects : 0.0});
      report.values.push_back({"jf", jf_objects ? jf_sum / jf_objects : 0.0});
      break;
    case TaskTag::vis:
      report.values.push_back({"map", map_videos ? map_sum / map_videos : 0.0});
      break;
  }
  if (generation_path)
    report.values.push_back({"her_token_acc", her_total > 0 ? her_hits / her_total : 1.0});
  return report;
}

}  // namespace vlseg::eval
