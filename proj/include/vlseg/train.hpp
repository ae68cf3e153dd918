#pragma once

// Joint multi-task training: AdamW with linear warmup + cosine decay to zero,
// global-norm gradient clipping, uniform sampling over the dataset, periodic
// validation + checkpointing, and a divergence detector. Fully deterministic
// for a fixed config and seed; resume restores parameters, optimizer moments,
// and the sampling rng stream.

#include "vlseg/checkpoint.hpp"
#include "vlseg/model.hpp"
#include "vlseg/rng.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

namespace vlseg::train {

inline double cosine_lr(int step, const ModelConfig& cfg) {
  int total = cfg.train_steps;
  int warm = std::min(cfg.warmup_steps, total);
  if (step < warm) return cfg.lr * (step + 1) / static_cast<double>(warm);
  if (total <= warm) return cfg.lr;
  double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return 0.5 * cfg.lr * (1.0 + std::cos(M_PI * progress));
}

class AdamW {
 public:
  AdamW(nn::ParamStore<float>& ps, double weight_decay)
      : ps_(&ps), weight_decay_(weight_decay) {
    for (size_t i = 0; i < ps.size(); ++i) {
      m_.push_back(TensorF::zeros(ps.entry(i).var.val().shape));
      v_.push_back(TensorF::zeros(ps.entry(i).var.val().shape));
    }
  }

  // Global-norm clip over trainable parameters, then one decoupled update.
  void step(double lr, double grad_clip) {
    ++t_;
    double norm_sq = 0;
    for (size_t i = 0; i < ps_->size(); ++i) {
      if (!ps_->entry(i).trainable) continue;
      for (float g : ps_->entry(i).var.grad().data) norm_sq += static_cast<double>(g) * g;
    }
    double scale = 1.0;
    double norm = std::sqrt(norm_sq);
    if (grad_clip > 0 && norm > grad_clip) scale = grad_clip / norm;

    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < ps_->size(); ++i) {
      auto& e = ps_->entry(i);
      if (!e.trainable) continue;
      auto& val = e.var.node()->value;
      auto& grad = e.var.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t k = 0; k < val.data.size(); ++k) {
        double g = grad.data[k] * scale;
        m.data[k] = static_cast<float>(beta1_ * m.data[k] + (1 - beta1_) * g);
        v.data[k] = static_cast<float>(beta2_ * v.data[k] + (1 - beta2_) * g * g);
        double mhat = m.data[k] / bc1, vhat = v.data[k] / bc2;
        double update = mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * val.data[k];
        val.data[k] = static_cast<float>(val.data[k] - lr * update);
      }
    }
  }

  ckpt::OptimizerState state() const { return {t_, m_, v_}; }
  void restore(const ckpt::OptimizerState& s) {
    if (s.m.size() != m_.size())
      throw std::runtime_error("optimizer state size mismatch on resume");
    t_ = s.step;
    m_ = s.m;
    v_ = s.v;
  }

 private:
  nn::ParamStore<float>* ps_;
  double weight_decay_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::vector<TensorF> m_, v_;
};

struct StepLog {
  int step = 0;
  double lr = 0, loss = 0, text = 0, mask = 0, cls = 0, ins = 0;
};

struct TrainResult {
  std::vector<StepLog> log;
  std::string checkpoint_path;
  std::vector<std::pair<int, double>> val_losses;
};

struct TrainOptions {
  std::string out_dir;
  std::string resume_from;  // optional checkpoint path
  bool quiet = true;
  std::function<void(const StepLog&)> on_step;
};

inline double episode_loss_value(SegModel<float>& model, const EpisodeSample& s) {
  auto out = model.forward_episode(s, true);
  return static_cast<double>(out.total.item());
}

inline TrainResult train(SegModel<float>& model, const std::vector<EpisodeSample>& dataset,
                         const std::vector<EpisodeSample>* val_data, const TrainOptions& opts) {
  const ModelConfig& cfg = model.config();
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");
  namespace fs = std::filesystem;
  if (!opts.out_dir.empty()) fs::create_directories(opts.out_dir);

  Rng sampler(splitmix64(static_cast<std::uint64_t>(cfg.seed) ^ 0x7261696e5f726e67ULL));
  AdamW opt(model.params(), cfg.weight_decay);
  int start_step = 0;
  if (!opts.resume_from.empty()) {
    ckpt::Checkpoint c = ckpt::load_checkpoint(opts.resume_from);
    ckpt::require_config_match(c.cfg, cfg);
    ckpt::apply_parameters(model, c);
    if (c.optimizer) opt.restore(*c.optimizer);
    sampler.deserialize(c.rng_state);
    start_step = static_cast<int>(c.step);
  }

  TrainResult res;
  double initial_loss = -1;
  int divergent_streak = 0;

  for (int step = start_step; step < cfg.train_steps; ++step) {
    double lr = cosine_lr(step, cfg);
    model.params().zero_grad();
    double loss_sum = 0, text_sum = 0, mask_sum = 0, cls_sum = 0, ins_sum = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      int idx = sampler.uniform_int(0, static_cast<int>(dataset.size()) - 1);
      auto out = model.forward_episode(dataset[static_cast<size_t>(idx)], true);
      Var<float> scaled = ag::scalar_mul(out.total, 1.0 / cfg.batch_size);
      ag::backward(scaled);
      loss_sum += out.total.item();
      if (out.parts.text.defined()) text_sum += out.parts.text.item();
      if (out.parts.mask.defined()) mask_sum += out.parts.mask.item();
      if (out.parts.cls.defined()) cls_sum += out.parts.cls.item();
      if (out.parts.ins.defined()) ins_sum += out.parts.ins.item();
    }
    opt.step(lr, cfg.grad_clip);

    StepLog log;
    log.step = step;
    log.lr = lr;
    log.loss = loss_sum / cfg.batch_size;
    log.text = text_sum / cfg.batch_size;
    log.mask = mask_sum / cfg.batch_size;
    log.cls = cls_sum / cfg.batch_size;
    log.ins = ins_sum / cfg.batch_size;
    res.log.push_back(log);
    if (opts.on_step) opts.on_step(log);

    if (initial_loss < 0) initial_loss = log.loss;
    if (log.loss > 10.0 * initial_loss) {
      if (++divergent_streak >= 100)
        throw std::runtime_error(
            "training diverged: loss " + std::to_string(log.loss) + " vs initial " +
            std::to_string(initial_loss) + " for 100 consecutive steps (step " +
            std::to_string(step) + ")");
    } else {
      divergent_streak = 0;
    }

    bool at_eval = cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0;
    if (at_eval && !opts.out_dir.empty()) {
      if (val_data && !val_data->empty()) {
        ag::NoGradGuard no_grad;
        double val = 0;
        int n = std::min<int>(32, static_cast<int>(val_data->size()));
        for (int i = 0; i < n; ++i)
          val += episode_loss_value(model, (*val_data)[static_cast<size_t>(i)]);
        res.val_losses.push_back({step + 1, val / n});
        if (!opts.quiet)
          std::cerr << "step " << step + 1 << " val_loss " << val / n << "\n";
      }
      auto opt_state = opt.state();
      ckpt::save_checkpoint(opts.out_dir + "/ckpt_latest.bin", model, sampler.serialize(),
                            step + 1, &opt_state);
    }
  }

  if (!opts.out_dir.empty()) {
    auto opt_state = opt.state();
    res.checkpoint_path = opts.out_dir + "/checkpoint.bin";
    ckpt::save_checkpoint(res.checkpoint_path, model, sampler.serialize(), cfg.train_steps,
                          &opt_state);
    std::ofstream log_file(opts.out_dir + "/train_log.txt");
    log_file << "step lr loss text mask cls ins\n";
    for (const auto& l : res.log) {
      log_file.precision(8);
      log_file << l.step << " " << l.lr << " " << l.loss << " " << l.text << " " << l.mask
               << " " << l.cls << " " << l.ins << "\n";
    }
  }
  return res;
}

}  // namespace vlseg::train
