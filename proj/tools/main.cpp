// vlseg command-line interface: dataset generation, training, evaluation,
// ablation sweeps, and checkpoint inspection. Values from a --config file
// override command-line flags (flags fill the config first, then the file is
// applied on top).

#include "vlseg/ablate.hpp"
#include "vlseg/checkpoint.hpp"
#include "vlseg/dataset_io.hpp"
#include "vlseg/evaluate.hpp"
#include "vlseg/synthdata.hpp"
#include "vlseg/train.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

namespace {

using namespace vlseg;

struct CommonFlags {
  std::string config_path;
  int seed = -1;
  std::string recognition;
  int temporal_global = -1, temporal_local = -1;
  std::string temporal_global_mode;
  int lora = -1, freeze_towers = -1, fvp = -1;
  double lr = -1;
  int steps = -1, batch_size = -1;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "config file (key = value per line); overrides flags");
    app->add_option("--seed", seed, "rng seed");
    app->add_option("--recognition-strategy", recognition,
                    "hybrid | generation_only | decode_only");
    app->add_option("--temporal-global", temporal_global, "global prompt aggregation on|off (1|0)");
    app->add_option("--temporal-local", temporal_local, "local space-time injection on|off (1|0)");
    app->add_option("--temporal-global-mode", temporal_global_mode, "replace | include_current");
    app->add_option("--lora", lora, "train attention adapters instead of full fine-tune (1|0)");
    app->add_option("--freeze-towers", freeze_towers, "freeze both vision towers (1|0)");
    app->add_option("--fvp", fvp, "fine-grained visual perceiver on|off (1|0)");
    app->add_option("--lr", lr, "peak learning rate");
    app->add_option("--steps", steps, "training steps");
    app->add_option("--batch-size", batch_size, "batch size");
  }

  ModelConfig build() const {
    ModelConfig cfg;
    if (seed >= 0) cfg.seed = seed;
    if (!recognition.empty()) cfg.recognition = recognition_from_name(recognition);
    if (temporal_global >= 0) cfg.temporal_global = temporal_global != 0;
    if (temporal_local >= 0) cfg.temporal_local = temporal_local != 0;
    if (!temporal_global_mode.empty()) {
      if (temporal_global_mode == "replace")
        cfg.temporal_include_current = false;
      else if (temporal_global_mode == "include_current")
        cfg.temporal_include_current = true;
      else
        throw std::invalid_argument("--temporal-global-mode must be replace or include_current");
    }
    if (lora >= 0) cfg.use_lora = lora != 0;
    if (freeze_towers >= 0) cfg.freeze_towers = freeze_towers != 0;
    if (fvp >= 0) cfg.fvp_enabled = fvp != 0;
    if (lr > 0) cfg.lr = lr;
    if (steps > 0) cfg.train_steps = steps;
    if (batch_size > 0) cfg.batch_size = batch_size;
    if (!config_path.empty()) cfg = load_config_file(config_path, cfg);
    return validate_config(cfg);
  }
};

std::map<std::string, double> parse_task_mix(const std::string& spec) {
  std::map<std::string, double> mix;
  for (TaskTag t : kAllTasks) mix[task_name(t)] = 0.0;
  if (spec == "uniform" || spec.empty()) {
    for (auto& [k, v] : mix) v = 1.0;
    return mix;
  }
  std::istringstream is(spec);
  std::string part;
  while (std::getline(is, part, ',')) {
    size_t colon = part.find(':');
    std::string name = colon == std::string::npos ? part : part.substr(0, colon);
    double w = colon == std::string::npos ? 1.0 : std::stod(part.substr(colon + 1));
    if (!mix.count(name)) throw std::invalid_argument("unknown task in --task-mix: " + name);
    mix[name] = w;
  }
  return mix;
}

int cmd_gen_data(const std::string& mix_spec, int count, int seed, const std::string& out,
                 const CommonFlags& flags) {
  ModelConfig cfg = flags.build();
  auto mix = parse_task_mix(mix_spec);
  auto samples = synth::generate_dataset(static_cast<std::uint64_t>(seed), count, cfg, &mix);
  io::write_dataset(samples, out, cfg.image_size);
  std::cout << "wrote " << samples.size() << " samples to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& data, const std::string& val_data, const std::string& out,
              const std::string& resume, const CommonFlags& flags) {
  ModelConfig cfg = flags.build();
  auto train_set = io::read_dataset(data);
  std::vector<EpisodeSample> val_set;
  if (!val_data.empty()) val_set = io::read_dataset(val_data);
  SegModel<float> model(cfg);
  train::TrainOptions opts;
  opts.out_dir = out;
  opts.resume_from = resume;
  opts.quiet = false;
  opts.on_step = [&](const train::StepLog& l) {
    if (l.step % 50 == 0)
      std::cout << "step " << l.step << " lr " << l.lr << " loss " << l.loss << " (text "
                << l.text << " mask " << l.mask << " cls " << l.cls << " ins " << l.ins
                << ")\n";
  };
  auto res = train::train(model, train_set, val_set.empty() ? nullptr : &val_set, opts);
  std::cout << "checkpoint: " << res.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& task,
             const std::string& out, const CommonFlags& flags) {
  ckpt::Checkpoint c = ckpt::load_checkpoint(checkpoint);
  if (!flags.config_path.empty() || flags.seed >= 0) {
    ModelConfig requested = flags.build();
    ckpt::require_config_match(c.cfg, requested);
  }
  SegModel<float> model(c.cfg);
  ckpt::apply_parameters(model, c);
  auto dataset = io::read_dataset(data);
  std::vector<std::string> tasks;
  if (task == "all") {
    for (TaskTag t : kAllTasks) tasks.push_back(task_name(t));
  } else {
    tasks.push_back(task);
  }
  std::ostringstream combined;
  for (const auto& tname : tasks) {
    auto report = eval::evaluate(model, dataset, task_from_name(tname));
    combined << report.to_text() << "\n";
  }
  if (out.empty()) {
    std::cout << combined.str();
  } else {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write report: " + out);
    f << combined.str();
    std::cout << "report written to " << out << "\n";
  }
  return 0;
}

int cmd_ablate(const std::string& axes_spec, const std::string& data, const std::string& val_data,
               const std::string& out, const CommonFlags& flags) {
  ModelConfig cfg = flags.build();
  std::vector<std::string> axes;
  std::istringstream is(axes_spec);
  std::string axis;
  while (std::getline(is, axis, ',')) axes.push_back(axis);
  auto train_set = io::read_dataset(data);
  auto val_set = io::read_dataset(val_data);
  auto results = ablate::run_ablation(cfg, axes, train_set, val_set, out, false);
  std::string table = ablate::format_table(results);
  std::cout << table;
  if (!out.empty()) {
    std::ofstream f(out + "/ablation_table.txt");
    f << table;
  }
  return 0;
}

int cmd_inspect(const std::string& checkpoint) {
  ckpt::Checkpoint c = ckpt::load_checkpoint(checkpoint);
  std::cout << "step = " << c.step << "\n";
  std::cout << "rng_state_bytes = " << c.rng_state.size() << "\n";
  std::cout << "optimizer_state = " << (c.optimizer ? "present" : "absent") << "\n";
  std::int64_t total = 0;
  for (const auto& [name, t] : c.params) total += t.size();
  std::cout << "parameters = " << c.params.size() << " tensors, " << total << " scalars\n";
  for (const auto& [name, t] : c.params) std::cout << "  " << name << " " << t.shape_str() << "\n";
  std::cout << "--- config ---\n" << serialize_config(c.cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"shape-world vision-language segmentation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset split");
  std::string mix = "uniform", gen_out;
  int gen_count = 512, gen_seed = 0;
  CommonFlags gen_flags;
  gen->add_option("--task-mix", mix, "uniform or task:weight list, e.g. panoptic:2,vis:1");
  gen->add_option("--count", gen_count, "number of episodes")->required();
  gen->add_option("--gen-seed", gen_seed, "dataset seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen_flags.attach(gen);

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_data, tr_val, tr_out = "runs/train", tr_resume;
  CommonFlags tr_flags;
  tr->add_option("--data", tr_data, "training dataset directory")->required();
  tr->add_option("--val-data", tr_val, "validation dataset directory");
  tr->add_option("--out", tr_out, "output directory for checkpoints and logs");
  tr->add_option("--resume", tr_resume, "resume from checkpoint");
  tr_flags.attach(tr);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_task = "all", ev_out;
  CommonFlags ev_flags;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "evaluation dataset directory")->required();
  ev->add_option("--task", ev_task, "task tag or 'all'");
  ev->add_option("--out", ev_out, "report file (stdout if omitted)");
  ev_flags.attach(ev);

  // ablate
  auto* ab = app.add_subcommand("ablate", "axis sweeps with shared seed and data");
  std::string ab_axes, ab_data, ab_val, ab_out = "runs/ablate";
  CommonFlags ab_flags;
  ab->add_option("--axes", ab_axes,
                 "comma list of fvp, her-strategy, conditional-weight, scale-count, "
                 "temporal-global, temporal-local")
      ->required();
  ab->add_option("--data", ab_data, "training dataset directory")->required();
  ab->add_option("--val-data", ab_val, "validation dataset directory")->required();
  ab->add_option("--out", ab_out, "output directory");
  ab_flags.attach(ab);

  // inspect-checkpoint
  auto* insp = app.add_subcommand("inspect-checkpoint", "print checkpoint manifest");
  std::string insp_ckpt;
  insp->add_option("--checkpoint", insp_ckpt, "checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(mix, gen_count, gen_seed, gen_out, gen_flags);
    if (tr->parsed()) return cmd_train(tr_data, tr_val, tr_out, tr_resume, tr_flags);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_task, ev_out, ev_flags);
    if (ab->parsed()) return cmd_ablate(ab_axes, ab_data, ab_val, ab_out, ab_flags);
    if (insp->parsed()) return cmd_inspect(insp_ckpt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
