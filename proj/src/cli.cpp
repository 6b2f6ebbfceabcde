#include "pointseg/cli.hpp"

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "pointseg/parallel.hpp"
#include "pointseg/trainer.hpp"

namespace pointseg::cli {

namespace {

using nlohmann::json;

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
  bool deterministic = false;

  json resolve() const {
    json cfg = config::resolve(config.empty() ? std::filesystem::path{} : std::filesystem::path(config), overrides);
    if (seed >= 0) cfg["seed"] = seed;
    if (deterministic) cfg["deterministic"] = true;
    return cfg;
  }
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "JSON config file");
  cmd->add_option("--override", args.overrides, "config override key=value (repeatable)");
  cmd->add_option("--seed", args.seed, "random seed (overrides config)");
  cmd->add_flag("--deterministic", args.deterministic, "deterministic mode");
}

void require_exists(const std::string& path, const char* what) {
  if (!std::filesystem::exists(path))
    throw IoError(std::string(what) + " not found: " + path);
}

std::string single_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"tracking-conditioned video segmentation on procedural phantoms"};
  app.require_subcommand(1);

  CommonArgs phantom_args, train_args, eval_args, infer_args, ablate_args;

  // phantom
  auto* cmd_phantom = app.add_subcommand("phantom", "generate a phantom dataset");
  std::string phantom_out;
  std::int64_t phantom_count = 0;
  cmd_phantom->add_option("--out", phantom_out, "output dataset directory")->required();
  cmd_phantom->add_option("--count", phantom_count, "number of clips (overrides config)");
  add_common(cmd_phantom, phantom_args);

  // train
  auto* cmd_train = app.add_subcommand("train", "train a stage");
  std::string train_stage, train_data, train_out, train_tracker_ckpt;
  cmd_train->add_option("--stage", train_stage, "tracker | segmenter");
  cmd_train->add_option("--data", train_data, "dataset directory")->required();
  cmd_train->add_option("--out", train_out, "output directory")->required();
  cmd_train->add_option("--tracker-checkpoint", train_tracker_ckpt,
                        "stage-1 checkpoint (segmenter stage only)");
  add_common(cmd_train, train_args);

  // eval
  auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint or stored predictions");
  std::string eval_ckpt, eval_pred, eval_data, eval_out, eval_split = "test", eval_compare;
  cmd_eval->add_option("--checkpoint", eval_ckpt, "checkpoint file");
  cmd_eval->add_option("--predictions", eval_pred,
                       "directory of predicted clip records (instead of a checkpoint)");
  cmd_eval->add_option("--data", eval_data, "dataset directory")->required();
  cmd_eval->add_option("--out", eval_out, "output directory")->required();
  cmd_eval->add_option("--split", eval_split, "train | val | test");
  cmd_eval->add_option("--compare", eval_compare, "report JSON for the paired t-test column");
  add_common(cmd_eval, eval_args);

  // infer
  auto* cmd_infer = app.add_subcommand("infer", "run inference on one clip directory");
  std::string infer_ckpt, infer_clip, infer_out;
  cmd_infer->add_option("--checkpoint", infer_ckpt, "segmenter checkpoint")->required();
  cmd_infer->add_option("--clip", infer_clip, "clip directory")->required();
  cmd_infer->add_option("--out", infer_out, "output directory")->required();
  add_common(cmd_infer, infer_args);

  // ablate
  auto* cmd_ablate = app.add_subcommand("ablate", "run the fusion-component ablation");
  std::string ablate_data, ablate_out, ablate_tracker;
  cmd_ablate->add_option("--data", ablate_data, "dataset directory")->required();
  cmd_ablate->add_option("--out", ablate_out, "output directory")->required();
  cmd_ablate->add_option("--tracker-checkpoint", ablate_tracker, "stage-1 checkpoint")
      ->required();
  add_common(cmd_ablate, ablate_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (const char* env = std::getenv("POINTSEG_THREADS")) {
      const int n = std::atoi(env);
      if (n >= 1) par::set_threads(n);
    }

    if (cmd_phantom->parsed()) {
      const json cfg = phantom_args.resolve();
      const json summary = train::generate_dataset(cfg, phantom_out, phantom_count);
      std::cout << "dataset: " << phantom_out << " clips=" << summary.at("count")
                << " train/val/test=" << summary.at("train") << "/" << summary.at("val") << "/"
                << summary.at("test") << "\n";
      return 0;
    }
    if (cmd_train->parsed()) {
      json cfg = train_args.resolve();
      if (!train_stage.empty()) cfg["train"]["stage"] = train_stage;
      require_exists(train_data, "dataset directory");
      const std::string stage = cfg["train"]["stage"].get<std::string>();
      train::TrainOutcome out;
      if (stage == "tracker") {
        out = train::train_tracker(train_data, cfg, train_out);
      } else if (stage == "segmenter") {
        if (train_tracker_ckpt.empty())
          throw ConfigError("segmenter stage requires --tracker-checkpoint");
        require_exists(train_tracker_ckpt, "tracker checkpoint");
        out = train::train_segmenter(train_data, train_tracker_ckpt, cfg, train_out);
      } else {
        throw ConfigError("train.stage must be 'tracker' or 'segmenter', got '" + stage + "'");
      }
      std::cout << "trained stage=" << stage << " epochs=" << out.epochs_run
                << " best_metric=" << out.best_metric << "\n"
                << "checkpoint: " << out.best_checkpoint.string() << "\n"
                << "log: " << out.log_path.string() << "\n";
      return 0;
    }
    if (cmd_eval->parsed()) {
      if (eval_ckpt.empty() == eval_pred.empty())
        throw ConfigError("eval needs exactly one of --checkpoint or --predictions");
      require_exists(eval_data, "dataset directory");
      if (!eval_compare.empty()) require_exists(eval_compare, "comparison report");
      train::EvalReport rep;
      if (!eval_ckpt.empty()) {
        require_exists(eval_ckpt, "checkpoint");
        rep = train::evaluate_checkpoint(
            eval_ckpt, eval_data, eval_split,
            eval_compare.empty() ? std::filesystem::path{} : std::filesystem::path(eval_compare));
      } else {
        require_exists(eval_pred, "predictions directory");
        rep = train::evaluate_predictions(
            eval_pred, eval_data, eval_split,
            eval_compare.empty() ? std::filesystem::path{} : std::filesystem::path(eval_compare));
      }
      std::filesystem::create_directories(eval_out);
      std::ofstream jf(std::filesystem::path(eval_out) / "report.json");
      jf << rep.report.dump(2) << "\n";
      std::ofstream tf(std::filesystem::path(eval_out) / "report.txt");
      tf << rep.table;
      std::cout << rep.table;
      return 0;
    }
    if (cmd_infer->parsed()) {
      require_exists(infer_ckpt, "checkpoint");
      require_exists(infer_clip, "clip directory");
      train::infer_clip(infer_ckpt, infer_clip, infer_out);
      std::cout << "wrote prediction + overlays to " << infer_out << "\n";
      return 0;
    }
    if (cmd_ablate->parsed()) {
      const json cfg = ablate_args.resolve();
      require_exists(ablate_data, "dataset directory");
      require_exists(ablate_tracker, "tracker checkpoint");
      train::AblationResult res =
          train::run_ablation(ablate_data, ablate_tracker, cfg, ablate_out);
      std::cout << res.text;
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: category=" << e.category_name() << " message=\""
              << single_line(e.what()) << "\"\n";
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: category=internal message=\"" << single_line(e.what()) << "\"\n";
    return 70;
  }
  return 0;
}

}  // namespace pointseg::cli
