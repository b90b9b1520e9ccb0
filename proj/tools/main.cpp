#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "microbert/pipelines.hpp"

namespace {

// exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure
constexpr int kUsage = 1, kData = 2, kRuntime = 3;

struct Common {
  std::string config_path;
  uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "run configuration file")->required();
    seed_opt = cmd->add_option("--seed", seed, "override the config's random seed");
  }
  microbert::RunConfig load() const {
    auto cfg = microbert::load_run_config(config_path);
    if (seed_opt->count() > 0) cfg.seed = seed;
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tiny monolingual BERT pretraining and evaluation"};
  app.require_subcommand(1);

  Common tok, pre, par, ner;
  std::string eval_checkpoint;
  bool freeze = false;
  std::vector<std::string> runlogs;
  std::string report_out;
  std::string inspect_dir;

  tok.attach(app.add_subcommand("train-tokenizer",
                                "learn a wordpiece vocabulary from unlabeled text"));
  pre.attach(app.add_subcommand("pretrain", "pretrain an encoder (checkpoints + runlog)"));

  auto* cmd_parse = app.add_subcommand("eval-parse", "fine-tune and score a dependency parser");
  par.attach(cmd_parse);
  auto* cmd_ner = app.add_subcommand("eval-ner", "fine-tune and score a CRF NER tagger");
  ner.attach(cmd_ner);
  for (auto* cmd : {cmd_parse, cmd_ner}) {
    cmd->add_option("--checkpoint", eval_checkpoint,
                    "pretrained checkpoint directory (overrides the config)");
    cmd->add_flag("--freeze-encoder", freeze, "train only the task model, not the encoder");
  }

  auto* cmd_report = app.add_subcommand("report", "align runlogs into perplexity curves");
  cmd_report->add_option("--runlog", runlogs, "runlog.csv files to compare")
      ->required()
      ->expected(-1);
  cmd_report->add_option("--out", report_out, "output path; writes both .csv and .svg")
      ->required();

  auto* cmd_inspect = app.add_subcommand("inspect-checkpoint", "describe a saved checkpoint");
  cmd_inspect->add_option("dir", inspect_dir, "checkpoint directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (app.got_subcommand("train-tokenizer")) {
      microbert::pipeline_train_tokenizer(tok.load());
    } else if (app.got_subcommand("pretrain")) {
      microbert::pipeline_pretrain(pre.load());
    } else if (app.got_subcommand("eval-parse")) {
      auto cfg = par.load();
      if (!eval_checkpoint.empty()) cfg.checkpoint = eval_checkpoint;
      if (freeze) cfg.eval_parse.freeze_encoder = true;
      microbert::pipeline_eval_parse(cfg);
    } else if (app.got_subcommand("eval-ner")) {
      auto cfg = ner.load();
      if (!eval_checkpoint.empty()) cfg.checkpoint = eval_checkpoint;
      if (freeze) cfg.eval_ner.freeze_encoder = true;
      microbert::pipeline_eval_ner(cfg);
    } else if (app.got_subcommand("report")) {
      microbert::pipeline_report(runlogs, report_out);
    } else {
      microbert::pipeline_inspect(inspect_dir);
    }
  } catch (const microbert::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const microbert::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return 0;
}
