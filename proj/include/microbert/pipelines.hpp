#pragma once

#include <string>
#include <vector>

#include "microbert/config.hpp"

namespace microbert {

// Each pipeline runs one subcommand end to end: load data, run the work,
// write outputs under cfg.out_dir, and print a short summary. Failures
// surface as UsageError / DataError / std::exception for the CLI to map to
// exit codes.

// unlabeled text -> trained wordpiece vocabulary at cfg.vocab
void pipeline_train_tokenizer(const RunConfig& cfg);

// unlabeled text (+ treebank for xpos/parse tasks) -> checkpoints + runlog.csv
void pipeline_pretrain(const RunConfig& cfg);

// treebank -> fine-tuned parser metrics (out_dir/metrics.csv + history csv)
void pipeline_eval_parse(const RunConfig& cfg);

// NER data -> fine-tuned tagger metrics (out_dir/metrics.csv + history csv)
void pipeline_eval_ner(const RunConfig& cfg);

// runlog CSVs -> aligned per-epoch validation-perplexity table + SVG plot;
// `out` names either output file, the other gets the same stem
void pipeline_report(const std::vector<std::string>& runlogs, const std::string& out);

// prints checkpoint config, parameter counts and trainer scalars
void pipeline_inspect(const std::string& dir);

}  // namespace microbert
