#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "microbert/eval.hpp"
#include "microbert/pretrainer.hpp"

namespace microbert {

// wrong invocation or malformed configuration; the CLI maps this to exit 1
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// unreadable or malformed input data; the CLI maps this to exit 2
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Everything a run needs, read from a sectioned `key = value` file. Fields
// default to the regular training recipe so a config only has to name its
// data and outputs.
struct RunConfig {
  // [paths]
  std::string unlabeled;   // pretraining text
  std::string treebank;    // CoNLL-U file
  std::string ner;         // WikiAnn-style token/tag file
  std::string vocab;       // vocabulary file (written by train-tokenizer)
  std::string checkpoint;  // pretrained checkpoint dir; empty = random init
  std::string out_dir;

  // [tokenizer]
  int32_t vocab_size = 0;  // 0 = derive from the unique token count

  // [plan]
  std::vector<std::string> tasks = {"mlm"};
  std::vector<int64_t> ratio = {1};

  // [encoder] + [pretrain]
  PretrainConfig pretrain;
  double val_fraction = 0.1;      // document share held out for validation
  int64_t max_wordpieces = 500;   // chunking cap applied after encoding

  // [eval-parse] / [eval-ner]
  EvalConfig eval_parse = EvalConfig::parse_defaults();
  EvalConfig eval_ner = EvalConfig::ner_defaults();

  // [run]
  uint64_t seed = 0;

  std::string source_text;  // the config file verbatim, for checkpoints
};

// Parses the sectioned format: `[section]` headers, `key = value` lines,
// blank lines and `#` comments ignored. Unknown sections, unknown keys and
// unparsable values are UsageErrors naming `source` and the line number.
RunConfig parse_run_config(const std::string& text, const std::string& source);

// reads and parses a config file; a missing file is a UsageError naming it
RunConfig load_run_config(const std::string& path);

}  // namespace microbert
