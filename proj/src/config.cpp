#include "microbert/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace microbert {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Cursor {
  const std::string& source;
  int line = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw UsageError("config: " + source + ":" + std::to_string(line) + ": " + msg);
  }
};

int64_t parse_int(const Cursor& at, const std::string& key, const std::string& value) {
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(value.c_str(), &end, 10);
  if (errno != 0 || end == value.c_str() || *end != '\0')
    at.fail(key + ": expected an integer, got '" + value + "'");
  return static_cast<int64_t>(v);
}

double parse_float(const Cursor& at, const std::string& key, const std::string& value) {
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(value.c_str(), &end);
  if (errno != 0 || end == value.c_str() || *end != '\0')
    at.fail(key + ": expected a number, got '" + value + "'");
  return v;
}

bool parse_bool(const Cursor& at, const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  at.fail(key + ": expected true or false, got '" + value + "'");
}

std::vector<std::string> parse_list(const std::string& value) {
  std::vector<std::string> items;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

void apply_encoder_key(const Cursor& at, EncoderConfig& enc, const std::string& key,
                       const std::string& value) {
  if (key == "preset") {
    if (value == "micro") {
      enc = EncoderConfig{};  // defaults are the micro sizes
    } else if (value == "micro4") {
      enc = EncoderConfig{};
      enc.layers = 6;
      enc.hidden = 200;
      enc.heads = 8;
      enc.ffn = 800;
    } else {
      at.fail("preset: expected micro or micro4, got '" + value + "'");
    }
  } else if (key == "layers") {
    enc.layers = parse_int(at, key, value);
  } else if (key == "hidden") {
    enc.hidden = parse_int(at, key, value);
  } else if (key == "heads") {
    enc.heads = parse_int(at, key, value);
  } else if (key == "ffn") {
    enc.ffn = parse_int(at, key, value);
  } else if (key == "max_positions") {
    enc.max_positions = parse_int(at, key, value);
  } else if (key == "dropout") {
    enc.dropout = static_cast<float>(parse_float(at, key, value));
  } else {
    at.fail("unknown key '" + key + "' in [encoder]");
  }
}

void apply_pretrain_key(const Cursor& at, RunConfig& cfg, const std::string& key,
                        const std::string& value) {
  auto& p = cfg.pretrain;
  if (key == "lr") {
    p.lr = static_cast<float>(parse_float(at, key, value));
  } else if (key == "beta1") {
    p.beta1 = static_cast<float>(parse_float(at, key, value));
  } else if (key == "beta2") {
    p.beta2 = static_cast<float>(parse_float(at, key, value));
  } else if (key == "weight_decay") {
    p.weight_decay = static_cast<float>(parse_float(at, key, value));
  } else if (key == "plateau_patience") {
    p.plateau_patience = static_cast<int>(parse_int(at, key, value));
  } else if (key == "plateau_factor") {
    p.plateau_factor = static_cast<float>(parse_float(at, key, value));
  } else if (key == "lr_floor") {
    p.lr_floor = static_cast<float>(parse_float(at, key, value));
  } else if (key == "epochs") {
    p.epochs = parse_int(at, key, value);
  } else if (key == "batches_per_epoch") {
    p.batches_per_epoch = parse_int(at, key, value);
  } else if (key == "batch_size") {
    p.batch_size = parse_int(at, key, value);
  } else if (key == "early_stop_patience") {
    p.early_stop_patience = static_cast<int>(parse_int(at, key, value));
  } else if (key == "mask_rate") {
    p.mask_rate = static_cast<float>(parse_float(at, key, value));
  } else if (key == "clip_norm") {
    p.clip_norm = static_cast<float>(parse_float(at, key, value));
  } else if (key == "val_fraction") {
    cfg.val_fraction = parse_float(at, key, value);
  } else if (key == "max_wordpieces") {
    cfg.max_wordpieces = parse_int(at, key, value);
  } else {
    at.fail("unknown key '" + key + "' in [pretrain]");
  }
}

void apply_eval_key(const Cursor& at, EvalConfig& e, const std::string& section,
                    const std::string& key, const std::string& value) {
  if (key == "epochs") {
    e.epochs = parse_int(at, key, value);
  } else if (key == "batch_size") {
    e.batch_size = parse_int(at, key, value);
  } else if (key == "patience") {
    e.patience = static_cast<int>(parse_int(at, key, value));
  } else if (key == "batches_per_epoch") {
    e.batches_per_epoch = parse_int(at, key, value);
  } else if (key == "base_lr") {
    e.base_lr = static_cast<float>(parse_float(at, key, value));
  } else if (key == "encoder_lr") {
    e.encoder_lr = static_cast<float>(parse_float(at, key, value));
  } else if (key == "clip_norm") {
    e.clip_norm = static_cast<float>(parse_float(at, key, value));
  } else if (key == "lstm_layers") {
    e.lstm_layers = parse_int(at, key, value);
  } else if (key == "lstm_hidden") {
    e.lstm_hidden = parse_int(at, key, value);
  } else if (key == "lstm_dropout") {
    e.lstm_dropout = static_cast<float>(parse_float(at, key, value));
  } else if (key == "arc_dim") {
    e.arc_dim = parse_int(at, key, value);
  } else if (key == "label_dim") {
    e.label_dim = parse_int(at, key, value);
  } else if (key == "freeze_encoder") {
    e.freeze_encoder = parse_bool(at, key, value);
  } else if (key == "encoder_dropout") {
    e.encoder_dropout = parse_bool(at, key, value);
  } else {
    at.fail("unknown key '" + key + "' in [" + section + "]");
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  cfg.source_text = text;
  Cursor at{source};
  std::string section;
  std::stringstream ss(text);
  std::string raw;
  while (std::getline(ss, raw)) {
    ++at.line;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') at.fail("unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section != "paths" && section != "tokenizer" && section != "encoder" &&
          section != "plan" && section != "pretrain" && section != "eval-parse" &&
          section != "eval-ner" && section != "run")
        at.fail("unknown section [" + section + "]");
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) at.fail("expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) at.fail("empty key");
    if (section.empty()) at.fail("key '" + key + "' before any [section]");

    if (section == "paths") {
      if (key == "unlabeled") cfg.unlabeled = value;
      else if (key == "treebank") cfg.treebank = value;
      else if (key == "ner") cfg.ner = value;
      else if (key == "vocab") cfg.vocab = value;
      else if (key == "checkpoint") cfg.checkpoint = value;
      else if (key == "out_dir") cfg.out_dir = value;
      else at.fail("unknown key '" + key + "' in [paths]");
    } else if (section == "tokenizer") {
      if (key == "vocab_size") cfg.vocab_size = static_cast<int32_t>(parse_int(at, key, value));
      else at.fail("unknown key '" + key + "' in [tokenizer]");
    } else if (section == "encoder") {
      apply_encoder_key(at, cfg.pretrain.encoder, key, value);
    } else if (section == "plan") {
      if (key == "tasks") {
        cfg.tasks = parse_list(value);
        if (cfg.tasks.empty()) at.fail("tasks: empty list");
      } else if (key == "ratio") {
        cfg.ratio.clear();
        for (const auto& item : parse_list(value)) cfg.ratio.push_back(parse_int(at, key, item));
        if (cfg.ratio.empty()) at.fail("ratio: empty list");
      } else {
        at.fail("unknown key '" + key + "' in [plan]");
      }
    } else if (section == "pretrain") {
      apply_pretrain_key(at, cfg, key, value);
    } else if (section == "eval-parse") {
      apply_eval_key(at, cfg.eval_parse, section, key, value);
    } else if (section == "eval-ner") {
      apply_eval_key(at, cfg.eval_ner, section, key, value);
    } else {  // run
      if (key == "seed") cfg.seed = static_cast<uint64_t>(parse_int(at, key, value));
      else at.fail("unknown key '" + key + "' in [run]");
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("config: cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), path);
}

}  // namespace microbert
