#include "microbert/pipelines.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "microbert/corpus.hpp"

namespace fs = std::filesystem;

namespace microbert {

namespace {

// load-phase failures (unreadable files, malformed rows, oversize annotated
// sentences) are data errors regardless of which exception the reader threw
template <class Fn>
auto load_data(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

void require_path(const std::string& value, const std::string& key) {
  if (value.empty()) throw UsageError("config: [paths] " + key + " is required");
}

void write_text_file(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty())
    fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path);
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(6);
  ss << v;
  return ss.str();
}

Vocabulary vocab_from_text(const std::string& text) {
  std::vector<std::string> pieces;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) pieces.push_back(line);
  }
  return Vocabulary::from_pieces(std::move(pieces));
}

std::vector<EncodedSentence> encode_split(const std::vector<RawSentence>& raw,
                                          const Vocabulary& vocab, const LabelMap* xpos,
                                          const LabelMap* deprels, const LabelMap* ner,
                                          int64_t max_wordpieces) {
  std::vector<EncodedSentence> out;
  out.reserve(raw.size());
  for (const auto& s : raw) out.push_back(encode_annotated(s, vocab, xpos, deprels, ner));
  // annotated sentences must fit the cap; chunking would break gold layers
  return chunk_sequences(out, max_wordpieces);
}

struct EncoderSource {
  CheckpointData data;
  bool from_checkpoint = false;
  Vocabulary vocab;
  EncoderConfig config;
  std::string id;  // for the metrics report
};

// the encoder for an eval run comes from a pretrained checkpoint or, as the
// no-pretraining baseline, from the config's [encoder] section + a vocabulary
EncoderSource resolve_encoder(const RunConfig& cfg) {
  EncoderSource src;
  if (!cfg.checkpoint.empty()) {
    src.data = load_data([&] { return load_checkpoint(cfg.checkpoint); });
    src.from_checkpoint = true;
    src.vocab = vocab_from_text(src.data.vocab_text);
    if (!cfg.vocab.empty()) {
      auto file_vocab = load_data([&] { return Vocabulary::load_file(cfg.vocab); });
      if (vocab_as_text(file_vocab) != src.data.vocab_text)
        throw DataError("checkpoint " + cfg.checkpoint + " was trained with a different " +
                        "vocabulary than " + cfg.vocab);
    }
    src.config = src.data.config;
    src.id = cfg.checkpoint;
  } else {
    require_path(cfg.vocab, "vocab");
    src.vocab = load_data([&] { return Vocabulary::load_file(cfg.vocab); });
    src.config = cfg.pretrain.encoder;
    src.config.vocab_size = src.vocab.size();
    src.id = "none";
  }
  return src;
}

std::string metrics_csv_row(const std::string& task, const std::string& split,
                            const std::string& metric, double value, uint64_t seed,
                            const std::string& id) {
  return task + "," + split + "," + metric + "," + fmt(value) + "," + std::to_string(seed) + "," +
         id + "\n";
}

std::string history_csv(const std::vector<FinetuneRecord>& history) {
  std::string csv = "epoch,train_loss,dev_metric\n";
  for (const auto& r : history)
    csv += std::to_string(r.epoch) + "," + fmt(r.train_loss) + "," + fmt(r.dev_metric) + "\n";
  return csv;
}

// ---------------------------------------------------------------------------
// report plotting

struct Series {
  std::string label;
  std::vector<std::pair<int64_t, double>> points;  // (epoch, val_ppl)
};

Series read_runlog(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw DataError(path + ": empty file");
  std::vector<std::string> cols;
  std::stringstream hs(header);
  std::string col;
  while (std::getline(hs, col, ',')) cols.push_back(col);
  const auto find_col = [&](const std::string& name) {
    auto it = std::find(cols.begin(), cols.end(), name);
    if (it == cols.end()) throw DataError(path + ": no '" + name + "' column");
    return static_cast<size_t>(it - cols.begin());
  };
  const size_t epoch_col = find_col("epoch"), ppl_col = find_col("val_ppl");

  Series s;
  s.label = fs::path(path).stem().string();
  std::string line;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) fields.push_back(f);
    if (fields.size() <= std::max(epoch_col, ppl_col))
      throw DataError(path + ":" + std::to_string(lineno) + ": short row");
    try {
      s.points.emplace_back(std::stoll(fields[epoch_col]), std::stod(fields[ppl_col]));
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  if (s.points.empty()) throw DataError(path + ": no data rows");
  return s;
}

std::string aligned_csv(const std::vector<Series>& series) {
  std::vector<int64_t> epochs;
  for (const auto& s : series)
    for (const auto& [e, _] : s.points) epochs.push_back(e);
  std::sort(epochs.begin(), epochs.end());
  epochs.erase(std::unique(epochs.begin(), epochs.end()), epochs.end());

  std::string csv = "epoch";
  for (const auto& s : series) csv += "," + s.label;
  csv += "\n";
  for (int64_t e : epochs) {
    csv += std::to_string(e);
    for (const auto& s : series) {
      auto it = std::find_if(s.points.begin(), s.points.end(),
                             [e](const auto& p) { return p.first == e; });
      csv += ",";
      if (it != s.points.end()) csv += fmt(it->second);
    }
    csv += "\n";
  }
  return csv;
}

std::string svg_plot(const std::vector<Series>& series) {
  const double w = 760, h = 440;
  const double l = 64, r = w - 180, t = 24, b = h - 48;  // plot box
  int64_t e_min = series[0].points.front().first, e_max = e_min;
  double p_max = 0.0;
  for (const auto& s : series)
    for (const auto& [e, p] : s.points) {
      e_min = std::min(e_min, e);
      e_max = std::max(e_max, e);
      p_max = std::max(p_max, p);
    }
  if (e_max == e_min) e_max = e_min + 1;
  if (p_max <= 0.0) p_max = 1.0;
  p_max *= 1.05;
  const auto x_of = [&](double e) { return l + (e - e_min) / double(e_max - e_min) * (r - l); };
  const auto y_of = [&](double p) { return b - p / p_max * (b - t); };
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h
      << "' viewBox='0 0 " << w << " " << h << "'>\n"
      << "<rect width='100%' height='100%' fill='white'/>\n"
      << "<g font-family='sans-serif' font-size='12' fill='#333'>\n";
  // axes and ticks
  svg << "<line x1='" << l << "' y1='" << b << "' x2='" << r << "' y2='" << b
      << "' stroke='#333'/>\n"
      << "<line x1='" << l << "' y1='" << t << "' x2='" << l << "' y2='" << b
      << "' stroke='#333'/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double e = e_min + (e_max - e_min) * i / 4.0;
    const double p = p_max * i / 4.0;
    svg << "<line x1='" << x_of(e) << "' y1='" << b << "' x2='" << x_of(e) << "' y2='" << b + 4
        << "' stroke='#333'/>\n"
        << "<text x='" << x_of(e) << "' y='" << b + 18 << "' text-anchor='middle'>"
        << static_cast<int64_t>(std::llround(e)) << "</text>\n"
        << "<line x1='" << l - 4 << "' y1='" << y_of(p) << "' x2='" << l << "' y2='" << y_of(p)
        << "' stroke='#333'/>\n"
        << "<text x='" << l - 8 << "' y='" << y_of(p) + 4 << "' text-anchor='end'>" << fmt(p)
        << "</text>\n";
  }
  svg << "<text x='" << (l + r) / 2 << "' y='" << h - 12
      << "' text-anchor='middle'>epoch</text>\n"
      << "<text x='16' y='" << (t + b) / 2 << "' text-anchor='middle' transform='rotate(-90 16 "
      << (t + b) / 2 << ")'>validation perplexity</text>\n";
  // one polyline + legend row per run
  for (size_t i = 0; i < series.size(); ++i) {
    const char* color = kColors[i % 8];
    svg << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
    for (const auto& [e, p] : series[i].points) svg << x_of(e) << "," << y_of(p) << " ";
    svg << "'/>\n";
    const double ly = t + 16 + 18 * static_cast<double>(i);
    svg << "<line x1='" << r + 12 << "' y1='" << ly - 4 << "' x2='" << r + 34 << "' y2='" << ly - 4
        << "' stroke='" << color << "' stroke-width='1.5'/>\n"
        << "<text x='" << r + 40 << "' y='" << ly << "'>" << series[i].label << "</text>\n";
  }
  svg << "</g>\n</svg>\n";
  return svg.str();
}

}  // namespace

void pipeline_train_tokenizer(const RunConfig& cfg) {
  require_path(cfg.unlabeled, "unlabeled");
  require_path(cfg.vocab, "vocab");
  const auto corpus = load_data([&] { return read_unlabeled(cfg.unlabeled); });

  std::unordered_map<std::string, int64_t> counts;
  int64_t total = 0;
  for (const auto& doc : corpus.documents)
    for (const auto& sentence : doc)
      for (const auto& word : sentence) {
        ++counts[normalize(word)];
        ++total;
      }
  const int32_t size = cfg.vocab_size > 0 ? cfg.vocab_size
                                          : choose_vocab_size(static_cast<int64_t>(counts.size()));
  const auto vocab = Vocabulary::train(counts, size);
  if (const auto parent = fs::path(cfg.vocab).parent_path(); !parent.empty())
    fs::create_directories(parent);
  vocab.save_file(cfg.vocab);

  std::cout << "documents: " << corpus.documents.size() << "\n"
            << "sentences: " << corpus.sentence_count() << "\n"
            << "tokens: " << total << " (" << counts.size() << " unique)\n"
            << "vocabulary: " << vocab.size() << " pieces -> " << cfg.vocab << "\n";
}

void pipeline_pretrain(const RunConfig& cfg) {
  require_path(cfg.unlabeled, "unlabeled");
  require_path(cfg.vocab, "vocab");
  require_path(cfg.out_dir, "out_dir");
  if (cfg.tasks.size() != cfg.ratio.size())
    throw UsageError("config: [plan] tasks and ratio must have the same length");
  bool needs_treebank = false;
  for (const auto& task : cfg.tasks) {
    if (task != "mlm" && task != "xpos" && task != "parse")
      throw UsageError("config: [plan] unknown task '" + task + "'");
    needs_treebank |= task != "mlm";
  }
  if (needs_treebank) require_path(cfg.treebank, "treebank");

  const auto vocab = load_data([&] { return Vocabulary::load_file(cfg.vocab); });
  const auto corpus = load_data([&] { return read_unlabeled(cfg.unlabeled); });
  const auto [train_docs, val_docs] = split_documents(corpus, cfg.val_fraction, cfg.seed);

  const auto encode_docs = [&](const UnlabeledCorpus& docs) {
    std::vector<EncodedSentence> out;
    for (const auto& doc : docs.documents)
      for (const auto& words : doc) out.push_back(encode(words, vocab));
    return chunk_sequences(out, cfg.max_wordpieces);
  };
  const auto mlm_train = load_data([&] { return encode_docs(train_docs); });
  const auto validation = load_data([&] { return encode_docs(val_docs); });

  Treebank tb;
  std::vector<EncodedSentence> tb_train;
  if (needs_treebank) {
    tb = load_data([&] { return read_conllu(cfg.treebank); });
    tb_train = load_data([&] {
      return encode_split(tb.sentences, vocab, &tb.xpos_tags, &tb.deprels, nullptr,
                          cfg.max_wordpieces);
    });
  }

  std::vector<TaskData> tasks;
  for (size_t i = 0; i < cfg.tasks.size(); ++i)
    tasks.push_back({cfg.tasks[i], cfg.tasks[i] == "mlm" ? &mlm_train : &tb_train, cfg.ratio[i]});

  PretrainConfig pcfg = cfg.pretrain;
  pcfg.encoder.vocab_size = vocab.size();
  pcfg.seed = cfg.seed;
  pcfg.out_dir = cfg.out_dir;

  std::cout << "pretraining on " << mlm_train.size() << " chunks (" << validation.size()
            << " validation)";
  if (needs_treebank) std::cout << " + " << tb_train.size() << " treebank sentences";
  std::cout << "\n";

  const auto res = pretrain(pcfg, tasks, validation, vocab, tb.xpos_tags.size(),
                            tb.deprels.size(), cfg.source_text);

  std::cout << "epochs: " << res.log.records.size()
            << (res.stopped_early ? " (stopped early)" : "") << "\n"
            << "best: epoch " << res.best_epoch << ", val ppl " << fmt(res.best_ppl) << "\n"
            << "checkpoint: " << res.best_dir << "\n"
            << "runlog: " << (fs::path(cfg.out_dir) / "runlog.csv").string() << "\n";
}

void pipeline_eval_parse(const RunConfig& cfg) {
  require_path(cfg.treebank, "treebank");
  require_path(cfg.out_dir, "out_dir");
  auto src = resolve_encoder(cfg);

  const auto tb = load_data([&] { return read_conllu(cfg.treebank); });
  const auto splits = split_dataset(tb.sentences, cfg.seed);
  const auto enc = [&](const std::vector<RawSentence>& raw) {
    return load_data([&] {
      return encode_split(raw, src.vocab, &tb.xpos_tags, &tb.deprels, nullptr,
                          cfg.max_wordpieces);
    });
  };
  const auto train = enc(splits.train), dev = enc(splits.dev), test = enc(splits.test);

  EvalConfig ecfg = cfg.eval_parse;
  ecfg.seed = cfg.seed;
  std::cout << "fine-tuning parser on " << train.size() << "/" << dev.size() << "/" << test.size()
            << " train/dev/test sentences (" << tb.deprels.size() << " relations)\n";
  const auto res = finetune_parse(ecfg, src.from_checkpoint ? &src.data : nullptr, src.config,
                                  src.vocab, train, dev, test, tb.deprels.size());

  std::string csv = "task,split,metric,value,seed,checkpoint\n";
  csv += metrics_csv_row("parse", "dev", "las", res.dev_best, cfg.seed, src.id);
  csv += metrics_csv_row("parse", "test", "uas", res.test.uas, cfg.seed, src.id);
  csv += metrics_csv_row("parse", "test", "las", res.test.las, cfg.seed, src.id);
  write_text_file((fs::path(cfg.out_dir) / "metrics-parse.csv").string(), csv);
  write_text_file((fs::path(cfg.out_dir) / "history-parse.csv").string(),
                  history_csv(res.history));

  std::cout << "best dev LAS " << fmt(res.dev_best) << " at epoch " << res.best_epoch << " ("
            << res.trainable_params << " trainable parameters)\n"
            << "test UAS " << fmt(res.test.uas) << ", test LAS " << fmt(res.test.las) << "\n"
            << "metrics: " << (fs::path(cfg.out_dir) / "metrics-parse.csv").string() << "\n";
}

void pipeline_eval_ner(const RunConfig& cfg) {
  require_path(cfg.ner, "ner");
  require_path(cfg.out_dir, "out_dir");
  auto src = resolve_encoder(cfg);

  const auto raw = load_data([&] { return read_wikiann(cfg.ner); });
  LabelMap ner_tags;
  ner_tags.intern("O");  // fixed id 0 so inventories agree across splits
  for (const auto& s : raw)
    for (const auto& tag : s.ner) ner_tags.intern(tag);
  const auto splits = split_dataset(raw, cfg.seed);
  const auto enc = [&](const std::vector<RawSentence>& sentences) {
    return load_data([&] {
      return encode_split(sentences, src.vocab, nullptr, nullptr, &ner_tags, cfg.max_wordpieces);
    });
  };
  const auto train = enc(splits.train), dev = enc(splits.dev), test = enc(splits.test);

  EvalConfig ecfg = cfg.eval_ner;
  ecfg.seed = cfg.seed;
  std::cout << "fine-tuning tagger on " << train.size() << "/" << dev.size() << "/" << test.size()
            << " train/dev/test sentences (" << ner_tags.size() << " tags)\n";
  const auto res = finetune_ner(ecfg, src.from_checkpoint ? &src.data : nullptr, src.config,
                                src.vocab, train, dev, test, ner_tags.names());

  std::string csv = "task,split,metric,value,seed,checkpoint\n";
  csv += metrics_csv_row("ner", "dev", "f1", res.dev_best, cfg.seed, src.id);
  csv += metrics_csv_row("ner", "test", "precision", res.test.precision, cfg.seed, src.id);
  csv += metrics_csv_row("ner", "test", "recall", res.test.recall, cfg.seed, src.id);
  csv += metrics_csv_row("ner", "test", "f1", res.test.f1, cfg.seed, src.id);
  write_text_file((fs::path(cfg.out_dir) / "metrics-ner.csv").string(), csv);
  write_text_file((fs::path(cfg.out_dir) / "history-ner.csv").string(), history_csv(res.history));

  std::cout << "best dev F1 " << fmt(res.dev_best) << " at epoch " << res.best_epoch << " ("
            << res.trainable_params << " trainable parameters)\n"
            << "test P " << fmt(res.test.precision) << ", R " << fmt(res.test.recall) << ", F1 "
            << fmt(res.test.f1) << "\n"
            << "metrics: " << (fs::path(cfg.out_dir) / "metrics-ner.csv").string() << "\n";
}

void pipeline_report(const std::vector<std::string>& runlogs, const std::string& out) {
  if (runlogs.empty()) throw UsageError("report: at least one --runlog is required");
  if (out.empty()) throw UsageError("report: --out is required");

  std::vector<Series> series;
  for (const auto& path : runlogs) {
    auto s = read_runlog(path);
    int copy = 2;
    std::string label = s.label;
    const auto taken = [&](const std::string& name) {
      return std::any_of(series.begin(), series.end(),
                         [&](const Series& other) { return other.label == name; });
    };
    while (taken(label)) label = s.label + "-" + std::to_string(copy++);
    s.label = label;
    series.push_back(std::move(s));
  }

  fs::path stem(out);
  if (stem.extension() == ".csv" || stem.extension() == ".svg") stem.replace_extension();
  const std::string csv_path = stem.string() + ".csv";
  const std::string svg_path = stem.string() + ".svg";
  write_text_file(csv_path, aligned_csv(series));
  write_text_file(svg_path, svg_plot(series));
  std::cout << "report: " << csv_path << ", " << svg_path << "\n";
}

void pipeline_inspect(const std::string& dir) {
  const auto data = load_data([&] { return load_checkpoint(dir); });
  int64_t total = 0, optim = 0;
  for (const auto& [name, tensor] : data.tensors)
    (name.starts_with("optim/") ? optim : total) += tensor.size();
  const int64_t encoder = count_parameters(data.config);

  const auto& c = data.config;
  std::cout << "checkpoint: " << dir << "\n"
            << "encoder: layers " << c.layers << ", hidden " << c.hidden << ", heads " << c.heads
            << ", ffn " << c.ffn << ", max positions " << c.max_positions << ", vocab "
            << c.vocab_size << ", dropout " << fmt(c.dropout) << "\n"
            << "parameters: " << total << " (" << encoder << " encoder + " << total - encoder
            << " head)\n"
            << "tensors: " << data.tensors.size()
            << (optim > 0 ? " (optimizer state for " + std::to_string(optim / 2) + " values)"
                          : "")
            << "\n";
  int64_t vocab_lines = 0;
  for (char ch : data.vocab_text) vocab_lines += ch == '\n';
  std::cout << "vocabulary: " << vocab_lines << " pieces\n";
  for (const auto& [key, value] : data.scalars)
    std::cout << "  " << key << " = " << fmt(value) << "\n";
  if (!data.config_text.empty()) std::cout << "config.cfg: present\n";
}

}  // namespace microbert
