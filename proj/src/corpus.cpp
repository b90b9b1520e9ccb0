#include "microbert/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "microbert/rng.hpp"

namespace microbert {

namespace {

std::vector<std::string> split_on(const std::string& line, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  for (size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == sep) {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

[[noreturn]] void fail_at(const std::string& path, int64_t lineno, const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + what);
}

bool parse_int(const std::string& s, int64_t& out) {
  if (s.empty()) return false;
  size_t i = 0;
  bool neg = false;
  if (s[0] == '-') {
    neg = true;
    i = 1;
    if (s.size() == 1) return false;
  }
  int64_t v = 0;
  for (; i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9') return false;
    v = v * 10 + (s[i] - '0');
  }
  out = neg ? -v : v;
  return true;
}

std::string preview(const std::vector<std::string>& words) {
  std::string out;
  for (size_t i = 0; i < words.size() && i < 5; ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  if (words.size() > 5) out += " ...";
  return out;
}

}  // namespace

Treebank read_conllu(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  Treebank tb;
  RawSentence cur;
  int64_t lineno = 0;
  int64_t sent_start_line = 1;

  auto finish_sentence = [&]() {
    if (cur.words.empty()) return;
    const auto n = static_cast<int64_t>(cur.words.size());
    int roots = 0;
    for (int32_t h : cur.heads) {
      if (h < 0 || h > n)
        fail_at(path, sent_start_line,
                "head index " + std::to_string(h) + " out of range in " + std::to_string(n) +
                    "-word sentence starting '" + preview(cur.words) + "'");
      if (h == 0) ++roots;
    }
    if (roots != 1)
      fail_at(path, sent_start_line,
              "sentence starting '" + preview(cur.words) + "' has " + std::to_string(roots) +
                  " roots, expected exactly 1");
    for (const auto& t : cur.xpos) tb.xpos_tags.intern(t);
    for (const auto& d : cur.deprels) tb.deprels.intern(d);
    tb.sentences.push_back(std::move(cur));
    cur = RawSentence{};
  };

  std::string raw;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = strip_cr(raw);
    if (!utf8_valid(line)) fail_at(path, lineno, "invalid UTF-8");
    if (line.empty()) {
      finish_sentence();
      sent_start_line = lineno + 1;
      continue;
    }
    if (line[0] == '#') continue;
    auto cols = split_on(line, '\t');
    if (cols.size() != 10)
      fail_at(path, lineno,
              "expected 10 tab-separated columns, got " + std::to_string(cols.size()));
    const std::string& id = cols[0];
    if (id.find('-') != std::string::npos) continue;  // multiword range line
    if (id.find('.') != std::string::npos) continue;  // empty node
    int64_t word_id, head;
    if (!parse_int(id, word_id) || word_id <= 0)
      fail_at(path, lineno, "bad token id '" + id + "'");
    if (word_id != static_cast<int64_t>(cur.words.size()) + 1)
      fail_at(path, lineno, "token id " + id + " out of sequence");
    if (!parse_int(cols[6], head) || head < 0)
      fail_at(path, lineno, "non-integer head '" + cols[6] + "'");
    cur.words.push_back(cols[1]);
    cur.xpos.push_back(cols[4]);
    cur.heads.push_back(static_cast<int32_t>(head));
    cur.deprels.push_back(cols[7]);
  }
  finish_sentence();
  if (tb.sentences.empty()) throw std::runtime_error(path + ": no sentences");
  return tb;
}

std::vector<std::string> iob1_to_bioul(const std::vector<std::string>& tags) {
  // extract chunks under IOB1 reading, then re-emit them in BIOUL
  struct Chunk {
    size_t begin, end;  // inclusive
    std::string type;
  };
  std::vector<Chunk> chunks;
  std::string open_type;
  size_t open_begin = 0;
  bool open = false;
  auto close = [&](size_t end) {
    if (open) chunks.push_back({open_begin, end, open_type});
    open = false;
  };
  for (size_t i = 0; i < tags.size(); ++i) {
    const std::string& t = tags[i];
    if (t == "O") {
      close(i - 1);
      continue;
    }
    if (t.size() < 3 || t[1] != '-' || (t[0] != 'I' && t[0] != 'B'))
      throw std::invalid_argument("iob1_to_bioul: bad tag '" + t + "'");
    const std::string type = t.substr(2);
    if (t[0] == 'I' && open && open_type == type) continue;  // extends current chunk
    // I- starting a chunk, or B- splitting off a new one
    close(i - 1);
    open = true;
    open_type = type;
    open_begin = i;
  }
  close(tags.empty() ? 0 : tags.size() - 1);

  std::vector<std::string> out(tags.size(), "O");
  for (const auto& c : chunks) {
    if (c.begin == c.end) {
      out[c.begin] = "U-" + c.type;
    } else {
      out[c.begin] = "B-" + c.type;
      for (size_t i = c.begin + 1; i < c.end; ++i) out[i] = "I-" + c.type;
      out[c.end] = "L-" + c.type;
    }
  }
  return out;
}

std::vector<RawSentence> read_wikiann(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<RawSentence> out;
  std::vector<std::string> words, tags;
  int64_t lineno = 0;

  auto finish = [&]() {
    if (words.empty()) return;
    RawSentence s;
    s.words = std::move(words);
    s.ner = iob1_to_bioul(tags);
    out.push_back(std::move(s));
    words.clear();
    tags.clear();
  };

  std::string raw;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = strip_cr(raw);
    if (!utf8_valid(line)) fail_at(path, lineno, "invalid UTF-8");
    if (line.empty()) {
      finish();
      continue;
    }
    auto cols = split_on(line, '\t');
    if (cols.size() != 2 || cols[0].empty() || cols[1].empty())
      fail_at(path, lineno, "expected 'token<TAB>tag'");
    words.push_back(cols[0]);
    tags.push_back(cols[1]);
  }
  finish();
  if (out.empty()) throw std::runtime_error(path + ": no sentences");
  return out;
}

SplitSentences split_dataset(const std::vector<RawSentence>& sentences, uint64_t seed,
                             std::array<int, 3> ratios) {
  const int64_t n = static_cast<int64_t>(sentences.size());
  const int64_t total_ratio = ratios[0] + ratios[1] + ratios[2];
  if (n < total_ratio)
    throw std::invalid_argument("split_dataset: need at least " + std::to_string(total_ratio) +
                                " sentences, got " + std::to_string(n));

  // largest-remainder apportionment keeps each split within 1 of its share
  std::array<int64_t, 3> sizes;
  std::array<double, 3> frac;
  int64_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double share = static_cast<double>(n) * ratios[i] / static_cast<double>(total_ratio);
    sizes[i] = static_cast<int64_t>(share);
    frac[i] = share - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (int i = 0; assigned < n; ++i, ++assigned) sizes[order[i % 3]] += 1;

  std::vector<int64_t> idx(n);
  for (int64_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());

  SplitSentences out;
  int64_t at = 0;
  for (int64_t i = 0; i < sizes[0]; ++i) out.train.push_back(sentences[idx[at++]]);
  for (int64_t i = 0; i < sizes[1]; ++i) out.dev.push_back(sentences[idx[at++]]);
  for (int64_t i = 0; i < sizes[2]; ++i) out.test.push_back(sentences[idx[at++]]);
  return out;
}

int64_t UnlabeledCorpus::sentence_count() const {
  int64_t n = 0;
  for (const auto& d : documents) n += static_cast<int64_t>(d.size());
  return n;
}

UnlabeledCorpus read_unlabeled(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  UnlabeledCorpus corpus;
  std::vector<std::vector<std::string>> doc;
  int64_t lineno = 0;
  std::string raw;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = strip_cr(raw);
    if (!utf8_valid(line)) fail_at(path, lineno, "invalid UTF-8");
    if (line.empty()) {
      if (!doc.empty()) corpus.documents.push_back(std::move(doc));
      doc.clear();
      continue;
    }
    std::vector<std::string> words;
    std::istringstream ss(line);
    std::string w;
    while (ss >> w) words.push_back(w);
    if (!words.empty()) doc.push_back(std::move(words));
  }
  if (!doc.empty()) corpus.documents.push_back(std::move(doc));
  if (corpus.documents.empty()) throw std::runtime_error(path + ": no documents");
  return corpus;
}

std::pair<UnlabeledCorpus, UnlabeledCorpus> split_documents(const UnlabeledCorpus& corpus,
                                                            double val_fraction, uint64_t seed) {
  const int64_t n = static_cast<int64_t>(corpus.documents.size());
  if (n < 2)
    throw std::invalid_argument("split_documents: need at least 2 documents to hold one out");
  int64_t n_val = std::llround(val_fraction * static_cast<double>(n));
  n_val = std::clamp<int64_t>(n_val, 1, n - 1);

  std::vector<int64_t> idx(n);
  for (int64_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());

  UnlabeledCorpus train, val;
  for (int64_t i = 0; i < n; ++i) {
    (i < n_val ? val : train).documents.push_back(corpus.documents[idx[i]]);
  }
  return {std::move(train), std::move(val)};
}

std::vector<EncodedSentence> chunk_sequences(const std::vector<EncodedSentence>& sentences,
                                             int64_t max_wordpieces) {
  if (max_wordpieces < 3)
    throw std::invalid_argument("chunk_sequences: cap must allow CLS + piece + SEP");
  std::vector<EncodedSentence> out;
  const int64_t content_cap = max_wordpieces - 2;  // room for CLS/SEP

  for (const auto& s : sentences) {
    if (s.piece_count() <= max_wordpieces) {
      out.push_back(s);
      continue;
    }
    if (s.has_xpos() || s.has_parse() || s.has_ner())
      throw std::runtime_error(
          "chunk_sequences: annotated sentence exceeds " + std::to_string(max_wordpieces) +
          " wordpieces and cannot be split: '" + preview(s.words) + "'");

    // greedy word-aligned packing
    size_t w = 0;
    while (w < s.words.size()) {
      EncodedSentence chunk;
      chunk.piece_ids.push_back(kClsId);
      int64_t used = 0;
      while (w < s.words.size()) {
        const auto [begin, len] = s.word_pieces[w];
        if (len > content_cap)
          throw std::runtime_error("chunk_sequences: single word '" + s.words[w] + "' spans " +
                                   std::to_string(len) + " wordpieces, above the cap");
        if (used + len > content_cap) break;
        chunk.words.push_back(s.words[w]);
        chunk.norm_words.push_back(s.norm_words[w]);
        chunk.word_pieces.emplace_back(static_cast<int32_t>(chunk.piece_ids.size()),
                                       static_cast<int32_t>(len));
        for (int32_t k = 0; k < len; ++k) chunk.piece_ids.push_back(s.piece_ids[begin + k]);
        used += len;
        ++w;
      }
      chunk.piece_ids.push_back(kSepId);
      out.push_back(std::move(chunk));
    }
  }
  return out;
}

EncodedSentence encode_annotated(const RawSentence& raw, const Vocabulary& vocab,
                                 const LabelMap* xpos_tags, const LabelMap* deprels,
                                 const LabelMap* ner_tags) {
  EncodedSentence s = encode(raw.words, vocab);
  auto map_layer = [&](const std::vector<std::string>& names, const LabelMap* labels,
                       const char* what) {
    std::vector<int32_t> ids;
    ids.reserve(names.size());
    for (const auto& n : names) {
      const int32_t id = labels->id(n);
      if (id < 0)
        throw std::runtime_error(std::string("encode_annotated: ") + what + " '" + n +
                                 "' missing from inventory");
      ids.push_back(id);
    }
    return ids;
  };
  if (!raw.xpos.empty() && xpos_tags) s.xpos = map_layer(raw.xpos, xpos_tags, "xpos tag");
  if (!raw.heads.empty()) {
    s.heads = raw.heads;
    if (deprels) s.deprels = map_layer(raw.deprels, deprels, "deprel");
  }
  if (!raw.ner.empty() && ner_tags) s.ner = map_layer(raw.ner, ner_tags, "ner tag");
  return s;
}

}  // namespace microbert
