#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "microbert/tokenizer.hpp"

namespace microbert {

// string <-> dense id inventory, first-seen order
class LabelMap {
 public:
  int32_t intern(const std::string& name) {
    auto it = index_.find(name);
    if (it != index_.end()) return it->second;
    int32_t id = static_cast<int32_t>(names_.size());
    names_.push_back(name);
    index_.emplace(name, id);
    return id;
  }
  int32_t id(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }
  const std::string& name(int32_t id) const { return names_[id]; }
  int32_t size() const { return static_cast<int32_t>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int32_t> index_;
};

// one sentence with whatever gold layers its source provides
struct RawSentence {
  std::vector<std::string> words;
  std::vector<std::string> xpos;     // empty when absent
  std::vector<int32_t> heads;        // 0 = root; empty when absent
  std::vector<std::string> deprels;  // parallel to heads
  std::vector<std::string> ner;      // BIOUL tags; empty when absent
};

struct Treebank {
  std::vector<RawSentence> sentences;
  LabelMap xpos_tags;
  LabelMap deprels;
};

// CoNLL-U: keeps form/XPOS/head/deprel of syntactic words; drops comments,
// multiword range lines and empty nodes. Malformed lines and out-of-range
// heads are rejected with their location.
Treebank read_conllu(const std::string& path);

// exact chunk-preserving scheme conversion
std::vector<std::string> iob1_to_bioul(const std::vector<std::string>& tags);

// WikiAnn-style two-column token/tag file, blank-line sentence separators;
// tags are converted from IOB1 to BIOUL on read
std::vector<RawSentence> read_wikiann(const std::string& path);

struct SplitSentences {
  std::vector<RawSentence> train, dev, test;
};

// seeded sentence-level split; split sizes match the exact proportional
// shares to within one sentence (largest-remainder rounding)
SplitSentences split_dataset(const std::vector<RawSentence>& sentences, uint64_t seed,
                             std::array<int, 3> ratios = {8, 1, 1});

// unlabeled pretraining text: one space-tokenized sentence per line, blank
// line between documents
struct UnlabeledCorpus {
  std::vector<std::vector<std::vector<std::string>>> documents;  // doc -> sentence -> words
  int64_t sentence_count() const;
};

UnlabeledCorpus read_unlabeled(const std::string& path);

// document-level validation carve-out of ~fraction of documents
std::pair<UnlabeledCorpus, UnlabeledCorpus> split_documents(const UnlabeledCorpus& corpus,
                                                            double val_fraction, uint64_t seed);

// Word-aligned chunking to at most max_wordpieces pieces per sentence
// (CLS/SEP included). Annotated sentences must already fit: splitting them
// would break their gold layers, so oversize ones are an error.
std::vector<EncodedSentence> chunk_sequences(const std::vector<EncodedSentence>& sentences,
                                             int64_t max_wordpieces = 500);

// id-mapped gold layers on top of tokenizer encoding; layers absent from the
// source stay empty
EncodedSentence encode_annotated(const RawSentence& raw, const Vocabulary& vocab,
                                 const LabelMap* xpos_tags, const LabelMap* deprels,
                                 const LabelMap* ner_tags);

}  // namespace microbert
