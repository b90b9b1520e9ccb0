#include "microbert/tokenizer.hpp"

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace microbert {

const char* const kSpecialPieces[kNumSpecials] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

std::string normalize(const std::string& text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfd = icu::Normalizer2::getNFDInstance(status);
  if (U_FAILURE(status)) throw std::runtime_error("normalize: ICU NFD unavailable");
  icu::UnicodeString s = icu::UnicodeString::fromUTF8(text);
  // lowercasing can reintroduce composed characters, so iterate to a fixpoint
  for (int i = 0; i < 4; ++i) {
    icu::UnicodeString d;
    nfd->normalize(s, d, status);
    if (U_FAILURE(status)) throw std::runtime_error("normalize: ICU normalization failed");
    d.toLower(icu::Locale::getRoot());
    if (d == s) break;
    s = d;
  }
  std::string out;
  s.toUTF8String(out);
  return out;
}

bool utf8_valid(const std::string& s) {
  size_t i = 0;
  const auto* b = reinterpret_cast<const unsigned char*>(s.data());
  while (i < s.size()) {
    unsigned char c = b[i];
    size_t extra;
    uint32_t cp;
    if (c < 0x80) {
      extra = 0;
      cp = c;
    } else if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= s.size()) return false;  // truncated sequence
    for (size_t k = 1; k <= extra; ++k) {
      if ((b[i + k] & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (b[i + k] & 0x3F);
    }
    // reject overlong encodings, surrogates and out-of-range values
    if (extra == 1 && cp < 0x80) return false;
    if (extra == 2 && cp < 0x800) return false;
    if (extra == 3 && cp < 0x10000) return false;
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += extra + 1;
  }
  return true;
}

std::vector<size_t> utf8_boundaries(const std::string& s) {
  std::vector<size_t> out;
  size_t i = 0;
  while (i < s.size()) {
    out.push_back(i);
    unsigned char c = static_cast<unsigned char>(s[i]);
    size_t step = 1;
    if ((c & 0xE0) == 0xC0)
      step = 2;
    else if ((c & 0xF0) == 0xE0)
      step = 3;
    else if ((c & 0xF8) == 0xF0)
      step = 4;
    i = std::min(i + step, s.size());
  }
  out.push_back(s.size());
  return out;
}

int32_t choose_vocab_size(int64_t unique_token_count) {
  if (unique_token_count < 0) throw std::invalid_argument("choose_vocab_size: negative count");
  const double frac = std::min(1.0, static_cast<double>(unique_token_count) / 200000.0);
  auto size = static_cast<int32_t>(8000 + std::llround(6000.0 * frac));
  return std::clamp(size, 8000, 14000);
}

void Vocabulary::build_index() {
  index_.clear();
  max_piece_chars_ = 1;
  for (size_t i = 0; i < pieces_.size(); ++i) {
    auto [it, inserted] = index_.emplace(pieces_[i], static_cast<int32_t>(i));
    if (!inserted)
      throw std::invalid_argument("vocabulary: duplicate piece '" + pieces_[i] + "'");
    const std::string& p = pieces_[i];
    const bool cont = p.size() > 2 && p[0] == '#' && p[1] == '#';
    const size_t chars = utf8_boundaries(cont ? p.substr(2) : p).size() - 1;
    max_piece_chars_ = std::max(max_piece_chars_, chars);
  }
}

Vocabulary Vocabulary::from_pieces(std::vector<std::string> pieces) {
  Vocabulary v;
  v.pieces_ = std::move(pieces);
  if (v.pieces_.size() < kNumSpecials)
    throw std::invalid_argument("vocabulary: missing special pieces");
  for (int i = 0; i < kNumSpecials; ++i)
    if (v.pieces_[i] != kSpecialPieces[i])
      throw std::invalid_argument("vocabulary: piece " + std::to_string(i) + " must be " +
                                  kSpecialPieces[i] + ", got '" + v.pieces_[i] + "'");
  v.build_index();
  return v;
}

int32_t Vocabulary::piece_id(const std::string& piece) const {
  auto it = index_.find(piece);
  return it == index_.end() ? -1 : it->second;
}

namespace {

// exact comparison of count_a/(la*ra) vs count_b/(lb*rb) plus a
// lexicographic tie-break, so training never depends on float rounding
struct MergeCandidate {
  int64_t pair_count;
  int64_t left_count;
  int64_t right_count;
  const std::string* left;
  const std::string* right;

  bool better_than(const MergeCandidate& o) const {
    const __int128 a = static_cast<__int128>(pair_count) * o.left_count * o.right_count;
    const __int128 b = static_cast<__int128>(o.pair_count) * left_count * right_count;
    if (a != b) return a > b;
    if (*left != *o.left) return *left < *o.left;
    return *right < *o.right;
  }
};

}  // namespace

Vocabulary Vocabulary::train(const std::unordered_map<std::string, int64_t>& word_counts,
                             int32_t vocab_size) {
  if (word_counts.empty()) throw std::invalid_argument("wordpiece: empty corpus");

  // intern piece strings as dense symbols
  std::vector<std::string> sym_str;
  std::unordered_map<std::string, int32_t> sym_id;
  auto intern = [&](const std::string& s) {
    auto it = sym_id.find(s);
    if (it != sym_id.end()) return it->second;
    int32_t id = static_cast<int32_t>(sym_str.size());
    sym_str.push_back(s);
    sym_id.emplace(s, id);
    return id;
  };

  // deterministic iteration order over words
  std::map<std::string, int64_t> sorted_counts(word_counts.begin(), word_counts.end());

  // collect the alphabet: both the bare and the continuation form of every
  // character, so greedy encoding can always consume a known character
  std::set<std::string> alphabet;
  for (const auto& [word, count] : sorted_counts) {
    if (word.empty() || count <= 0)
      throw std::invalid_argument("wordpiece: empty word or non-positive count");
    auto bounds = utf8_boundaries(word);
    for (size_t i = 0; i + 1 < bounds.size(); ++i) {
      std::string ch = word.substr(bounds[i], bounds[i + 1] - bounds[i]);
      alphabet.insert(ch);
      alphabet.insert("##" + ch);
    }
  }
  const int64_t base = kNumSpecials + static_cast<int64_t>(alphabet.size());
  if (vocab_size < base)
    throw std::invalid_argument("wordpiece: budget " + std::to_string(vocab_size) +
                                " below specials + alphabet (" + std::to_string(base) + ")");

  for (int i = 0; i < kNumSpecials; ++i) intern(kSpecialPieces[i]);
  for (const auto& ch : alphabet) intern(ch);

  // current segmentation of each distinct word
  struct Word {
    std::vector<int32_t> units;
    int64_t count;
  };
  std::vector<Word> words;
  words.reserve(sorted_counts.size());
  for (const auto& [word, count] : sorted_counts) {
    Word w;
    w.count = count;
    auto bounds = utf8_boundaries(word);
    for (size_t i = 0; i + 1 < bounds.size(); ++i) {
      std::string ch = word.substr(bounds[i], bounds[i + 1] - bounds[i]);
      w.units.push_back(intern(i == 0 ? ch : "##" + ch));
    }
    words.push_back(std::move(w));
  }

  // occurrence counts per symbol and per adjacent pair, plus an inverted
  // index from pair to the words containing it
  std::vector<int64_t> sym_count(sym_str.size(), 0);
  auto pair_key = [](int32_t l, int32_t r) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(l)) << 32) | static_cast<uint32_t>(r);
  };
  std::unordered_map<uint64_t, int64_t> pair_count;
  std::unordered_map<uint64_t, std::set<int32_t>> pair_words;
  for (size_t wi = 0; wi < words.size(); ++wi) {
    const auto& w = words[wi];
    for (size_t i = 0; i < w.units.size(); ++i) {
      sym_count[w.units[i]] += w.count;
      if (i + 1 < w.units.size()) {
        uint64_t key = pair_key(w.units[i], w.units[i + 1]);
        pair_count[key] += w.count;
        pair_words[key].insert(static_cast<int32_t>(wi));
      }
    }
  }

  std::vector<int32_t> merged_syms;
  while (base + static_cast<int64_t>(merged_syms.size()) < vocab_size) {
    bool found = false;
    MergeCandidate best{0, 0, 0, nullptr, nullptr};
    uint64_t best_key = 0;
    for (const auto& [key, count] : pair_count) {
      if (count <= 0) continue;
      const int32_t l = static_cast<int32_t>(key >> 32);
      const int32_t r = static_cast<int32_t>(key & 0xFFFFFFFFu);
      MergeCandidate cand{count, sym_count[l], sym_count[r], &sym_str[l], &sym_str[r]};
      if (!found || cand.better_than(best)) {
        best = cand;
        best_key = key;
        found = true;
      }
    }
    if (!found) break;

    const int32_t l = static_cast<int32_t>(best_key >> 32);
    const int32_t r = static_cast<int32_t>(best_key & 0xFFFFFFFFu);
    // within a word every non-initial unit is a continuation piece
    const std::string merged = sym_str[l] + sym_str[r].substr(2);
    const int32_t m = intern(merged);
    if (static_cast<size_t>(m) >= sym_count.size()) sym_count.push_back(0);
    merged_syms.push_back(m);

    auto affected = pair_words[best_key];  // copy: re-segmentation mutates the index
    for (int32_t wi : affected) {
      auto& w = words[wi];
      // retract this word's contributions
      for (size_t i = 0; i < w.units.size(); ++i) {
        sym_count[w.units[i]] -= w.count;
        if (i + 1 < w.units.size()) {
          uint64_t key = pair_key(w.units[i], w.units[i + 1]);
          pair_count[key] -= w.count;
          if (pair_count[key] <= 0) pair_count.erase(key);
          auto pw = pair_words.find(key);
          if (pw != pair_words.end()) {
            pw->second.erase(wi);
            if (pw->second.empty()) pair_words.erase(pw);
          }
        }
      }
      // apply the merge left-to-right
      std::vector<int32_t> next;
      next.reserve(w.units.size());
      for (size_t i = 0; i < w.units.size();) {
        if (i + 1 < w.units.size() && w.units[i] == l && w.units[i + 1] == r) {
          next.push_back(m);
          i += 2;
        } else {
          next.push_back(w.units[i]);
          i += 1;
        }
      }
      w.units = std::move(next);
      // re-add contributions
      for (size_t i = 0; i < w.units.size(); ++i) {
        sym_count[w.units[i]] += w.count;
        if (i + 1 < w.units.size()) {
          uint64_t key = pair_key(w.units[i], w.units[i + 1]);
          pair_count[key] += w.count;
          pair_words[key].insert(wi);
        }
      }
    }
  }

  std::vector<std::string> pieces;
  pieces.reserve(static_cast<size_t>(base) + merged_syms.size());
  for (int i = 0; i < kNumSpecials; ++i) pieces.push_back(kSpecialPieces[i]);
  for (const auto& ch : alphabet) pieces.push_back(ch);
  for (int32_t m : merged_syms) pieces.push_back(sym_str[m]);
  return from_pieces(std::move(pieces));
}

Vocabulary Vocabulary::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("vocabulary: cannot open " + path);
  std::vector<std::string> pieces;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    pieces.push_back(line);
  }
  return from_pieces(std::move(pieces));
}

void Vocabulary::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("vocabulary: cannot write " + path);
  for (const auto& p : pieces_) out << p << '\n';
  if (!out) throw std::runtime_error("vocabulary: write failed for " + path);
}

std::vector<int32_t> Vocabulary::encode_word(const std::string& normalized_word) const {
  if (normalized_word.empty()) return {kUnkId};
  const auto bounds = utf8_boundaries(normalized_word);
  const size_t n = bounds.size() - 1;  // code points
  std::vector<int32_t> out;
  size_t start = 0;
  while (start < n) {
    const size_t max_len = std::min(n - start, max_piece_chars_);
    int32_t match = -1;
    size_t match_len = 0;
    for (size_t len = max_len; len >= 1; --len) {
      std::string cand =
          normalized_word.substr(bounds[start], bounds[start + len] - bounds[start]);
      if (start > 0) cand = "##" + cand;
      const int32_t id = piece_id(cand);
      if (id >= 0) {
        match = id;
        match_len = len;
        break;
      }
    }
    if (match < 0) return {kUnkId};  // whole-word fallback
    out.push_back(match);
    start += match_len;
  }
  return out;
}

EncodedSentence encode(const std::vector<std::string>& words, const Vocabulary& vocab) {
  EncodedSentence s;
  s.words = words;
  s.norm_words.reserve(words.size());
  s.piece_ids.push_back(kClsId);
  for (const auto& w : words) {
    std::string norm = normalize(w);
    const auto pieces = vocab.encode_word(norm);
    s.word_pieces.emplace_back(static_cast<int32_t>(s.piece_ids.size()),
                               static_cast<int32_t>(pieces.size()));
    s.piece_ids.insert(s.piece_ids.end(), pieces.begin(), pieces.end());
    s.norm_words.push_back(std::move(norm));
  }
  s.piece_ids.push_back(kSepId);
  return s;
}

}  // namespace microbert
