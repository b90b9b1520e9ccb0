#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace microbert {

// special wordpiece ids, fixed at the bottom of every vocabulary
constexpr int32_t kPadId = 0;
constexpr int32_t kUnkId = 1;
constexpr int32_t kClsId = 2;
constexpr int32_t kSepId = 3;
constexpr int32_t kMaskId = 4;
constexpr int32_t kNumSpecials = 5;

extern const char* const kSpecialPieces[kNumSpecials];

// Unicode NFD followed by root-locale lowercasing, iterated to a fixpoint so
// the result is idempotent.
std::string normalize(const std::string& text);

// true iff s is well-formed UTF-8
bool utf8_valid(const std::string& s);

// byte offsets of code point starts, plus one past-the-end offset
std::vector<size_t> utf8_boundaries(const std::string& s);

// vocabulary budget as a function of the number of unique whitespace tokens:
// 8k floor, 14k cap, linear in between with the cap reached at 200k tokens
int32_t choose_vocab_size(int64_t unique_token_count);

class Vocabulary {
 public:
  // Greedy pair-merge WordPiece training over normalized word counts. The
  // result holds the specials, both bare and continuation forms of every
  // character seen, and up to vocab_size total pieces. Deterministic: ties in
  // the merge score are broken lexicographically.
  static Vocabulary train(const std::unordered_map<std::string, int64_t>& word_counts,
                          int32_t vocab_size);

  static Vocabulary from_pieces(std::vector<std::string> pieces);
  static Vocabulary load_file(const std::string& path);
  void save_file(const std::string& path) const;

  int32_t size() const { return static_cast<int32_t>(pieces_.size()); }
  const std::string& piece(int32_t id) const { return pieces_[id]; }
  const std::vector<std::string>& pieces() const { return pieces_; }
  // -1 when the piece is not in the vocabulary
  int32_t piece_id(const std::string& piece) const;

  // greedy longest-prefix segmentation of one normalized word; any residue
  // that cannot be matched collapses the whole word to a single UNK
  std::vector<int32_t> encode_word(const std::string& normalized_word) const;

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int32_t> index_;
  size_t max_piece_chars_ = 1;

  void build_index();
};

// One sentence ready for the model: normalized, segmented, wrapped in
// CLS/SEP, with word->piece boundaries for pooling and optional gold
// annotation layers aligned 1:1 with words.
struct EncodedSentence {
  std::vector<std::string> words;
  std::vector<std::string> norm_words;
  std::vector<int32_t> piece_ids;  // [CLS] pieces... [SEP]
  // per word: (absolute index of first piece in piece_ids, piece count)
  std::vector<std::pair<int32_t, int32_t>> word_pieces;

  std::vector<int32_t> xpos;     // tag ids, empty when absent
  std::vector<int32_t> heads;    // 0 = root, empty when absent
  std::vector<int32_t> deprels;  // label ids, parallel to heads
  std::vector<int32_t> ner;      // BIOUL tag ids, empty when absent

  bool has_xpos() const { return !xpos.empty(); }
  bool has_parse() const { return !heads.empty(); }
  bool has_ner() const { return !ner.empty(); }
  int64_t word_count() const { return static_cast<int64_t>(words.size()); }
  int64_t piece_count() const { return static_cast<int64_t>(piece_ids.size()); }
};

EncodedSentence encode(const std::vector<std::string>& words, const Vocabulary& vocab);

}  // namespace microbert
