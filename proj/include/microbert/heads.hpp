#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "microbert/encoder.hpp"
#include "microbert/tensor.hpp"
#include "microbert/tokenizer.hpp"

namespace microbert {

// Whole-word dynamic masking: words are selected as units, so either all of a
// word's pieces take the action or none do.
struct MaskPlan {
  enum class Action : uint8_t { kMask, kRandom, kKeep };
  std::vector<std::pair<int32_t, Action>> selections;  // (word index, action)
  uint64_t seed = 0;
};

// Each word is selected independently with probability rate; empty draws are
// retried and, as a last resort, one word is forced so the plan is never
// empty. Actions follow the 0.8/0.1/0.1 mask/random/keep split.
MaskPlan make_mask_plan(const EncodedSentence& sentence, double rate, uint64_t seed);

// substituted piece ids for the masked pass; selected words' original ids are
// appended to targets as (piece position, gold id) pairs
std::vector<int32_t> apply_mask_plan(const EncodedSentence& sentence, const MaskPlan& plan,
                                     int32_t vocab_size,
                                     std::vector<std::pair<int64_t, int32_t>>* targets);

// ---------------------------------------------------------------------------
// MLM head: logits through the tied input embedding plus a vocabulary bias

template <class T>
struct MlmHeadT {
  TensorT<T> bias;  // [V]

  static MlmHeadT init(int64_t vocab_size) {
    return MlmHeadT{TensorT<T>::zeros({vocab_size}, true)};
  }
  std::vector<NamedTensor<T>> named_tensors() {
    return {{"heads/mlm/bias", &bias, true}};
  }
};

// mean cross-entropy at the masked piece positions of the masked pass
template <class T>
TensorT<T> mlm_loss(const EncoderOutputT<T>& masked_out, TensorT<T>& tok_emb, MlmHeadT<T>& head,
                    const std::vector<std::vector<std::pair<int64_t, int32_t>>>& batch_targets) {
  const int64_t tmax = masked_out.last().dim(1);
  std::vector<int64_t> rows;
  std::vector<int32_t> gold;
  for (size_t b = 0; b < batch_targets.size(); ++b)
    for (auto [pos, id] : batch_targets[b]) {
      rows.push_back(static_cast<int64_t>(b) * tmax + pos);
      gold.push_back(id);
    }
  op_check(!rows.empty(), "mlm_loss: empty mask plan");
  auto picked = select_rows(masked_out.last(), rows);
  auto logits = add_bias(matmul_nt(picked, tok_emb), head.bias);
  return mean_all(softmax_cross_entropy(logits, gold));
}

// ---------------------------------------------------------------------------
// XPOS head: linear projection of pooled word states

template <class T>
struct XposHeadT {
  TensorT<T> w;  // [H, n_tags]
  TensorT<T> b;  // [n_tags]

  static XposHeadT init(int64_t hidden, int64_t n_tags, Rng& rng) {
    return XposHeadT{TensorT<T>::randn({hidden, n_tags}, rng, T(0.02), true),
                     TensorT<T>::zeros({n_tags}, true)};
  }
  std::vector<NamedTensor<T>> named_tensors() {
    return {{"heads/xpos/w", &w, false}, {"heads/xpos/b", &b, true}};
  }
};

// mean cross-entropy over every word of every tagged sentence (unmasked pass)
template <class T>
TensorT<T> xpos_loss(const EncoderOutputT<T>& unmasked_out, XposHeadT<T>& head,
                     const std::vector<const EncodedSentence*>& batch) {
  std::vector<int64_t> rows;
  std::vector<int32_t> gold;
  for (size_t b = 0; b < batch.size(); ++b) {
    if (!batch[b]->has_xpos()) continue;
    for (int64_t i = 0; i < batch[b]->word_count(); ++i) {
      rows.push_back(unmasked_out.word_offset[b] + i);
      gold.push_back(batch[b]->xpos[i]);
    }
  }
  op_check(!rows.empty(), "xpos_loss: no tagged words in batch");
  auto picked = select_rows(unmasked_out.pooled, rows);
  auto logits = add_bias(matmul(picked, head.w), head.b);
  return mean_all(softmax_cross_entropy(logits, gold));
}

// ---------------------------------------------------------------------------
// Biaffine dependency scorer (no LSTM): ReLU perceptron projections of the
// pooled word states, a learned ROOT state at index 0, and
//   s(dep i, head j) = head(j)^T U dep(i) + b^T head(j)

// raw bilinear arc scores; dep/head are [n+1, d] projections
template <class T>
TensorT<T> arc_score_matrix(const TensorT<T>& dep, const TensorT<T>& head, const TensorT<T>& u,
                            const TensorT<T>& bias) {
  auto s = matmul_nt(matmul_nt(dep, u), head);  // s[i][j] = dep(i)^T u^T head(j)
  const int64_t d = bias.dim(0);
  auto hb = reshape(matmul(head, reshape(bias, {d, 1})), {head.dim(0)});
  return add_bias(s, hb);  // adds b^T head(j) down each column j
}

template <class T>
struct BiaffineHeadT {
  int64_t arc_dim = 0, lab_dim = 0;
  int64_t n_labels = 0;
  TensorT<T> root;  // [H], the synthetic ROOT word state
  TensorT<T> arc_dep_w, arc_dep_b, arc_head_w, arc_head_b;
  TensorT<T> arc_u;     // [d, d]
  TensorT<T> arc_bias;  // [d]
  TensorT<T> lab_dep_w, lab_dep_b, lab_head_w, lab_head_b;
  TensorT<T> lab_u;           // [dl, n_labels*dl], per-label bilinear forms
  TensorT<T> lab_wd, lab_wh;  // [dl, n_labels] linear terms
  TensorT<T> lab_bias;        // [n_labels]

  static BiaffineHeadT init(int64_t hidden, int64_t arc_dim, int64_t lab_dim, int64_t n_labels,
                            Rng& rng) {
    const T std = T(0.02);
    BiaffineHeadT h;
    h.arc_dim = arc_dim;
    h.lab_dim = lab_dim;
    h.n_labels = n_labels;
    h.root = TensorT<T>::randn({hidden}, rng, std, true);
    h.arc_dep_w = TensorT<T>::randn({hidden, arc_dim}, rng, std, true);
    h.arc_dep_b = TensorT<T>::zeros({arc_dim}, true);
    h.arc_head_w = TensorT<T>::randn({hidden, arc_dim}, rng, std, true);
    h.arc_head_b = TensorT<T>::zeros({arc_dim}, true);
    h.arc_u = TensorT<T>::randn({arc_dim, arc_dim}, rng, std, true);
    h.arc_bias = TensorT<T>::zeros({arc_dim}, true);
    h.lab_dep_w = TensorT<T>::randn({hidden, lab_dim}, rng, std, true);
    h.lab_dep_b = TensorT<T>::zeros({lab_dim}, true);
    h.lab_head_w = TensorT<T>::randn({hidden, lab_dim}, rng, std, true);
    h.lab_head_b = TensorT<T>::zeros({lab_dim}, true);
    h.lab_u = TensorT<T>::randn({lab_dim, n_labels * lab_dim}, rng, std, true);
    h.lab_wd = TensorT<T>::randn({lab_dim, n_labels}, rng, std, true);
    h.lab_wh = TensorT<T>::randn({lab_dim, n_labels}, rng, std, true);
    h.lab_bias = TensorT<T>::zeros({n_labels}, true);
    return h;
  }

  std::vector<NamedTensor<T>> named_tensors(const std::string& prefix = "heads/parse/") {
    return {{prefix + "root", &root, false},
            {prefix + "arc_dep_w", &arc_dep_w, false},
            {prefix + "arc_dep_b", &arc_dep_b, true},
            {prefix + "arc_head_w", &arc_head_w, false},
            {prefix + "arc_head_b", &arc_head_b, true},
            {prefix + "arc_u", &arc_u, false},
            {prefix + "arc_bias", &arc_bias, true},
            {prefix + "lab_dep_w", &lab_dep_w, false},
            {prefix + "lab_dep_b", &lab_dep_b, true},
            {prefix + "lab_head_w", &lab_head_w, false},
            {prefix + "lab_head_b", &lab_head_b, true},
            {prefix + "lab_u", &lab_u, false},
            {prefix + "lab_wd", &lab_wd, false},
            {prefix + "lab_wh", &lab_wh, false},
            {prefix + "lab_bias", &lab_bias, true}};
  }
};

// projections and arc scores for one sentence; word_states is [n, H]
template <class T>
struct BiaffineScoresT {
  TensorT<T> arc;       // [(n+1), (n+1)], row = dependent, col = head; row 0 unused
  TensorT<T> dep_lab;   // [n+1, dl]
  TensorT<T> head_lab;  // [n+1, dl]
};

template <class T>
BiaffineScoresT<T> biaffine_scores(BiaffineHeadT<T>& head, const TensorT<T>& word_states) {
  auto states = concat_rows<T>({reshape(head.root, {1, head.root.dim(0)}), word_states});
  auto dep_arc = relu(add_bias(matmul(states, head.arc_dep_w), head.arc_dep_b));
  auto head_arc = relu(add_bias(matmul(states, head.arc_head_w), head.arc_head_b));
  BiaffineScoresT<T> out;
  out.arc = arc_score_matrix(dep_arc, head_arc, head.arc_u, head.arc_bias);
  out.dep_lab = relu(add_bias(matmul(states, head.lab_dep_w), head.lab_dep_b));
  out.head_lab = relu(add_bias(matmul(states, head.lab_head_w), head.lab_head_b));
  return out;
}

// label score rows for the given (dependent, head) index pairs -> [pairs, L]
template <class T>
TensorT<T> biaffine_label_scores(BiaffineHeadT<T>& head, const BiaffineScoresT<T>& sc,
                                 const std::vector<std::pair<int64_t, int64_t>>& pairs) {
  const int64_t n = static_cast<int64_t>(pairs.size());
  const int64_t dl = head.lab_dim, L = head.n_labels;
  std::vector<int64_t> dep_idx, head_idx, tile_idx;
  for (auto [d, h] : pairs) {
    dep_idx.push_back(d);
    head_idx.push_back(h);
  }
  auto dep_sel = select_rows(sc.dep_lab, dep_idx);    // [n, dl]
  auto head_sel = select_rows(sc.head_lab, head_idx);  // [n, dl]
  // bilinear: score[i, l] = dep(i)^T U_l head(i)
  auto b = reshape(matmul(dep_sel, head.lab_u), {n * L, dl});
  tile_idx.reserve(n * L);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t l = 0; l < L; ++l) tile_idx.push_back(i);
  auto head_tile = select_rows(head_sel, tile_idx);  // [n*L, dl]
  auto bilinear = reshape(rowsum(mul(b, head_tile)), {n, L});
  auto linear = add(matmul(dep_sel, head.lab_wd), matmul(head_sel, head.lab_wh));
  return add_bias(add(bilinear, linear), head.lab_bias);
}

// summed head cross-entropy plus label cross-entropy at the gold arc (teacher
// forcing) for one sentence, given its word states [n, H] from any encoder
template <class T>
TensorT<T> parse_sentence_loss(BiaffineHeadT<T>& head, const TensorT<T>& word_states,
                               const EncodedSentence& s) {
  const int64_t n = s.word_count();
  op_check(s.has_parse(), "parse loss: sentence without parse annotations");
  op_check(word_states.rank() == 2 && word_states.dim(0) == n, "parse loss: bad word states");
  auto sc = biaffine_scores(head, word_states);

  std::vector<int64_t> dep_rows(n);
  for (int64_t i = 0; i < n; ++i) dep_rows[i] = i + 1;  // skip the ROOT row
  auto head_ce = softmax_cross_entropy(select_rows(sc.arc, dep_rows), s.heads);

  std::vector<std::pair<int64_t, int64_t>> gold_arcs(n);
  for (int64_t i = 0; i < n; ++i) gold_arcs[i] = {i + 1, s.heads[i]};
  auto lab_ce = biaffine_label_scores(head, sc, gold_arcs);
  auto lab_ce_rows = softmax_cross_entropy(lab_ce, s.deprels);

  return sum_all(add(head_ce, lab_ce_rows));
}

// mean over words of head cross-entropy plus label cross-entropy at the gold
// arc; unmasked pass only
template <class T>
TensorT<T> parse_loss(const EncoderOutputT<T>& unmasked_out, BiaffineHeadT<T>& head,
                      const std::vector<const EncodedSentence*>& batch) {
  TensorT<T> total;
  int64_t total_words = 0;
  for (size_t b = 0; b < batch.size(); ++b) {
    const auto* s = batch[b];
    if (!s->has_parse()) continue;
    const int64_t n = s->word_count();
    std::vector<int64_t> word_rows(n);
    for (int64_t i = 0; i < n; ++i) word_rows[i] = unmasked_out.word_offset[b] + i;
    auto states = select_rows(unmasked_out.pooled, word_rows);
    auto sent = parse_sentence_loss(head, states, *s);
    total = total.defined() ? add(total, sent) : sent;
    total_words += n;
  }
  op_check(total.defined(), "parse_loss: no parsed sentences in batch");
  return scale(total, T(1) / static_cast<T>(total_words));
}

// ---------------------------------------------------------------------------

// total multitask loss: plain sum of the present per-task losses
template <class T>
TensorT<T> aggregate(const std::vector<TensorT<T>>& losses) {
  op_check(!losses.empty(), "aggregate: empty loss bundle");
  TensorT<T> total = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  return total;
}

}  // namespace microbert
