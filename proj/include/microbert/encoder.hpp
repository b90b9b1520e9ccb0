#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "microbert/optim.hpp"
#include "microbert/rng.hpp"
#include "microbert/tensor.hpp"
#include "microbert/tokenizer.hpp"

namespace microbert {

struct EncoderConfig {
  int64_t layers = 3;
  int64_t hidden = 100;
  int64_t heads = 5;
  int64_t ffn = 400;  // 4H
  int64_t max_positions = 512;
  int64_t vocab_size = 8000;
  float dropout = 0.1f;

  void validate() const {
    if (layers < 0 || hidden <= 0 || heads <= 0 || ffn <= 0 || max_positions <= 0 ||
        vocab_size <= kNumSpecials)
      throw std::invalid_argument("encoder config: non-positive dimension");
    if (hidden % heads != 0)
      throw std::invalid_argument("encoder config: hidden " + std::to_string(hidden) +
                                  " not divisible by " + std::to_string(heads) + " heads");
    if (dropout < 0.0f || dropout >= 1.0f)
      throw std::invalid_argument("encoder config: dropout must be in [0,1)");
  }
};

// exact count of embedding + transformer-stack parameters (heads excluded)
int64_t count_parameters(const EncoderConfig& cfg);

// a named tensor plus its weight-decay exemption flag
template <class T>
struct NamedTensor {
  std::string name;
  TensorT<T>* tensor;
  bool no_decay;
};

template <class T>
struct EncoderWeightsT {
  EncoderConfig cfg;
  TensorT<T> tok_emb;  // [V, H]
  TensorT<T> pos_emb;  // [P, H]
  TensorT<T> emb_ln_g, emb_ln_b;

  struct Layer {
    TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;
    TensorT<T> ln1_g, ln1_b;
    TensorT<T> w1, b1;  // [H, F]
    TensorT<T> w2, b2;  // [F, H]
    TensorT<T> ln2_g, ln2_b;
  };
  std::vector<Layer> layers;

  static EncoderWeightsT init(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderWeightsT w;
    w.cfg = cfg;
    const T std = T(0.02);
    auto mat = [&](int64_t r, int64_t c) { return TensorT<T>::randn({r, c}, rng, std, true); };
    auto vec = [&](int64_t n) { return TensorT<T>::zeros({n}, true); };
    auto ones = [&](int64_t n) { return TensorT<T>::filled({n}, T(1), true); };
    w.tok_emb = mat(cfg.vocab_size, cfg.hidden);
    w.pos_emb = mat(cfg.max_positions, cfg.hidden);
    w.emb_ln_g = ones(cfg.hidden);
    w.emb_ln_b = vec(cfg.hidden);
    for (int64_t l = 0; l < cfg.layers; ++l) {
      Layer lay;
      lay.wq = mat(cfg.hidden, cfg.hidden);
      lay.bq = vec(cfg.hidden);
      lay.wk = mat(cfg.hidden, cfg.hidden);
      lay.bk = vec(cfg.hidden);
      lay.wv = mat(cfg.hidden, cfg.hidden);
      lay.bv = vec(cfg.hidden);
      lay.wo = mat(cfg.hidden, cfg.hidden);
      lay.bo = vec(cfg.hidden);
      lay.ln1_g = ones(cfg.hidden);
      lay.ln1_b = vec(cfg.hidden);
      lay.w1 = mat(cfg.hidden, cfg.ffn);
      lay.b1 = vec(cfg.ffn);
      lay.w2 = mat(cfg.ffn, cfg.hidden);
      lay.b2 = vec(cfg.hidden);
      lay.ln2_g = ones(cfg.hidden);
      lay.ln2_b = vec(cfg.hidden);
      w.layers.push_back(std::move(lay));
    }
    return w;
  }

  std::vector<NamedTensor<T>> named_tensors() {
    std::vector<NamedTensor<T>> out;
    out.push_back({"encoder/tok_emb", &tok_emb, false});
    out.push_back({"encoder/pos_emb", &pos_emb, false});
    out.push_back({"encoder/emb_ln/g", &emb_ln_g, true});
    out.push_back({"encoder/emb_ln/b", &emb_ln_b, true});
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "encoder/layer" + std::to_string(l) + "/";
      auto& lay = layers[l];
      out.push_back({p + "att/wq", &lay.wq, false});
      out.push_back({p + "att/bq", &lay.bq, true});
      out.push_back({p + "att/wk", &lay.wk, false});
      out.push_back({p + "att/bk", &lay.bk, true});
      out.push_back({p + "att/wv", &lay.wv, false});
      out.push_back({p + "att/bv", &lay.bv, true});
      out.push_back({p + "att/wo", &lay.wo, false});
      out.push_back({p + "att/bo", &lay.bo, true});
      out.push_back({p + "ln1/g", &lay.ln1_g, true});
      out.push_back({p + "ln1/b", &lay.ln1_b, true});
      out.push_back({p + "ffn/w1", &lay.w1, false});
      out.push_back({p + "ffn/b1", &lay.b1, true});
      out.push_back({p + "ffn/w2", &lay.w2, false});
      out.push_back({p + "ffn/b2", &lay.b2, true});
      out.push_back({p + "ln2/g", &lay.ln2_g, true});
      out.push_back({p + "ln2/b", &lay.ln2_b, true});
    }
    return out;
  }
};

template <class T>
struct EncoderOutputT {
  // hidden states per layer, embeddings first: L+1 tensors of [B, Tmax, H]
  std::vector<TensorT<T>> layer_states;
  // mean-pooled word states from the last layer, sentences concatenated
  TensorT<T> pooled;  // [total_words, H]
  std::vector<int64_t> lengths;      // true piece counts per sentence
  std::vector<int64_t> word_offset;  // start of each sentence's words in pooled
  std::vector<int64_t> word_count;   // words per sentence

  const TensorT<T>& last() const { return layer_states.back(); }
};

template <class T>
struct ForwardOptions {
  bool training = false;
  uint64_t dropout_seed = 0;
  // substituted piece ids per sentence (from a mask plan); empty = original
  const std::vector<std::vector<int32_t>>* piece_ids_override = nullptr;
};

template <class T>
EncoderOutputT<T> encoder_forward(EncoderWeightsT<T>& w,
                                  const std::vector<const EncodedSentence*>& batch,
                                  const ForwardOptions<T>& opts = {}) {
  const auto& cfg = w.cfg;
  const int64_t b_count = static_cast<int64_t>(batch.size());
  op_check(b_count > 0, "encoder_forward: empty batch");
  if (opts.piece_ids_override)
    op_check(static_cast<int64_t>(opts.piece_ids_override->size()) == b_count,
             "encoder_forward: override batch size mismatch");

  int64_t tmax = 0;
  for (const auto* s : batch) tmax = std::max(tmax, s->piece_count());
  if (tmax > cfg.max_positions)
    throw std::invalid_argument("encoder_forward: sequence of " + std::to_string(tmax) +
                                " wordpieces exceeds max positions " +
                                std::to_string(cfg.max_positions));

  std::vector<int32_t> tok_ids(static_cast<size_t>(b_count * tmax), kPadId);
  std::vector<int32_t> pos_ids(static_cast<size_t>(b_count * tmax), 0);
  std::vector<int64_t> lengths(b_count);
  for (int64_t b = 0; b < b_count; ++b) {
    const auto& ids =
        opts.piece_ids_override ? (*opts.piece_ids_override)[b] : batch[b]->piece_ids;
    op_check(!opts.piece_ids_override || ids.size() == batch[b]->piece_ids.size(),
             "encoder_forward: override length mismatch");
    lengths[b] = static_cast<int64_t>(ids.size());
    for (size_t t = 0; t < ids.size(); ++t) {
      tok_ids[b * tmax + static_cast<int64_t>(t)] = ids[t];
      pos_ids[b * tmax + static_cast<int64_t>(t)] = static_cast<int32_t>(t);
    }
  }

  const T drop = opts.training ? T(cfg.dropout) : T(0);
  uint64_t site = 0;
  auto next_seed = [&] { return Rng::mix(opts.dropout_seed, 0x5eedu, site++); };

  EncoderOutputT<T> out;
  out.lengths = lengths;

  auto x = add(embedding(w.tok_emb, tok_ids, {b_count, tmax}),
               embedding(w.pos_emb, pos_ids, {b_count, tmax}));
  x = layer_norm(x, w.emb_ln_g, w.emb_ln_b);
  x = dropout(x, drop, next_seed());
  out.layer_states.push_back(x);

  for (auto& lay : w.layers) {
    auto q = add_bias(matmul(x, lay.wq), lay.bq);
    auto k = add_bias(matmul(x, lay.wk), lay.bk);
    auto v = add_bias(matmul(x, lay.wv), lay.bv);
    auto att = multi_head_attention(q, k, v, lengths, cfg.heads, drop, next_seed());
    att = dropout(add_bias(matmul(att, lay.wo), lay.bo), drop, next_seed());
    x = layer_norm(add(x, att), lay.ln1_g, lay.ln1_b);
    auto ff = add_bias(matmul(gelu(add_bias(matmul(x, lay.w1), lay.b1)), lay.w2), lay.b2);
    ff = dropout(ff, drop, next_seed());
    x = layer_norm(add(x, ff), lay.ln2_g, lay.ln2_b);
    out.layer_states.push_back(x);
  }

  // average pool each word's pieces from the last layer
  std::vector<std::pair<int64_t, int64_t>> segments;
  for (int64_t b = 0; b < b_count; ++b) {
    out.word_offset.push_back(static_cast<int64_t>(segments.size()));
    out.word_count.push_back(batch[b]->word_count());
    for (auto [begin, len] : batch[b]->word_pieces)
      segments.emplace_back(b * tmax + begin, len);
  }
  out.pooled = segment_mean(out.layer_states.back(), segments);
  return out;
}

using EncoderWeights = EncoderWeightsT<float>;
using EncoderOutput = EncoderOutputT<float>;

// flat optimizer view over the encoder tensors
inline ParamList encoder_params(EncoderWeightsT<float>& w, float lr_mult = 1.0f) {
  ParamList out;
  for (auto& nt : w.named_tensors()) out.push_back({nt.name, *nt.tensor, nt.no_decay, lr_mult});
  return out;
}

}  // namespace microbert
