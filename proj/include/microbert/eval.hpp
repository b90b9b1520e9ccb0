#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "microbert/checkpoint.hpp"
#include "microbert/encoder.hpp"
#include "microbert/heads.hpp"
#include "microbert/optim.hpp"
#include "microbert/tokenizer.hpp"

namespace microbert {

// ---------------------------------------------------------------------------
// scalar mix: softmax-weighted combination of all encoder layers

// γ · Σ_k softmax(w)_k · layer_k
template <class T>
TensorT<T> scalar_mix(const std::vector<TensorT<T>>& layers, const TensorT<T>& weights,
                      const TensorT<T>& gamma) {
  const int64_t n = static_cast<int64_t>(layers.size());
  op_check(n > 0, "scalar_mix: no layers");
  op_check(weights.size() == n, "scalar_mix: " + std::to_string(weights.size()) +
                                    " weights for " + std::to_string(n) + " layers");
  for (const auto& l : layers)
    op_check(l.shape() == layers[0].shape(), "scalar_mix: layer shape mismatch");
  auto probs = softmax(reshape(weights, {1, n}));
  TensorT<T> acc;
  for (int64_t k = 0; k < n; ++k) {
    auto term = scale_by(layers[k], reshape(slice_cols(probs, k, 1), {}));
    acc = k == 0 ? term : add(acc, term);
  }
  return scale_by(acc, gamma);
}

struct ScalarMix {
  Tensor weights;  // [n_layers]
  Tensor gamma;    // scalar

  static ScalarMix init(int64_t n_layers) {
    return {Tensor::zeros({n_layers}, true), Tensor::scalar(1.0f, true)};
  }
  std::vector<NamedTensor<float>> named_tensors(const std::string& prefix) {
    return {{prefix + "mix/w", &weights, true}, {prefix + "mix/gamma", &gamma, true}};
  }
};

// ---------------------------------------------------------------------------
// BiLSTM stack with variational dropout and optional highway connections

// gate layout along the 4H axis: input, forget, cell, output
template <class T>
struct LstmDirW {
  TensorT<T> w_ih;  // [in, 4H]
  TensorT<T> w_hh;  // [H, 4H]
  TensorT<T> b;     // [4H]
};

// one direction over the full sequence; masks, when given, are applied to the
// input (in_mask) and the recurrent state (rec_mask) identically at every
// step (variational dropout)
template <class T>
TensorT<T> lstm_direction(const LstmDirW<T>& w, const TensorT<T>& x, bool reverse,
                          const TensorT<T>* in_mask, const TensorT<T>* rec_mask) {
  const int64_t n = x.dim(0), hidden = w.w_hh.dim(0);
  op_check(n > 0, "lstm: empty sequence");
  auto h = TensorT<T>::zeros({1, hidden});
  auto c = TensorT<T>::zeros({1, hidden});
  std::vector<TensorT<T>> out(n);
  for (int64_t step = 0; step < n; ++step) {
    const int64_t t = reverse ? n - 1 - step : step;
    auto xt = select_rows(x, {t});
    if (in_mask) xt = mul(xt, *in_mask);
    auto hp = rec_mask ? mul(h, *rec_mask) : h;
    auto gates = add_bias(add(matmul(xt, w.w_ih), matmul(hp, w.w_hh)), w.b);
    auto i = sigmoid(slice_cols(gates, 0, hidden));
    auto f = sigmoid(slice_cols(gates, hidden, hidden));
    auto g = tanh_op(slice_cols(gates, 2 * hidden, hidden));
    auto o = sigmoid(slice_cols(gates, 3 * hidden, hidden));
    c = add(mul(f, c), mul(i, g));
    h = mul(o, tanh_op(c));
    out[t] = h;
  }
  return concat_rows(out);
}

struct BiLstmLayer {
  LstmDirW<float> fwd, bwd;
  Tensor hw_proj, hw_gate_w, hw_gate_b;  // empty tensors when highway is off
};

struct BiLstm {
  int64_t in_dim = 0;
  int64_t hidden = 0;
  bool highway = false;
  float dropout = 0.0f;
  std::vector<BiLstmLayer> layers;

  static BiLstm init(int64_t in_dim, int64_t hidden, int64_t n_layers, bool highway,
                     float dropout, Rng& rng);
  std::vector<NamedTensor<float>> named_tensors(const std::string& prefix);
};

// [n, in_dim] -> [n, 2*hidden]; dropout masks are drawn from `seed` only when
// training
Tensor bilstm_forward(BiLstm& lstm, const Tensor& x, bool training, uint64_t seed);

// ---------------------------------------------------------------------------
// maximum spanning arborescence (Chu-Liu/Edmonds) with exactly one ROOT child

// scores is the (n+1)x(n+1) arc matrix, row = dependent, col = head; returns
// the head of each word (values in 0..n, 0 = ROOT)
std::vector<int32_t> decode_mst(const std::vector<double>& scores, int64_t n);

struct ParseScore {
  double uas = 0.0;
  double las = 0.0;
};

ParseScore las_uas(const std::vector<std::vector<int32_t>>& gold_heads,
                   const std::vector<std::vector<int32_t>>& gold_labels,
                   const std::vector<std::vector<int32_t>>& pred_heads,
                   const std::vector<std::vector<int32_t>>& pred_labels);

// ---------------------------------------------------------------------------
// linear-chain CRF with start/stop states at rows/cols K and K+1

// NLL of the gold path: logZ (forward algorithm) minus the gold path score
template <class T>
TensorT<T> crf_nll(const TensorT<T>& emissions, const TensorT<T>& transitions,
                   const std::vector<int32_t>& gold) {
  const int64_t n = emissions.dim(0), k = emissions.dim(1);
  op_check(transitions.rank() == 2 && transitions.dim(0) == k + 2 && transitions.dim(1) == k + 2,
           "crf_nll: transitions must be [K+2, K+2]");
  op_check(static_cast<int64_t>(gold.size()) == n, "crf_nll: gold length mismatch");
  for (int32_t g : gold) op_check(g >= 0 && g < k, "crf_nll: tag id out of range");
  const int64_t start = k, stop = k + 1;

  // gold score: emissions along the path plus transitions including start/stop
  std::vector<int64_t> emit_idx(n);
  for (int64_t t = 0; t < n; ++t) emit_idx[t] = t * k + gold[t];
  std::vector<int64_t> trans_idx;
  trans_idx.push_back(start * (k + 2) + gold[0]);
  for (int64_t t = 1; t < n; ++t) trans_idx.push_back(gold[t - 1] * (k + 2) + gold[t]);
  trans_idx.push_back(gold[n - 1] * (k + 2) + stop);
  auto gold_score = add(gather_sum(emissions, emit_idx), gather_sum(transitions, trans_idx));

  // forward algorithm
  std::vector<int64_t> tag_rows(k);
  for (int64_t i = 0; i < k; ++i) tag_rows[i] = i;
  auto trans_tags = slice_cols(select_rows(transitions, tag_rows), 0, k);  // [K, K]
  auto from_start = slice_cols(select_rows(transitions, {start}), 0, k);   // [1, K]
  auto to_stop = reshape(select_rows(slice_cols(transitions, stop, 1), tag_rows), {1, k});

  auto alpha = add(select_rows(emissions, {0}), from_start);
  for (int64_t t = 1; t < n; ++t) {
    auto scores = add_colvec(trans_tags, reshape(alpha, {k}));  // [i][j]: alpha_i + T[i][j]
    auto lse = reshape(log_sum_exp(transpose2d(scores)), {1, k});
    alpha = add(select_rows(emissions, {t}), lse);
  }
  auto log_z = reshape(log_sum_exp(add(alpha, to_stop)), Shape{});
  return sub(log_z, gold_score);
}

// transition mask derived from the BIOUL grammar over named tags; entry
// [from][to] is 1 when the transition is allowed. START/STOP live at K, K+1.
std::vector<uint8_t> bioul_allowed(const std::vector<std::string>& tag_names);

// Viterbi decode; `allowed` (optional, (K+2)^2) forbids transitions
std::vector<int32_t> crf_viterbi(const std::vector<double>& emissions, int64_t n, int64_t k,
                                 const std::vector<double>& transitions,
                                 const std::vector<uint8_t>* allowed);

// ---------------------------------------------------------------------------
// span F1 over BIOUL tag sequences

struct Span {
  int64_t start = 0;
  int64_t end = 0;  // inclusive
  std::string type;
  bool operator<(const Span& o) const {
    return std::tie(start, end, type) < std::tie(o.start, o.end, o.type);
  }
  bool operator==(const Span& o) const = default;
};

// tolerant extraction: stray I opens like B, stray L closes like U, dangling
// opens are emitted
std::vector<Span> bioul_spans(const std::vector<std::string>& tags);

struct F1Score {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

F1Score span_f1(const std::vector<std::vector<std::string>>& gold,
                const std::vector<std::vector<std::string>>& pred);

// ---------------------------------------------------------------------------
// fine-tuning

struct EvalConfig {
  std::string task;  // "parse" or "ner"
  int64_t epochs = 300;
  int64_t batch_size = 16;
  int patience = 50;
  int64_t batches_per_epoch = 200;  // 0 = one full pass over the data
  float base_lr = 1e-3f;
  float encoder_lr = 5e-5f;
  float clip_norm = 5.0f;

  int64_t lstm_layers = 3;
  int64_t lstm_hidden = 400;
  float lstm_dropout = 0.3f;
  int64_t arc_dim = 100;
  int64_t label_dim = 100;

  bool freeze_encoder = false;
  bool encoder_dropout = true;  // dropout inside the encoder during training
  uint64_t seed = 0;

  static EvalConfig parse_defaults();
  static EvalConfig ner_defaults();
  void validate() const;
};

struct ParserEvalModel {
  EncoderWeightsT<float> encoder;
  ScalarMix mix;
  BiLstm lstm;
  BiaffineHeadT<float> biaffine;
};

struct NerEvalModel {
  EncoderWeightsT<float> encoder;
  ScalarMix mix;
  BiLstm lstm;
  Tensor emit_w, emit_b;  // [2H, K], [K]
  Tensor transitions;     // [K+2, K+2]
  std::vector<std::string> tag_names;
};

struct FinetuneRecord {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double dev_metric = 0.0;
};

struct ParseFinetuneResult {
  ParseScore test;
  double dev_best = 0.0;  // best dev LAS
  int64_t best_epoch = -1;
  int64_t trainable_params = 0;  // as seen by the optimizer
  std::vector<FinetuneRecord> history;
  ParserEvalModel model;  // best-dev parameters
};

struct NerFinetuneResult {
  F1Score test;
  double dev_best = 0.0;  // best dev F1
  int64_t best_epoch = -1;
  int64_t trainable_params = 0;  // as seen by the optimizer
  std::vector<FinetuneRecord> history;
  NerEvalModel model;
};

// init == nullptr trains from randomly initialized encoder weights (baseline);
// otherwise the checkpoint must match the vocabulary
ParseFinetuneResult finetune_parse(const EvalConfig& cfg, const CheckpointData* init,
                                   const EncoderConfig& enc_cfg, const Vocabulary& vocab,
                                   const std::vector<EncodedSentence>& train,
                                   const std::vector<EncodedSentence>& dev,
                                   const std::vector<EncodedSentence>& test, int32_t n_deprels);

NerFinetuneResult finetune_ner(const EvalConfig& cfg, const CheckpointData* init,
                               const EncoderConfig& enc_cfg, const Vocabulary& vocab,
                               const std::vector<EncodedSentence>& train,
                               const std::vector<EncodedSentence>& dev,
                               const std::vector<EncodedSentence>& test,
                               const std::vector<std::string>& tag_names);

// word states for a batch: encoder layers -> scalar mix -> word mean-pooling;
// word_offset/word_count mirror EncoderOutputT
Tensor mixed_word_states(EncoderWeightsT<float>& enc, ScalarMix& mix,
                         const std::vector<const EncodedSentence*>& batch, bool training,
                         uint64_t dropout_seed, std::vector<int64_t>* word_offset,
                         std::vector<int64_t>* word_count);

// decode one sentence's words with the eval parser head over LSTM states
void parse_decode(BiaffineHeadT<float>& head, const Tensor& word_states,
                  std::vector<int32_t>* heads, std::vector<int32_t>* labels);

int64_t count_trainable(const ParamList& params);

}  // namespace microbert
