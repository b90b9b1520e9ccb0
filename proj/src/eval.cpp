#include "microbert/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "microbert/pretrainer.hpp"
#include "microbert/scheduler.hpp"

namespace microbert {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// fixed mask row for variational dropout (inverted scaling, constant in the
// graph); reused at every time step of a direction
Tensor dropout_mask_row(int64_t width, float rate, uint64_t seed) {
  Rng rng(seed);
  const float keep = 1.0f - rate;
  std::vector<float> m(static_cast<size_t>(width));
  for (auto& v : m) v = rng.next_bernoulli(keep) ? 1.0f / keep : 0.0f;
  return Tensor::from({1, width}, std::move(m));
}

}  // namespace

// ---------------------------------------------------------------------------
// BiLSTM

BiLstm BiLstm::init(int64_t in_dim, int64_t hidden, int64_t n_layers, bool highway, float dropout,
                    Rng& rng) {
  op_check(in_dim > 0 && hidden > 0 && n_layers > 0, "bilstm: non-positive dimension");
  op_check(dropout >= 0.0f && dropout < 1.0f, "bilstm: dropout must lie in [0,1)");
  BiLstm l;
  l.in_dim = in_dim;
  l.hidden = hidden;
  l.highway = highway;
  l.dropout = dropout;
  const float bound = 1.0f / std::sqrt(static_cast<float>(hidden));
  auto dir = [&](int64_t in) {
    LstmDirW<float> w;
    w.w_ih = Tensor::rand_uniform({in, 4 * hidden}, rng, -bound, bound, true);
    w.w_hh = Tensor::rand_uniform({hidden, 4 * hidden}, rng, -bound, bound, true);
    w.b = Tensor::zeros({4 * hidden}, true);
    // forget-gate bias starts at 1 so early training keeps cell state
    std::fill(w.b.data().begin() + hidden, w.b.data().begin() + 2 * hidden, 1.0f);
    return w;
  };
  for (int64_t i = 0; i < n_layers; ++i) {
    const int64_t in = i == 0 ? in_dim : 2 * hidden;
    BiLstmLayer layer;
    layer.fwd = dir(in);
    layer.bwd = dir(in);
    if (highway) {
      const float hb = 1.0f / std::sqrt(static_cast<float>(in));
      layer.hw_proj = Tensor::rand_uniform({in, 2 * hidden}, rng, -hb, hb, true);
      layer.hw_gate_w = Tensor::rand_uniform({in, 2 * hidden}, rng, -hb, hb, true);
      layer.hw_gate_b = Tensor::zeros({2 * hidden}, true);
    }
    l.layers.push_back(std::move(layer));
  }
  return l;
}

std::vector<NamedTensor<float>> BiLstm::named_tensors(const std::string& prefix) {
  std::vector<NamedTensor<float>> out;
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string p = prefix + "lstm" + std::to_string(i) + "/";
    auto add_dir = [&](const std::string& d, LstmDirW<float>& w) {
      out.push_back({p + d + "/w_ih", &w.w_ih, false});
      out.push_back({p + d + "/w_hh", &w.w_hh, false});
      out.push_back({p + d + "/b", &w.b, true});
    };
    add_dir("fwd", layers[i].fwd);
    add_dir("bwd", layers[i].bwd);
    if (highway) {
      out.push_back({p + "hw/proj", &layers[i].hw_proj, false});
      out.push_back({p + "hw/gate_w", &layers[i].hw_gate_w, false});
      out.push_back({p + "hw/gate_b", &layers[i].hw_gate_b, true});
    }
  }
  return out;
}

Tensor bilstm_forward(BiLstm& lstm, const Tensor& x, bool training, uint64_t seed) {
  op_check(x.rank() == 2 && x.dim(1) == lstm.in_dim, "bilstm: input must be [n, in_dim]");
  const int64_t n = x.dim(0);
  Tensor cur = x;
  for (size_t l = 0; l < lstm.layers.size(); ++l) {
    auto& layer = lstm.layers[l];
    const int64_t in = cur.dim(1);
    const bool dropped = training && lstm.dropout > 0.0f;
    Tensor im_f, rm_f, im_b, rm_b;
    if (dropped) {
      im_f = dropout_mask_row(in, lstm.dropout, Rng::mix(seed, l, 0, 1));
      rm_f = dropout_mask_row(lstm.hidden, lstm.dropout, Rng::mix(seed, l, 0, 2));
      im_b = dropout_mask_row(in, lstm.dropout, Rng::mix(seed, l, 1, 1));
      rm_b = dropout_mask_row(lstm.hidden, lstm.dropout, Rng::mix(seed, l, 1, 2));
    }
    auto f = lstm_direction(layer.fwd, cur, false, dropped ? &im_f : nullptr,
                            dropped ? &rm_f : nullptr);
    auto b = lstm_direction(layer.bwd, cur, true, dropped ? &im_b : nullptr,
                            dropped ? &rm_b : nullptr);
    auto y = concat_cols<float>({f, b});
    if (lstm.highway) {
      auto gate = sigmoid(add_bias(matmul(cur, layer.hw_gate_w), layer.hw_gate_b));
      auto proj = matmul(cur, layer.hw_proj);
      auto ones = Tensor::filled({n, 2 * lstm.hidden}, 1.0f);
      y = add(mul(gate, y), mul(sub(ones, gate), proj));
    }
    cur = y;
  }
  return cur;
}

// ---------------------------------------------------------------------------
// MST decoding

namespace {

// maximum arborescence rooted at node 0 (Chu-Liu/Edmonds); s[d][h] is the
// score of arc h -> d, kNegInf = forbidden
std::vector<int> cle_heads(const std::vector<std::vector<double>>& s) {
  const int n = static_cast<int>(s.size());
  std::vector<int> best(n, -1);
  for (int d = 1; d < n; ++d) {
    double bs = kNegInf;
    for (int h = 0; h < n; ++h)
      if (h != d && s[d][h] > bs) {
        bs = s[d][h];
        best[d] = h;
      }
    op_check(best[d] >= 0, "decode_mst: node without candidate head");
  }

  // cycle in the greedy best-head graph?
  std::vector<int> state(n, 0);  // 0 unseen, 1 on current path, 2 settled
  state[0] = 2;
  std::vector<int> cyc;
  for (int v = 1; v < n && cyc.empty(); ++v) {
    if (state[v]) continue;
    std::vector<int> path;
    int u = v;
    while (state[u] == 0) {
      state[u] = 1;
      path.push_back(u);
      u = best[u];
    }
    if (state[u] == 1) cyc.assign(std::find(path.begin(), path.end(), u), path.end());
    for (int w : path) state[w] = 2;
  }
  if (cyc.empty()) return best;

  // contract the cycle into its first node and solve the smaller problem; the
  // constant cycle weight is shared by every entering arc, so it can be
  // dropped without changing the argmax
  std::vector<char> in_cyc(n, 0);
  for (int v : cyc) in_cyc[v] = 1;
  const int c = cyc[0];
  std::vector<int> keep;
  for (int v = 0; v < n; ++v)
    if (!in_cyc[v] || v == c) keep.push_back(v);
  const int m = static_cast<int>(keep.size());
  std::vector<int> newid(n, -1);
  for (int i = 0; i < m; ++i) newid[keep[i]] = i;
  const int cn = newid[c];

  std::vector<std::vector<double>> s2(m, std::vector<double>(m, kNegInf));
  std::vector<int> ent_v(m, -1);  // cycle node entered when the contracted node's head is h
  std::vector<int> out_v(m, -1);  // cycle node used as head when d attaches to the contracted node
  for (int d = 0; d < n; ++d) {
    if (in_cyc[d]) continue;
    for (int h = 0; h < n; ++h) {
      if (h == d || s[d][h] == kNegInf) continue;
      if (!in_cyc[h]) {
        s2[newid[d]][newid[h]] = s[d][h];
      } else if (s[d][h] > s2[newid[d]][cn]) {
        s2[newid[d]][cn] = s[d][h];
        out_v[newid[d]] = h;
      }
    }
  }
  for (int h = 0; h < n; ++h) {
    if (in_cyc[h]) continue;
    for (int v : cyc) {
      if (s[v][h] == kNegInf) continue;
      const double gain = s[v][h] - s[v][best[v]];  // swap v's in-cycle arc for h -> v
      if (gain > s2[cn][newid[h]]) {
        s2[cn][newid[h]] = gain;
        ent_v[newid[h]] = v;
      }
    }
  }

  const auto sub = cle_heads(s2);
  std::vector<int> heads(n, -1);
  for (int d2 = 1; d2 < m; ++d2) {
    const int h2 = sub[d2];
    if (d2 == cn) {
      const int vstar = ent_v[h2];  // the external arc breaks the cycle here
      heads[vstar] = keep[h2];
      for (int v : cyc)
        if (v != vstar) heads[v] = best[v];
    } else {
      heads[keep[d2]] = h2 == cn ? out_v[d2] : keep[h2];
    }
  }
  return heads;
}

}  // namespace

std::vector<int32_t> decode_mst(const std::vector<double>& scores, int64_t n) {
  op_check(n >= 1, "decode_mst: empty sentence");
  op_check(static_cast<int64_t>(scores.size()) == (n + 1) * (n + 1),
           "decode_mst: scores must be (n+1) x (n+1)");
  for (double v : scores) op_check(std::isfinite(v), "decode_mst: non-finite score");
  const int nn = static_cast<int>(n);
  const auto at = [&](int d, int h) { return scores[static_cast<size_t>(d) * (n + 1) + h]; };

  // exactly one ROOT attachment: try each word as the root child and keep the
  // best arborescence
  double best_total = kNegInf;
  std::vector<int> best_heads;
  for (int r = 1; r <= nn; ++r) {
    std::vector<std::vector<double>> s(n + 1, std::vector<double>(n + 1, kNegInf));
    for (int d = 1; d <= nn; ++d)
      for (int h = 0; h <= nn; ++h) {
        if (h == d || (h == 0 && d != r)) continue;
        s[d][h] = at(d, h);
      }
    auto heads = cle_heads(s);
    double total = 0.0;
    for (int d = 1; d <= nn; ++d) total += at(d, heads[d]);
    if (total > best_total) {
      best_total = total;
      best_heads = std::move(heads);
    }
  }
  std::vector<int32_t> out(nn);
  for (int d = 1; d <= nn; ++d) out[d - 1] = static_cast<int32_t>(best_heads[d]);
  return out;
}

ParseScore las_uas(const std::vector<std::vector<int32_t>>& gold_heads,
                   const std::vector<std::vector<int32_t>>& gold_labels,
                   const std::vector<std::vector<int32_t>>& pred_heads,
                   const std::vector<std::vector<int32_t>>& pred_labels) {
  op_check(gold_heads.size() == pred_heads.size() && gold_heads.size() == gold_labels.size() &&
               gold_heads.size() == pred_labels.size(),
           "las_uas: sentence count mismatch");
  int64_t total = 0, head_ok = 0, both_ok = 0;
  for (size_t i = 0; i < gold_heads.size(); ++i) {
    const auto& gh = gold_heads[i];
    op_check(gh.size() == pred_heads[i].size() && gh.size() == gold_labels[i].size() &&
                 gh.size() == pred_labels[i].size(),
             "las_uas: sentence length mismatch");
    for (size_t j = 0; j < gh.size(); ++j) {
      ++total;
      if (gh[j] != pred_heads[i][j]) continue;
      ++head_ok;
      if (gold_labels[i][j] == pred_labels[i][j]) ++both_ok;
    }
  }
  op_check(total > 0, "las_uas: no words");
  return {100.0 * static_cast<double>(head_ok) / static_cast<double>(total),
          100.0 * static_cast<double>(both_ok) / static_cast<double>(total)};
}

// ---------------------------------------------------------------------------
// CRF decode and BIOUL handling

namespace {

struct TagParts {
  char kind;  // 'O', 'B', 'I', 'L', 'U'
  std::string type;
};

TagParts parse_tag(const std::string& name) {
  if (name == "O") return {'O', ""};
  op_check(name.size() >= 3 && name[1] == '-' &&
               (name[0] == 'B' || name[0] == 'I' || name[0] == 'L' || name[0] == 'U'),
           "bioul: malformed tag '" + name + "'");
  return {name[0], name.substr(2)};
}

}  // namespace

std::vector<uint8_t> bioul_allowed(const std::vector<std::string>& tag_names) {
  const int64_t k = static_cast<int64_t>(tag_names.size());
  op_check(k > 0, "bioul_allowed: empty tag inventory");
  std::vector<TagParts> parts;
  parts.reserve(tag_names.size());
  for (const auto& t : tag_names) parts.push_back(parse_tag(t));
  const int64_t start = k, stop = k + 1, dim = k + 2;
  std::vector<uint8_t> ok(static_cast<size_t>(dim * dim), 0);
  // a span is "open" after B-t or I-t and must continue with I-t or L-t;
  // anywhere else O, B-*, or U-* may begin
  const auto begins = [&](int64_t to) {
    return parts[to].kind == 'O' || parts[to].kind == 'B' || parts[to].kind == 'U';
  };
  for (int64_t f = 0; f < k; ++f) {
    const bool open = parts[f].kind == 'B' || parts[f].kind == 'I';
    for (int64_t t = 0; t < k; ++t) {
      const bool allowed = open ? (parts[t].kind == 'I' || parts[t].kind == 'L') &&
                                      parts[t].type == parts[f].type
                                : begins(t);
      if (allowed) ok[f * dim + t] = 1;
    }
    if (!open) ok[f * dim + stop] = 1;
  }
  for (int64_t t = 0; t < k; ++t)
    if (begins(t)) ok[start * dim + t] = 1;
  return ok;
}

std::vector<int32_t> crf_viterbi(const std::vector<double>& emissions, int64_t n, int64_t k,
                                 const std::vector<double>& transitions,
                                 const std::vector<uint8_t>* allowed) {
  op_check(n >= 1 && k >= 1, "crf_viterbi: empty input");
  op_check(static_cast<int64_t>(emissions.size()) == n * k, "crf_viterbi: emissions size");
  const int64_t dim = k + 2, start = k, stop = k + 1;
  op_check(static_cast<int64_t>(transitions.size()) == dim * dim, "crf_viterbi: transitions size");
  if (allowed)
    op_check(static_cast<int64_t>(allowed->size()) == dim * dim, "crf_viterbi: mask size");
  const auto tr = [&](int64_t f, int64_t t) {
    return allowed && !(*allowed)[f * dim + t] ? kNegInf : transitions[f * dim + t];
  };

  std::vector<double> score(k);
  std::vector<std::vector<int32_t>> back(n, std::vector<int32_t>(k, -1));
  for (int64_t j = 0; j < k; ++j) score[j] = emissions[j] + tr(start, j);
  for (int64_t t = 1; t < n; ++t) {
    std::vector<double> next(k, kNegInf);
    for (int64_t j = 0; j < k; ++j) {
      for (int64_t i = 0; i < k; ++i) {
        const double v = score[i] + tr(i, j);
        if (v > next[j]) {
          next[j] = v;
          back[t][j] = static_cast<int32_t>(i);
        }
      }
      next[j] += emissions[t * k + j];
    }
    score = std::move(next);
  }
  int32_t best = -1;
  double bs = kNegInf;
  for (int64_t j = 0; j < k; ++j) {
    const double v = score[j] + tr(j, stop);
    if (v > bs) {
      bs = v;
      best = static_cast<int32_t>(j);
    }
  }
  op_check(best >= 0, "crf_viterbi: no valid path");
  std::vector<int32_t> path(n);
  path[n - 1] = best;
  for (int64_t t = n - 1; t > 0; --t) path[t - 1] = back[t][path[t]];
  return path;
}

// Tolerant scan: a stray I-t opens a span like B-t, a stray L-t closes like
// U-t, a type switch or fresh begin closes the previous span where it stands,
// and a span still open at the end is emitted. Gold sequences are valid BIOUL
// and never trigger the repairs.
std::vector<Span> bioul_spans(const std::vector<std::string>& tags) {
  std::vector<Span> spans;
  bool open = false;
  int64_t start = 0;
  std::string type;
  const auto close = [&](int64_t end) {
    spans.push_back({start, end, type});
    open = false;
  };
  for (int64_t i = 0; i < static_cast<int64_t>(tags.size()); ++i) {
    const auto tp = parse_tag(tags[i]);
    switch (tp.kind) {
      case 'O':
        if (open) close(i - 1);
        break;
      case 'B':
        if (open) close(i - 1);
        open = true;
        type = tp.type;
        start = i;
        break;
      case 'U':
        if (open) close(i - 1);
        spans.push_back({i, i, tp.type});
        break;
      case 'I':
        if (!open) {
          open = true;
          type = tp.type;
          start = i;
        } else if (type != tp.type) {
          close(i - 1);
          open = true;
          type = tp.type;
          start = i;
        }
        break;
      case 'L':
        if (open && type == tp.type) {
          close(i);
        } else {
          if (open) close(i - 1);
          spans.push_back({i, i, tp.type});
        }
        break;
      default:
        break;
    }
  }
  if (open) close(static_cast<int64_t>(tags.size()) - 1);
  return spans;
}

F1Score span_f1(const std::vector<std::vector<std::string>>& gold,
                const std::vector<std::vector<std::string>>& pred) {
  op_check(gold.size() == pred.size(), "span_f1: sentence count mismatch");
  int64_t n_gold = 0, n_pred = 0, n_hit = 0;
  for (size_t i = 0; i < gold.size(); ++i) {
    op_check(gold[i].size() == pred[i].size(), "span_f1: sentence length mismatch");
    auto g = bioul_spans(gold[i]);
    auto p = bioul_spans(pred[i]);
    std::set<Span> gset(g.begin(), g.end());
    n_gold += static_cast<int64_t>(g.size());
    n_pred += static_cast<int64_t>(p.size());
    for (const auto& s : p) n_hit += static_cast<int64_t>(gset.count(s));
  }
  F1Score f;
  f.precision = n_pred > 0 ? 100.0 * static_cast<double>(n_hit) / static_cast<double>(n_pred) : 0.0;
  f.recall = n_gold > 0 ? 100.0 * static_cast<double>(n_hit) / static_cast<double>(n_gold) : 0.0;
  f.f1 = f.precision + f.recall > 0.0 ? 2.0 * f.precision * f.recall / (f.precision + f.recall)
                                      : 0.0;
  return f;
}

// ---------------------------------------------------------------------------
// fine-tuning

EvalConfig EvalConfig::parse_defaults() {
  EvalConfig c;
  c.task = "parse";
  c.encoder_lr = 5e-5f;
  c.batches_per_epoch = 200;
  c.lstm_layers = 3;
  c.lstm_hidden = 400;
  c.lstm_dropout = 0.3f;
  return c;
}

EvalConfig EvalConfig::ner_defaults() {
  EvalConfig c;
  c.task = "ner";
  c.encoder_lr = 1e-5f;
  c.batches_per_epoch = 0;  // one full pass per epoch
  c.lstm_layers = 2;
  c.lstm_hidden = 200;
  c.lstm_dropout = 0.5f;
  return c;
}

void EvalConfig::validate() const {
  op_check(task == "parse" || task == "ner", "eval config: task must be parse or ner");
  op_check(epochs > 0 && batch_size > 0 && patience > 0,
           "eval config: non-positive training knob");
  op_check(batches_per_epoch >= 0, "eval config: negative batches per epoch");
  op_check(base_lr > 0.0f && encoder_lr > 0.0f, "eval config: learning rates must be positive");
  op_check(clip_norm >= 0.0f, "eval config: negative clip norm");
  op_check(lstm_layers > 0 && lstm_hidden > 0, "eval config: non-positive LSTM dimension");
  op_check(lstm_dropout >= 0.0f && lstm_dropout < 1.0f, "eval config: dropout must lie in [0,1)");
  op_check(arc_dim > 0 && label_dim > 0, "eval config: non-positive parser dimension");
}

Tensor mixed_word_states(EncoderWeightsT<float>& enc, ScalarMix& mix,
                         const std::vector<const EncodedSentence*>& batch, bool training,
                         uint64_t dropout_seed, std::vector<int64_t>* word_offset,
                         std::vector<int64_t>* word_count) {
  ForwardOptions<float> opts;
  opts.training = training;
  opts.dropout_seed = dropout_seed;
  auto out = encoder_forward(enc, batch, opts);
  auto mixed = scalar_mix(out.layer_states, mix.weights, mix.gamma);  // [B, Tmax, H]
  const int64_t tmax = out.last().dim(1);
  std::vector<std::pair<int64_t, int64_t>> segments;
  for (size_t b = 0; b < batch.size(); ++b)
    for (auto [begin, len] : batch[b]->word_pieces)
      segments.emplace_back(static_cast<int64_t>(b) * tmax + begin, len);
  if (word_offset) *word_offset = out.word_offset;
  if (word_count) *word_count = out.word_count;
  return segment_mean(mixed, segments);
}

void parse_decode(BiaffineHeadT<float>& head, const Tensor& word_states,
                  std::vector<int32_t>* heads, std::vector<int32_t>* labels) {
  NoGradGuard guard;
  const int64_t n = word_states.dim(0);
  auto sc = biaffine_scores(head, word_states);
  const auto& arc = sc.arc.data();
  std::vector<double> scores(arc.begin(), arc.end());
  *heads = decode_mst(scores, n);

  std::vector<std::pair<int64_t, int64_t>> pairs(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) pairs[i] = {i + 1, (*heads)[i]};
  auto lab = biaffine_label_scores(head, sc, pairs);
  const auto& ld = lab.data();
  labels->assign(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;
    for (int64_t l = 1; l < head.n_labels; ++l)
      if (ld[i * head.n_labels + l] > ld[i * head.n_labels + best]) best = l;
    (*labels)[i] = static_cast<int32_t>(best);
  }
}

int64_t count_trainable(const ParamList& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

namespace {

// deep copy of the trainable tensors, for best-dev model selection
struct Snapshot {
  std::vector<std::vector<float>> data;
  void capture(const ParamList& params) {
    data.clear();
    data.reserve(params.size());
    for (const auto& p : params) data.push_back(p.tensor.data());
  }
  void restore(ParamList& params) const {
    for (size_t i = 0; i < params.size(); ++i)
      std::copy(data[i].begin(), data[i].end(), params[i].tensor.data().begin());
  }
};

// batches for one epoch: a scheduler epoch over the single training set, or
// one shuffled full pass when batches_per_epoch is 0
std::vector<std::vector<int64_t>> epoch_batches(const EvalConfig& cfg, int64_t n_train,
                                                int64_t epoch) {
  std::vector<std::vector<int64_t>> batches;
  if (cfg.batches_per_epoch > 0) {
    auto plan = TrainPlan::make({cfg.task}, {n_train}, {1}, cfg.batches_per_epoch,
                                cfg.batch_size, Rng::mix(cfg.seed, 0xba7c));
    auto schedule = build_epoch(plan, epoch);
    for (auto& b : schedule.batches) batches.push_back(std::move(b.instances));
  } else {
    std::vector<int64_t> order(static_cast<size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::mix(cfg.seed, 0xda7a, static_cast<uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());
    for (int64_t i = 0; i < n_train; i += cfg.batch_size) {
      const int64_t e = std::min(n_train, i + cfg.batch_size);
      batches.emplace_back(order.begin() + i, order.begin() + e);
    }
  }
  return batches;
}

// encoder from a checkpoint (vocabulary must match) or freshly initialized
EncoderWeightsT<float> encoder_for_finetune(const CheckpointData* init, EncoderConfig* ec,
                                            const Vocabulary& vocab, Rng& rng) {
  if (init) {
    op_check(init->vocab_text == vocab_as_text(vocab),
             "finetune: checkpoint vocabulary does not match the tokenizer");
    *ec = init->config;
    auto enc = EncoderWeightsT<float>::init(*ec, rng);
    for (auto nt : enc.named_tensors()) {
      auto it = init->tensors.find(nt.name);
      op_check(it != init->tensors.end(), "finetune: checkpoint missing tensor '" + nt.name + "'");
      op_check(it->second.shape() == nt.tensor->shape(),
               "finetune: checkpoint shape mismatch for '" + nt.name + "'");
      std::copy(it->second.data().begin(), it->second.data().end(), nt.tensor->data().begin());
    }
    return enc;
  }
  op_check(ec->vocab_size == static_cast<int64_t>(vocab.pieces().size()),
           "finetune: encoder config vocabulary size does not match the tokenizer");
  return EncoderWeightsT<float>::init(*ec, rng);
}

void push_params(ParamList* params, std::vector<NamedTensor<float>> named) {
  for (auto& nt : named) params->push_back({nt.name, *nt.tensor, nt.no_decay, 1.0f});
}

void step_or_throw(AdamW& opt, Tensor& loss, float clip_norm, const std::string& where) {
  if (!std::isfinite(loss.item()))
    throw std::runtime_error("finetune: non-finite loss at " + where);
  opt.zero_grad();
  backward(loss);
  if (clip_norm > 0.0f) clip_gradients(opt.params(), clip_norm);
  if (!opt.step()) throw std::runtime_error("finetune: non-finite gradient at " + where);
}

}  // namespace

ParseFinetuneResult finetune_parse(const EvalConfig& cfg, const CheckpointData* init,
                                   const EncoderConfig& enc_cfg, const Vocabulary& vocab,
                                   const std::vector<EncodedSentence>& train,
                                   const std::vector<EncodedSentence>& dev,
                                   const std::vector<EncodedSentence>& test, int32_t n_deprels) {
  cfg.validate();
  op_check(cfg.task == "parse", "finetune_parse: config task must be parse");
  op_check(n_deprels > 0, "finetune_parse: no dependency labels");
  op_check(!train.empty() && !dev.empty() && !test.empty(), "finetune: empty split");
  for (const auto* split : {&train, &dev, &test})
    for (const auto& s : *split)
      op_check(s.has_parse(), "finetune_parse: sentence without parse annotations");

  Rng rng(Rng::mix(cfg.seed, 0xf17e));
  EncoderConfig ec = enc_cfg;
  ParseFinetuneResult res;
  auto& model = res.model;
  // the model's only sentence-derived input is the encoder states: words enter
  // through piece ids alone, never through auxiliary annotation features
  model.encoder = encoder_for_finetune(init, &ec, vocab, rng);
  model.mix = ScalarMix::init(ec.layers + 1);
  model.lstm =
      BiLstm::init(ec.hidden, cfg.lstm_hidden, cfg.lstm_layers, true, cfg.lstm_dropout, rng);
  model.biaffine = BiaffineHeadT<float>::init(2 * cfg.lstm_hidden, cfg.arc_dim, cfg.label_dim,
                                              n_deprels, rng);

  ParamList params;
  if (!cfg.freeze_encoder)
    for (auto& p : encoder_params(model.encoder, cfg.encoder_lr / cfg.base_lr))
      params.push_back(p);
  push_params(&params, model.mix.named_tensors("eval/"));
  push_params(&params, model.lstm.named_tensors("eval/"));
  push_params(&params, model.biaffine.named_tensors("eval/parse/"));
  res.trainable_params = count_trainable(params);
  AdamW opt(params, {cfg.base_lr, 0.9f, 0.999f, 1e-8f, 0.0f});

  const auto score_split = [&](const std::vector<EncodedSentence>& split) {
    NoGradGuard guard;
    std::vector<std::vector<int32_t>> gh, gl, ph, pl;
    for (size_t i = 0; i < split.size(); i += static_cast<size_t>(cfg.batch_size)) {
      std::vector<const EncodedSentence*> batch;
      for (size_t j = i; j < std::min(split.size(), i + static_cast<size_t>(cfg.batch_size)); ++j)
        batch.push_back(&split[j]);
      std::vector<int64_t> offs, cnts;
      auto mixed = mixed_word_states(model.encoder, model.mix, batch, false, 0, &offs, &cnts);
      for (size_t si = 0; si < batch.size(); ++si) {
        std::vector<int64_t> rows(static_cast<size_t>(cnts[si]));
        std::iota(rows.begin(), rows.end(), offs[si]);
        auto y = bilstm_forward(model.lstm, select_rows(mixed, rows), false, 0);
        std::vector<int32_t> heads, labels;
        parse_decode(model.biaffine, y, &heads, &labels);
        gh.push_back(batch[si]->heads);
        gl.push_back(batch[si]->deprels);
        ph.push_back(std::move(heads));
        pl.push_back(std::move(labels));
      }
    }
    return las_uas(gh, gl, ph, pl);
  };

  Snapshot best;
  best.capture(params);
  int since = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    int64_t n_batches = 0;
    for (auto& ids : epoch_batches(cfg, static_cast<int64_t>(train.size()), epoch)) {
      std::vector<const EncodedSentence*> batch;
      for (auto id : ids) batch.push_back(&train[id]);
      std::vector<int64_t> offs, cnts;
      auto mixed = mixed_word_states(model.encoder, model.mix, batch, cfg.encoder_dropout,
                                     Rng::mix(cfg.seed, 0xd0, epoch, n_batches), &offs, &cnts);
      Tensor total;
      int64_t words = 0;
      for (size_t si = 0; si < batch.size(); ++si) {
        std::vector<int64_t> rows(static_cast<size_t>(cnts[si]));
        std::iota(rows.begin(), rows.end(), offs[si]);
        auto y = bilstm_forward(model.lstm, select_rows(mixed, rows), true,
                                Rng::mix(cfg.seed, 0x15, epoch, n_batches) + si);
        auto sent = parse_sentence_loss(model.biaffine, y, *batch[si]);
        total = total.defined() ? add(total, sent) : sent;
        words += cnts[si];
      }
      auto loss = scale(total, 1.0f / static_cast<float>(words));
      step_or_throw(opt, loss, cfg.clip_norm,
                    "epoch " + std::to_string(epoch) + ", batch " + std::to_string(n_batches));
      loss_sum += loss.item();
      ++n_batches;
    }
    const double dev_las = score_split(dev).las;
    res.history.push_back({epoch, loss_sum / static_cast<double>(n_batches), dev_las});
    if (res.best_epoch < 0 || dev_las > res.dev_best) {
      res.dev_best = dev_las;
      res.best_epoch = epoch;
      best.capture(params);
      since = 0;
    } else if (++since >= cfg.patience) {
      break;
    }
  }
  best.restore(params);
  res.test = score_split(test);
  return res;
}

NerFinetuneResult finetune_ner(const EvalConfig& cfg, const CheckpointData* init,
                               const EncoderConfig& enc_cfg, const Vocabulary& vocab,
                               const std::vector<EncodedSentence>& train,
                               const std::vector<EncodedSentence>& dev,
                               const std::vector<EncodedSentence>& test,
                               const std::vector<std::string>& tag_names) {
  cfg.validate();
  op_check(cfg.task == "ner", "finetune_ner: config task must be ner");
  const int64_t k = static_cast<int64_t>(tag_names.size());
  const auto allowed = bioul_allowed(tag_names);  // also validates the inventory
  op_check(!train.empty() && !dev.empty() && !test.empty(), "finetune: empty split");
  for (const auto* split : {&train, &dev, &test})
    for (const auto& s : *split) {
      op_check(s.has_ner(), "finetune_ner: sentence without NER annotations");
      op_check(static_cast<int64_t>(s.ner.size()) == s.word_count(),
               "finetune_ner: tag count mismatch");
      for (int32_t t : s.ner)
        op_check(t >= 0 && t < k, "finetune_ner: tag id out of range");
    }

  Rng rng(Rng::mix(cfg.seed, 0xf17e));
  EncoderConfig ec = enc_cfg;
  NerFinetuneResult res;
  auto& model = res.model;
  // as with parsing, encoder states are the model's only sentence input
  model.encoder = encoder_for_finetune(init, &ec, vocab, rng);
  model.mix = ScalarMix::init(ec.layers + 1);
  model.lstm =
      BiLstm::init(ec.hidden, cfg.lstm_hidden, cfg.lstm_layers, false, cfg.lstm_dropout, rng);
  model.emit_w = Tensor::randn({2 * cfg.lstm_hidden, k}, rng, 0.02f, true);
  model.emit_b = Tensor::zeros({k}, true);
  model.transitions = Tensor::randn({k + 2, k + 2}, rng, 0.02f, true);
  model.tag_names = tag_names;

  ParamList params;
  if (!cfg.freeze_encoder)
    for (auto& p : encoder_params(model.encoder, cfg.encoder_lr / cfg.base_lr))
      params.push_back(p);
  push_params(&params, model.mix.named_tensors("eval/"));
  push_params(&params, model.lstm.named_tensors("eval/"));
  params.push_back({"eval/ner/emit_w", model.emit_w, false, 1.0f});
  params.push_back({"eval/ner/emit_b", model.emit_b, true, 1.0f});
  params.push_back({"eval/ner/transitions", model.transitions, false, 1.0f});
  res.trainable_params = count_trainable(params);
  AdamW opt(params, {cfg.base_lr, 0.9f, 0.999f, 1e-8f, 0.0f});

  const auto tags_of = [&](const std::vector<int32_t>& ids) {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int32_t id : ids) out.push_back(tag_names[id]);
    return out;
  };

  const auto score_split = [&](const std::vector<EncodedSentence>& split) {
    NoGradGuard guard;
    std::vector<std::vector<std::string>> gold, pred;
    for (size_t i = 0; i < split.size(); i += static_cast<size_t>(cfg.batch_size)) {
      std::vector<const EncodedSentence*> batch;
      for (size_t j = i; j < std::min(split.size(), i + static_cast<size_t>(cfg.batch_size)); ++j)
        batch.push_back(&split[j]);
      std::vector<int64_t> offs, cnts;
      auto mixed = mixed_word_states(model.encoder, model.mix, batch, false, 0, &offs, &cnts);
      for (size_t si = 0; si < batch.size(); ++si) {
        std::vector<int64_t> rows(static_cast<size_t>(cnts[si]));
        std::iota(rows.begin(), rows.end(), offs[si]);
        auto y = bilstm_forward(model.lstm, select_rows(mixed, rows), false, 0);
        auto em = add_bias(matmul(y, model.emit_w), model.emit_b);
        std::vector<double> ed(em.data().begin(), em.data().end());
        std::vector<double> td(model.transitions.data().begin(), model.transitions.data().end());
        auto path = crf_viterbi(ed, cnts[si], k, td, &allowed);
        gold.push_back(tags_of(batch[si]->ner));
        pred.push_back(tags_of(path));
      }
    }
    return span_f1(gold, pred);
  };

  Snapshot best;
  best.capture(params);
  int since = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    int64_t n_batches = 0;
    for (auto& ids : epoch_batches(cfg, static_cast<int64_t>(train.size()), epoch)) {
      std::vector<const EncodedSentence*> batch;
      for (auto id : ids) batch.push_back(&train[id]);
      std::vector<int64_t> offs, cnts;
      auto mixed = mixed_word_states(model.encoder, model.mix, batch, cfg.encoder_dropout,
                                     Rng::mix(cfg.seed, 0xd0, epoch, n_batches), &offs, &cnts);
      Tensor total;
      int64_t words = 0;
      for (size_t si = 0; si < batch.size(); ++si) {
        std::vector<int64_t> rows(static_cast<size_t>(cnts[si]));
        std::iota(rows.begin(), rows.end(), offs[si]);
        auto y = bilstm_forward(model.lstm, select_rows(mixed, rows), true,
                                Rng::mix(cfg.seed, 0x15, epoch, n_batches) + si);
        auto em = add_bias(matmul(y, model.emit_w), model.emit_b);
        auto sent = crf_nll(em, model.transitions, batch[si]->ner);
        total = total.defined() ? add(total, sent) : sent;
        words += cnts[si];
      }
      auto loss = scale(total, 1.0f / static_cast<float>(words));
      step_or_throw(opt, loss, cfg.clip_norm,
                    "epoch " + std::to_string(epoch) + ", batch " + std::to_string(n_batches));
      loss_sum += loss.item();
      ++n_batches;
    }
    const double dev_f1 = score_split(dev).f1;
    res.history.push_back({epoch, loss_sum / static_cast<double>(n_batches), dev_f1});
    if (res.best_epoch < 0 || dev_f1 > res.dev_best) {
      res.dev_best = dev_f1;
      res.best_epoch = epoch;
      best.capture(params);
      since = 0;
    } else if (++since >= cfg.patience) {
      break;
    }
  }
  best.restore(params);
  res.test = score_split(test);
  return res;
}

}  // namespace microbert
