#include <cmath>
#include <set>

#include "doctest.h"
#include "grad_suite.hpp"
#include "microbert/encoder.hpp"
#include "microbert/heads.hpp"
#include "microbert/rng.hpp"
#include "microbert/tokenizer.hpp"

using namespace microbert;

namespace {

// sentence with synthetic segmentation: piece_lens[i] pieces for word i
EncodedSentence fake_sentence(const std::vector<int32_t>& piece_lens, int32_t vocab_size,
                              uint64_t seed) {
  EncodedSentence s;
  Rng rng(seed);
  s.piece_ids.push_back(kClsId);
  for (size_t w = 0; w < piece_lens.size(); ++w) {
    s.words.push_back("w" + std::to_string(w));
    s.norm_words = s.words;
    s.word_pieces.emplace_back(static_cast<int32_t>(s.piece_ids.size()), piece_lens[w]);
    for (int32_t p = 0; p < piece_lens[w]; ++p)
      s.piece_ids.push_back(static_cast<int32_t>(
          kNumSpecials + rng.next_below(static_cast<uint64_t>(vocab_size) - kNumSpecials)));
  }
  s.piece_ids.push_back(kSepId);
  return s;
}

template <class T>
EncoderOutputT<T> fake_output(const TensorT<T>& last_states, const TensorT<T>& pooled,
                              std::vector<int64_t> word_counts) {
  EncoderOutputT<T> out;
  out.layer_states = {last_states};
  out.pooled = pooled;
  int64_t off = 0;
  for (int64_t c : word_counts) {
    out.word_offset.push_back(off);
    out.word_count.push_back(c);
    off += c;
  }
  return out;
}

void zero_all(std::vector<NamedTensor<float>> named) {
  for (auto& nt : named) std::fill(nt.tensor->data().begin(), nt.tensor->data().end(), 0.0f);
}

}  // namespace

TEST_CASE("mask plan: at-least-one rule, determinism, action application") {
  auto s = fake_sentence({1, 3, 2}, 50, 7);

  // rate 0 forces the fallback; a single-word sentence must pick that word
  auto single = fake_sentence({2}, 50, 8);
  auto p0 = make_mask_plan(single, 0.0, 123);
  REQUIRE(p0.selections.size() == 1);
  CHECK(p0.selections[0].first == 0);

  auto a = make_mask_plan(s, 0.4, 99);
  auto b = make_mask_plan(s, 0.4, 99);
  REQUIRE(a.selections.size() == b.selections.size());
  for (size_t i = 0; i < a.selections.size(); ++i) {
    CHECK(a.selections[i].first == b.selections[i].first);
    CHECK(a.selections[i].second == b.selections[i].second);
  }

  // a MASK action covers every piece of the word
  MaskPlan plan;
  plan.seed = 5;
  plan.selections = {{1, MaskPlan::Action::kMask}};
  std::vector<std::pair<int64_t, int32_t>> targets;
  auto ids = apply_mask_plan(s, plan, 50, &targets);
  auto [begin, len] = s.word_pieces[1];
  REQUIRE(len == 3);
  REQUIRE(targets.size() == 3);
  for (int32_t p = begin; p < begin + len; ++p) {
    CHECK(ids[p] == kMaskId);
    CHECK(targets[p - begin].first == p);
    CHECK(targets[p - begin].second == s.piece_ids[p]);
  }
  // everything outside the selected word is untouched
  for (size_t p = 0; p < ids.size(); ++p)
    if (p < static_cast<size_t>(begin) || p >= static_cast<size_t>(begin + len))
      CHECK(ids[p] == s.piece_ids[p]);

  // keep leaves ids alone but still contributes prediction targets
  plan.selections = {{2, MaskPlan::Action::kKeep}};
  targets.clear();
  ids = apply_mask_plan(s, plan, 50, &targets);
  CHECK(ids == s.piece_ids);
  CHECK(targets.size() == 2);

  // random substitution stays inside the non-special id range
  plan.selections = {{1, MaskPlan::Action::kRandom}};
  for (uint64_t seed = 0; seed < 20; ++seed) {
    plan.seed = seed;
    auto r = apply_mask_plan(s, plan, 50, nullptr);
    for (int32_t p = begin; p < begin + len; ++p) {
      CHECK(r[p] >= kNumSpecials);
      CHECK(r[p] < 50);
    }
  }

  CHECK_THROWS(apply_mask_plan(s, MaskPlan{}, 50, nullptr));
}

TEST_CASE("mask plan: selection rate and action split statistics") {
  // 100 sentences x 100 words at rate 0.15
  int64_t words = 0, selected = 0;
  int64_t n_mask = 0, n_random = 0, n_keep = 0;
  for (int i = 0; i < 100; ++i) {
    auto s = fake_sentence(std::vector<int32_t>(100, 1), 1000, 1000 + i);
    words += s.word_count();
    auto plan = make_mask_plan(s, 0.15, Rng::mix(42, i));
    selected += static_cast<int64_t>(plan.selections.size());
    for (auto [w, action] : plan.selections) {
      (void)w;
      if (action == MaskPlan::Action::kMask) ++n_mask;
      if (action == MaskPlan::Action::kRandom) ++n_random;
      if (action == MaskPlan::Action::kKeep) ++n_keep;
    }
  }
  REQUIRE(words == 10000);
  const double frac = double(selected) / double(words);
  CHECK(frac >= 0.14);
  CHECK(frac <= 0.16);
  CHECK(std::abs(double(n_mask) / selected - 0.8) <= 0.02);
  CHECK(std::abs(double(n_random) / selected - 0.1) <= 0.02);
  CHECK(std::abs(double(n_keep) / selected - 0.1) <= 0.02);
}

TEST_CASE("mask plan: whole-word atomicity over random sentences") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int32_t> lens;
    const int n = 1 + static_cast<int>(rng.next_below(8));
    for (int i = 0; i < n; ++i) lens.push_back(1 + static_cast<int32_t>(rng.next_below(4)));
    auto s = fake_sentence(lens, 80, rng.next_u64());
    auto plan = make_mask_plan(s, 0.5, rng.next_u64());
    REQUIRE(!plan.selections.empty());

    std::vector<std::pair<int64_t, int32_t>> targets;
    apply_mask_plan(s, plan, 80, &targets);
    std::set<int64_t> got;
    for (auto [pos, id] : targets) {
      (void)id;
      got.insert(pos);
    }
    std::set<int64_t> want;  // the full piece range of every selected word
    for (auto [w, action] : plan.selections) {
      (void)action;
      auto [begin, len] = s.word_pieces[w];
      for (int32_t p = begin; p < begin + len; ++p) want.insert(p);
    }
    CHECK(got == want);
  }
}

TEST_CASE("mlm_loss: uniform and perfect logits") {
  Rng rng(5);
  const int64_t h = 3, v = 4;
  auto states = Tensor::randn({1, 4, h}, rng, 1.0f, true);
  auto pooled = Tensor::zeros({2, h});
  auto out = fake_output(states, pooled, {2});

  // zero embedding and bias -> identical logits -> ln V
  auto emb0 = Tensor::zeros({v, h}, true);
  auto head = MlmHeadT<float>::init(v);
  std::vector<std::vector<std::pair<int64_t, int32_t>>> targets = {{{1, 2}}};
  auto loss = mlm_loss(out, emb0, head, targets);
  CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-5));

  // one-hot states against a strongly scaled identity embedding -> loss ~ 0
  const int64_t hv = 4;
  auto states_hot = Tensor::zeros({1, 4, hv}, true);
  states_hot.data()[1 * hv + 2] = 1.0f;  // position 1 points at vocab id 2
  auto emb_eye = Tensor::zeros({hv, hv}, true);
  for (int64_t i = 0; i < hv; ++i) emb_eye.data()[i * hv + i] = 50.0f;
  auto head4 = MlmHeadT<float>::init(hv);
  auto out_hot = fake_output(states_hot, pooled, {2});
  auto loss0 = mlm_loss(out_hot, emb_eye, head4, targets);
  CHECK(loss0.item() < 1e-6f);

  CHECK_THROWS(mlm_loss(out, emb0, head, {{}}));
}

TEST_CASE("mlm_loss matches a manual recomputation") {
  Rng rng(17);
  const int64_t b = 2, t = 5, h = 7, v = 13;
  auto states = Tensor::randn({b, t, h}, rng, 1.0f, true);
  auto emb = Tensor::randn({v, h}, rng, 0.5f, true);
  auto head = MlmHeadT<float>::init(v);
  for (auto& x : head.bias.data()) x = rng.next_uniform(-0.3, 0.3);
  auto out = fake_output(states, Tensor::zeros({4, h}), {2, 2});

  std::vector<std::vector<std::pair<int64_t, int32_t>>> targets = {{{1, 5}, {3, 2}}, {{2, 11}}};
  auto loss = mlm_loss(out, emb, head, targets);

  double want = 0.0;
  int count = 0;
  for (int64_t bi = 0; bi < b; ++bi)
    for (auto [pos, gold] : targets[bi]) {
      std::vector<double> logits(v);
      for (int64_t j = 0; j < v; ++j) {
        double dot = head.bias.data()[j];
        for (int64_t k = 0; k < h; ++k)
          dot += double(states.data()[(bi * t + pos) * h + k]) * double(emb.data()[j * h + k]);
        logits[j] = dot;
      }
      double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double l : logits) z += std::exp(l - mx);
      want += std::log(z) + mx - logits[gold];
      ++count;
    }
  want /= count;
  CHECK(loss.item() == doctest::Approx(want).epsilon(1e-4));
}

TEST_CASE("xpos_loss: uniform, margin bound, recomputation, bad tag") {
  Rng rng(23);
  const int64_t h = 6;
  auto pooled = Tensor::randn({5, h}, rng, 1.0f, true);
  auto out = fake_output(Tensor::zeros({2, 3, h}), pooled, {2, 3});

  auto s1 = fake_sentence({1, 1}, 30, 1);
  auto s2 = fake_sentence({1, 1, 1}, 30, 2);
  s1.xpos = {0, 5};
  s2.xpos = {16, 3, 8};
  std::vector<const EncodedSentence*> batch = {&s1, &s2};

  // zero projection -> uniform over the 17-tag inventory
  XposHeadT<float> zero_head{Tensor::zeros({h, 17}, true), Tensor::zeros({17}, true)};
  auto loss = xpos_loss(out, zero_head, batch);
  CHECK(loss.item() == doctest::Approx(std::log(17.0)).epsilon(1e-5));

  // bias alone forces the right answer with margin 3 -> below ln 2
  EncodedSentence b1 = s1, b2 = s2;
  b1.xpos = {0, 0};
  b2.xpos = {0, 0, 0};
  std::vector<const EncodedSentence*> batch0 = {&b1, &b2};
  XposHeadT<float> margin_head{Tensor::zeros({h, 2}, true),
                               Tensor::from({2}, {3.0f, 0.0f}, true)};
  auto loss2 = xpos_loss(out, margin_head, batch0);
  CHECK(loss2.item() < std::log(2.0f));
  CHECK(loss2.item() > 0.0f);

  // random case against a double-precision recomputation
  XposHeadT<float> head;
  head.w = Tensor::randn({h, 17}, rng, 0.4f, true);
  head.b = Tensor::randn({17}, rng, 0.4f, true);
  auto loss3 = xpos_loss(out, head, batch);
  double want = 0.0;
  std::vector<std::pair<int64_t, int32_t>> flat = {{0, 0}, {1, 5}, {2, 16}, {3, 3}, {4, 8}};
  for (auto [row, gold] : flat) {
    std::vector<double> logits(17);
    for (int64_t j = 0; j < 17; ++j) {
      double dot = head.b.data()[j];
      for (int64_t k = 0; k < h; ++k)
        dot += double(pooled.data()[row * h + k]) * double(head.w.data()[k * 17 + j]);
      logits[j] = dot;
    }
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    want += std::log(z) + mx - logits[gold];
  }
  want /= flat.size();
  CHECK(loss3.item() == doctest::Approx(want).epsilon(1e-4));

  // tag id outside the inventory is rejected
  EncodedSentence bad = s1;
  bad.xpos = {0, 17};
  std::vector<const EncodedSentence*> bad_batch = {&bad};
  CHECK_THROWS(xpos_loss(out, zero_head, bad_batch));

  // a batch with no tagged sentences is rejected
  EncodedSentence untagged = fake_sentence({1}, 30, 3);
  std::vector<const EncodedSentence*> none = {&untagged};
  CHECK_THROWS(xpos_loss(out, zero_head, none));
}

TEST_CASE("arc scores: 1-dim toy, zero params, shape") {
  // s = head^T U dep + b^T head = 3*1*2 + 0.5*3 = 7.5
  auto dep = Tensor::from({1, 1}, {2.0f});
  auto head = Tensor::from({1, 1}, {3.0f});
  auto u = Tensor::from({1, 1}, {1.0f});
  auto bias = Tensor::from({1}, {0.5f});
  auto s = arc_score_matrix(dep, head, u, bias);
  REQUIRE(s.shape() == Shape{1, 1});
  CHECK(s.data()[0] == doctest::Approx(7.5f));

  Rng rng(3);
  auto bh = BiaffineHeadT<float>::init(8, 6, 5, 3, rng);
  auto states = Tensor::randn({4, 8}, rng, 1.0f, true);
  auto sc = biaffine_scores(bh, states);
  CHECK(sc.arc.shape() == Shape{5, 5});  // 4 words + ROOT row/col
  CHECK(sc.dep_lab.shape() == Shape{5, 5});

  zero_all(bh.named_tensors());
  auto sc0 = biaffine_scores(bh, states);
  for (float x : sc0.arc.data()) CHECK(x == 0.0f);
  // zero scores mean a uniform head distribution -> CE ln 5
  auto ce = softmax_cross_entropy(select_rows(sc0.arc, {1}), std::vector<int32_t>{0});
  CHECK(ce.data()[0] == doctest::Approx(std::log(5.0)).epsilon(1e-5));
}

TEST_CASE("parse_loss: uniform scores give ln(n+1) + ln(labels)") {
  Rng rng(9);
  const int64_t h = 8;
  auto pooled = Tensor::randn({4, h}, rng, 1.0f, true);
  auto out = fake_output(Tensor::zeros({1, 4, h}), pooled, {4});
  auto s = fake_sentence({1, 1, 1, 1}, 30, 4);
  s.heads = {0, 1, 1, 3};
  s.deprels = {0, 1, 2, 0};
  std::vector<const EncodedSentence*> batch = {&s};

  auto bh = BiaffineHeadT<float>::init(h, 6, 5, 3, rng);
  zero_all(bh.named_tensors());
  auto loss = parse_loss(out, bh, batch);
  CHECK(loss.item() == doctest::Approx(std::log(5.0) + std::log(3.0)).epsilon(1e-5));

  std::vector<const EncodedSentence*> empty_batch = {};
  CHECK_THROWS(parse_loss(out, bh, empty_batch));
  EncodedSentence unparsed = fake_sentence({1}, 30, 5);
  std::vector<const EncodedSentence*> no_parse = {&unparsed};
  CHECK_THROWS(parse_loss(out, bh, no_parse));
}

TEST_CASE("parse_loss matches a manual recomputation") {
  Rng rng(11);
  const int64_t h = 8, da = 6, dl = 5, L = 3, n = 4;
  auto pooled = Tensor::randn({n, h}, rng, 1.0f, true);
  auto out = fake_output(Tensor::zeros({1, n, h}), pooled, {n});
  auto s = fake_sentence({1, 1, 1, 1}, 30, 12);
  s.heads = {2, 0, 2, 1};
  s.deprels = {1, 0, 2, 2};
  std::vector<const EncodedSentence*> batch = {&s};
  auto bh = BiaffineHeadT<float>::init(h, da, dl, L, rng);
  // push pre-activations away from zero so relu regions are stable
  for (auto& x : bh.arc_dep_b.data()) x = 0.2f;
  for (auto& x : bh.arc_head_b.data()) x = 0.2f;

  auto loss = parse_loss(out, bh, batch);

  // recompute in double from the raw buffers
  auto relu_proj = [&](const Tensor& w, const Tensor& b, int64_t dim,
                       std::vector<std::vector<double>>& out_rows) {
    out_rows.assign(n + 1, std::vector<double>(dim, 0.0));
    for (int64_t i = 0; i <= n; ++i)
      for (int64_t j = 0; j < dim; ++j) {
        double acc = b.data()[j];
        for (int64_t k = 0; k < h; ++k) {
          double st = i == 0 ? double(bh.root.data()[k]) : double(pooled.data()[(i - 1) * h + k]);
          acc += st * double(w.data()[k * dim + j]);
        }
        out_rows[i][j] = std::max(acc, 0.0);
      }
  };
  std::vector<std::vector<double>> dep, hd, dep_l, hd_l;
  relu_proj(bh.arc_dep_w, bh.arc_dep_b, da, dep);
  relu_proj(bh.arc_head_w, bh.arc_head_b, da, hd);
  relu_proj(bh.lab_dep_w, bh.lab_dep_b, dl, dep_l);
  relu_proj(bh.lab_head_w, bh.lab_head_b, dl, hd_l);

  auto ce = [](const std::vector<double>& logits, int32_t gold) {
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    return std::log(z) + mx - logits[gold];
  };

  double want = 0.0;
  for (int64_t i = 1; i <= n; ++i) {
    std::vector<double> arc(n + 1, 0.0);
    for (int64_t j = 0; j <= n; ++j) {
      double sc = 0.0;
      for (int64_t a = 0; a < da; ++a)
        for (int64_t b2 = 0; b2 < da; ++b2)
          sc += hd[j][a] * double(bh.arc_u.data()[b2 * da + a]) * dep[i][b2];
      // matches s(i,j) = dep(i)^T u^T head(j): u[row=dep dim][col=head dim]
      for (int64_t a = 0; a < da; ++a) sc += double(bh.arc_bias.data()[a]) * hd[j][a];
      arc[j] = sc;
    }
    want += ce(arc, s.heads[i - 1]);

    const int64_t g = s.heads[i - 1];
    std::vector<double> lab(L, 0.0);
    for (int64_t l = 0; l < L; ++l) {
      double sc = double(bh.lab_bias.data()[l]);
      for (int64_t m = 0; m < dl; ++m)
        for (int64_t k = 0; k < dl; ++k)
          sc += dep_l[i][m] * double(bh.lab_u.data()[m * (L * dl) + l * dl + k]) * hd_l[g][k];
      for (int64_t m = 0; m < dl; ++m) sc += dep_l[i][m] * double(bh.lab_wd.data()[m * L + l]);
      for (int64_t k = 0; k < dl; ++k) sc += hd_l[g][k] * double(bh.lab_wh.data()[k * L + l]);
      lab[l] = sc;
    }
    want += ce(lab, s.deprels[i - 1]);
  }
  want /= n;
  CHECK(loss.item() == doctest::Approx(want).epsilon(2e-3));
  CHECK(loss.item() >= 0.0f);
  CHECK(std::isfinite(loss.item()));
}

TEST_CASE("parse_loss is drivable to zero on a fixed sentence") {
  Rng rng(29);
  const int64_t h = 8;
  auto pooled = Tensor::randn({3, h}, rng, 1.0f, false);
  auto out = fake_output(Tensor::zeros({1, 3, h}), pooled, {3});
  auto s = fake_sentence({1, 1, 1}, 30, 6);
  s.heads = {0, 1, 1};
  s.deprels = {2, 0, 1};
  std::vector<const EncodedSentence*> batch = {&s};

  auto bh = BiaffineHeadT<float>::init(h, 8, 8, 3, rng);
  ParamList params;
  for (auto& nt : bh.named_tensors()) params.push_back({nt.name, *nt.tensor, nt.no_decay});
  AdamW opt(params, {.lr = 0.02f});
  float last = 0.0f;
  for (int step = 0; step < 300; ++step) {
    opt.zero_grad();
    auto loss = parse_loss(out, bh, batch);
    backward(loss);
    opt.step();
    last = loss.item();
  }
  CHECK(last < 0.05f);
}

TEST_CASE("parse_loss gradients agree with finite differences") {
  Rng rng(41);
  using D = TensorT<double>;
  const int64_t h = 6, n = 4;
  auto pooled = D::randn({n, h}, rng, 1.0, true);
  EncoderOutputT<double> out;
  out.layer_states = {D::zeros({1, n, h})};
  out.pooled = pooled;
  out.word_offset = {0};
  out.word_count = {n};
  auto s = fake_sentence({1, 2, 1, 3}, 40, 77);
  s.heads = {2, 0, 4, 2};
  s.deprels = {0, 3, 1, 2};
  std::vector<const EncodedSentence*> batch = {&s};

  auto bh = BiaffineHeadT<double>::init(h, 5, 4, 4, rng);
  // larger weights + positive biases keep relu inputs away from the kink
  for (auto nt : bh.named_tensors()) {
    Rng wr(Rng::mix(101, std::hash<std::string>{}(nt.name)));
    for (auto& x : nt.tensor->data()) x = wr.next_uniform(-0.5, 0.5);
  }
  for (auto& x : bh.arc_dep_b.data()) x += 0.6;
  for (auto& x : bh.arc_head_b.data()) x += 0.6;
  for (auto& x : bh.lab_dep_b.data()) x += 0.6;
  for (auto& x : bh.lab_head_b.data()) x += 0.6;

  gradcheck::SuiteResult res;
  std::vector<D*> leaves = {&pooled,    &bh.root,  &bh.arc_dep_w, &bh.arc_u, &bh.arc_bias,
                            &bh.lab_u,  &bh.lab_wd, &bh.lab_head_w, &bh.lab_bias};
  gradcheck::fd_check(res, "parse_loss", leaves,
                      [&] { return parse_loss(out, bh, batch); }, 1e-4, 1e-6);
  for (const auto& m : res.messages) MESSAGE(m);
  CHECK(res.failures == 0);
  CHECK(res.cases > 0);
}

TEST_CASE("aggregate sums the bundle and rejects empty") {
  auto a = Tensor::scalar(1.0f);
  CHECK(aggregate<float>({a}).item() == doctest::Approx(1.0f));
  auto b = Tensor::scalar(0.5f);
  auto c = Tensor::scalar(0.25f);
  CHECK(aggregate<float>({a, b, c}).item() == doctest::Approx(1.75f));
  CHECK_THROWS(aggregate<float>({}));
}

TEST_CASE("aggregate gradient equals the sum of per-task gradients") {
  // real encoder, three heads; compare d(sum)/dw against summed separate passes
  std::vector<std::string> pieces(kSpecialPieces, kSpecialPieces + kNumSpecials);
  for (const char* p : {"aa", "bb", "cc", "dd", "ee", "##a", "##b"}) pieces.push_back(p);
  auto vocab = Vocabulary::from_pieces(pieces);

  EncoderConfig cfg;
  cfg.layers = 1;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn = 16;
  cfg.max_positions = 32;
  cfg.vocab_size = vocab.size();
  cfg.dropout = 0.0f;
  Rng rng(55);
  auto w = EncoderWeightsT<float>::init(cfg, rng);

  auto s1 = encode({"aa", "bb", "cc"}, vocab);
  s1.xpos = {0, 1, 0};
  s1.heads = {0, 1, 1};
  s1.deprels = {0, 1, 2};
  auto s2 = encode({"dd", "ee"}, vocab);
  s2.xpos = {1, 1};
  s2.heads = {2, 0};
  s2.deprels = {2, 0};
  std::vector<const EncodedSentence*> batch = {&s1, &s2};

  auto mlm_head = MlmHeadT<float>::init(cfg.vocab_size);
  auto xpos_head = XposHeadT<float>::init(cfg.hidden, 2, rng);
  auto parse_head = BiaffineHeadT<float>::init(cfg.hidden, 6, 5, 3, rng);

  std::vector<std::vector<int32_t>> masked_ids;
  std::vector<std::vector<std::pair<int64_t, int32_t>>> targets;
  for (auto* s : batch) {
    auto plan = make_mask_plan(*s, 0.4, 7 + targets.size());
    targets.emplace_back();
    masked_ids.push_back(apply_mask_plan(*s, plan, vocab.size(), &targets.back()));
  }

  auto run_losses = [&]() {
    ForwardOptions<float> clean;
    auto unmasked = encoder_forward(w, batch, clean);
    ForwardOptions<float> masked;
    masked.piece_ids_override = &masked_ids;
    auto masked_out = encoder_forward(w, batch, masked);
    return std::vector<Tensor>{mlm_loss(masked_out, w.tok_emb, mlm_head, targets),
                               xpos_loss(unmasked, xpos_head, batch),
                               parse_loss(unmasked, parse_head, batch)};
  };

  std::vector<Tensor*> leaves;
  for (auto nt : w.named_tensors()) leaves.push_back(nt.tensor);
  for (auto nt : mlm_head.named_tensors()) leaves.push_back(nt.tensor);
  for (auto nt : xpos_head.named_tensors()) leaves.push_back(nt.tensor);
  for (auto nt : parse_head.named_tensors()) leaves.push_back(nt.tensor);

  auto losses = run_losses();
  backward(aggregate(losses));
  std::vector<std::vector<float>> combined;
  for (auto* t : leaves) combined.push_back(t->has_grad() ? t->grad() : std::vector<float>());

  for (auto* t : leaves) t->zero_grad();
  for (int task = 0; task < 3; ++task) {
    auto fresh = run_losses();
    backward(fresh[task]);
  }

  double worst = 0.0;
  for (size_t i = 0; i < leaves.size(); ++i) {
    if (combined[i].empty()) {
      CHECK(!leaves[i]->has_grad());
      continue;
    }
    const auto& sum_grads = leaves[i]->grad();
    REQUIRE(sum_grads.size() == combined[i].size());
    double scale = 1.0;
    for (float g : combined[i]) scale = std::max(scale, std::abs(double(g)));
    for (size_t j = 0; j < sum_grads.size(); ++j)
      worst = std::max(worst, std::abs(double(sum_grads[j]) - double(combined[i][j])) / scale);
  }
  CHECK(worst < 2e-4);
}
