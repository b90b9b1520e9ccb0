#include "microbert/heads.hpp"

#include "microbert/rng.hpp"

namespace microbert {

MaskPlan make_mask_plan(const EncodedSentence& sentence, double rate, uint64_t seed) {
  op_check(sentence.word_count() > 0, "make_mask_plan: empty sentence");
  op_check(rate >= 0.0 && rate <= 1.0, "make_mask_plan: rate out of [0,1]");
  const int64_t n = sentence.word_count();
  Rng rng(Rng::mix(seed, 0x3a5e));
  MaskPlan plan;
  plan.seed = seed;

  std::vector<int32_t> chosen;
  for (int attempt = 0; attempt < 16 && chosen.empty(); ++attempt)
    for (int64_t i = 0; i < n; ++i)
      if (rng.next_bernoulli(rate)) chosen.push_back(static_cast<int32_t>(i));
  if (chosen.empty()) chosen.push_back(static_cast<int32_t>(rng.next_below(n)));

  for (int32_t w : chosen) {
    const double roll = rng.next_double();
    auto action = roll < 0.8   ? MaskPlan::Action::kMask
                  : roll < 0.9 ? MaskPlan::Action::kRandom
                               : MaskPlan::Action::kKeep;
    plan.selections.emplace_back(w, action);
  }
  return plan;
}

std::vector<int32_t> apply_mask_plan(const EncodedSentence& sentence, const MaskPlan& plan,
                                     int32_t vocab_size,
                                     std::vector<std::pair<int64_t, int32_t>>* targets) {
  op_check(!plan.selections.empty(), "apply_mask_plan: empty plan");
  op_check(vocab_size > kNumSpecials, "apply_mask_plan: vocabulary too small");
  std::vector<int32_t> ids = sentence.piece_ids;
  Rng rng(Rng::mix(plan.seed, 0xa11d));
  for (auto [word, action] : plan.selections) {
    op_check(word >= 0 && word < sentence.word_count(), "apply_mask_plan: word out of range");
    auto [begin, len] = sentence.word_pieces[word];
    for (int32_t p = begin; p < begin + len; ++p) {
      if (targets) targets->emplace_back(p, sentence.piece_ids[p]);
      switch (action) {
        case MaskPlan::Action::kMask:
          ids[p] = kMaskId;
          break;
        case MaskPlan::Action::kRandom:
          ids[p] = static_cast<int32_t>(
              kNumSpecials + rng.next_below(static_cast<int64_t>(vocab_size) - kNumSpecials));
          break;
        case MaskPlan::Action::kKeep:
          break;
      }
    }
  }
  return ids;
}

}  // namespace microbert
