#include "microbert/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "microbert/rng.hpp"
#include "microbert/tensor.hpp"

namespace microbert {

std::vector<double> plan_from_ratio(const std::vector<int64_t>& ratio) {
  op_check(!ratio.empty(), "plan_from_ratio: empty ratio");
  int64_t total = 0;
  for (int64_t r : ratio) {
    op_check(r >= 0, "plan_from_ratio: negative ratio entry " + std::to_string(r));
    total += r;
  }
  op_check(total > 0, "plan_from_ratio: all ratio entries are zero");
  std::vector<double> weights(ratio.size());
  for (size_t i = 0; i < ratio.size(); ++i)
    weights[i] = static_cast<double>(ratio[i]) / static_cast<double>(total);
  return weights;
}

TrainPlan TrainPlan::make(std::vector<std::string> tasks, std::vector<int64_t> dataset_sizes,
                          const std::vector<int64_t>& ratio, int64_t batches_per_epoch,
                          int64_t batch_size, uint64_t seed) {
  op_check(tasks.size() == dataset_sizes.size() && tasks.size() == ratio.size(),
           "train plan: tasks, datasets and ratio must align");
  op_check(batches_per_epoch > 0, "train plan: batches_per_epoch must be positive");
  op_check(batch_size > 0, "train plan: batch_size must be positive");
  plan_from_ratio(ratio);  // validates entries

  TrainPlan plan;
  std::vector<int64_t> kept_ratio;
  for (size_t i = 0; i < tasks.size(); ++i) {
    if (ratio[i] == 0) {
      plan.warnings.push_back("task '" + tasks[i] + "' has ratio 0, dropping it");
      continue;
    }
    plan.tasks.push_back(std::move(tasks[i]));
    plan.dataset_sizes.push_back(dataset_sizes[i]);
    kept_ratio.push_back(ratio[i]);
  }
  plan.weights = plan_from_ratio(kept_ratio);
  plan.batches_per_epoch = batches_per_epoch;
  plan.batch_size = batch_size;
  plan.seed = seed;
  return plan;
}

EpochSchedule build_epoch(const TrainPlan& plan, int64_t epoch_index) {
  const size_t n_tasks = plan.tasks.size();
  op_check(n_tasks > 0, "build_epoch: plan has no tasks");
  op_check(plan.weights.size() == n_tasks && plan.dataset_sizes.size() == n_tasks,
           "build_epoch: malformed plan");
  for (size_t t = 0; t < n_tasks; ++t) {
    op_check(plan.dataset_sizes[t] > 0, "build_epoch: dataset for task '" + plan.tasks[t] +
                                            "' is empty");
    op_check(plan.weights[t] > 0.0, "build_epoch: task '" + plan.tasks[t] +
                                        "' has non-positive weight");
  }
  const int64_t b_total = plan.batches_per_epoch;

  // floor quotas, then largest remainder for the leftover slots
  std::vector<int64_t> counts(n_tasks);
  std::vector<std::pair<double, size_t>> rem(n_tasks);
  int64_t assigned = 0;
  for (size_t t = 0; t < n_tasks; ++t) {
    const double exact = plan.weights[t] * static_cast<double>(b_total);
    counts[t] = static_cast<int64_t>(std::floor(exact));
    rem[t] = {exact - std::floor(exact), t};
    assigned += counts[t];
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int64_t i = 0; i < b_total - assigned; ++i) ++counts[rem[i % n_tasks].second];

  std::vector<int32_t> slots;
  slots.reserve(b_total);
  for (size_t t = 0; t < n_tasks; ++t)
    slots.insert(slots.end(), counts[t], static_cast<int32_t>(t));
  Rng slot_rng(Rng::mix(plan.seed, static_cast<uint64_t>(epoch_index), 0x51ed));
  slot_rng.shuffle(slots.begin(), slots.end());

  // fresh shuffled instance order per dataset per epoch; cursors wrap
  std::vector<std::vector<int64_t>> orders(n_tasks);
  std::vector<size_t> cursor(n_tasks, 0);
  for (size_t t = 0; t < n_tasks; ++t) {
    orders[t].resize(plan.dataset_sizes[t]);
    std::iota(orders[t].begin(), orders[t].end(), 0);
    Rng data_rng(Rng::mix(plan.seed, static_cast<uint64_t>(epoch_index), 0xda7a, t));
    data_rng.shuffle(orders[t].begin(), orders[t].end());
  }

  EpochSchedule schedule;
  schedule.batches.reserve(b_total);
  for (int32_t t : slots) {
    BatchRef batch;
    batch.dataset = t;
    batch.instances.reserve(plan.batch_size);
    auto& order = orders[t];
    for (int64_t i = 0; i < plan.batch_size; ++i) {
      batch.instances.push_back(order[cursor[t]]);
      cursor[t] = (cursor[t] + 1) % order.size();
    }
    schedule.batches.push_back(std::move(batch));
  }
  return schedule;
}

HeadSet route(bool batch_has_xpos, bool batch_has_parse, bool xpos_enabled, bool parse_enabled) {
  return HeadSet{true, batch_has_xpos && xpos_enabled, batch_has_parse && parse_enabled};
}

}  // namespace microbert
