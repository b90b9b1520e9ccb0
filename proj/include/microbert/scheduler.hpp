#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace microbert {

// Multitask epoch construction: single-dataset batches, floor quotas from the
// task weights, wrap-around cycling through per-epoch shuffled instance
// orders.

struct TrainPlan {
  std::vector<std::string> tasks;      // one entry per task, parallel arrays
  std::vector<int64_t> dataset_sizes;  // instances available per task dataset
  std::vector<double> weights;         // normalized, sums to 1
  int64_t batches_per_epoch = 8000;
  int64_t batch_size = 32;
  uint64_t seed = 0;
  std::vector<std::string> warnings;  // e.g. zero-ratio tasks that were dropped

  // builds a plan from integer ratios; zero-ratio tasks are dropped with a
  // warning so the surviving weights still sum to 1
  static TrainPlan make(std::vector<std::string> tasks, std::vector<int64_t> dataset_sizes,
                        const std::vector<int64_t>& ratio, int64_t batches_per_epoch,
                        int64_t batch_size, uint64_t seed);
};

// λ_i = ratio_i / Σ ratio
std::vector<double> plan_from_ratio(const std::vector<int64_t>& ratio);

struct BatchRef {
  int32_t dataset = 0;             // index into the plan's task/dataset arrays
  std::vector<int64_t> instances;  // instance indices within that dataset
};

struct EpochSchedule {
  std::vector<BatchRef> batches;
};

// Exactly batches_per_epoch batches; every dataset t appears at least
// ⌊λ_t·|B|⌋ times, leftover slots go by largest remainder, and the slot
// sequence is seed-shuffled. Deterministic given (plan, epoch_index).
EpochSchedule build_epoch(const TrainPlan& plan, int64_t epoch_index);

// Which heads a batch can feed: MLM always (text is enough), the labeled
// heads only when both the batch carries the annotation and the plan trains
// that task.
struct HeadSet {
  bool mlm = false;
  bool xpos = false;
  bool parse = false;
  bool operator==(const HeadSet&) const = default;
};

HeadSet route(bool batch_has_xpos, bool batch_has_parse, bool xpos_enabled, bool parse_enabled);

}  // namespace microbert
