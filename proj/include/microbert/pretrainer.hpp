#pragma once

#include <optional>
#include <string>
#include <vector>

#include "microbert/checkpoint.hpp"
#include "microbert/encoder.hpp"
#include "microbert/heads.hpp"
#include "microbert/optim.hpp"
#include "microbert/scheduler.hpp"
#include "microbert/tokenizer.hpp"

namespace microbert {

struct PretrainConfig {
  EncoderConfig encoder;

  float lr = 3e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float weight_decay = 0.05f;

  int plateau_patience = 2;
  float plateau_factor = 0.5f;
  float lr_floor = 5e-5f;

  int64_t epochs = 200;
  int64_t batches_per_epoch = 8000;
  int64_t batch_size = 32;
  int early_stop_patience = 40;

  float mask_rate = 0.15f;
  float clip_norm = 0.0f;  // 0 disables gradient clipping
  uint64_t seed = 0;
  std::string out_dir;

  void validate() const;
};

// one pretraining task and the dataset that feeds it
struct TaskData {
  std::string name;  // "mlm", "xpos" or "parse"
  const std::vector<EncodedSentence>* data = nullptr;
  int64_t ratio = 1;
};

struct EpochRecord {
  int64_t epoch = 0;
  double loss_mlm = 0.0;    // mean over the epoch's batches that fed the head
  double loss_xpos = 0.0;
  double loss_parse = 0.0;
  double val_ppl = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct RunLog {
  std::vector<EpochRecord> records;
  std::string to_csv() const;
  void save_csv(const std::string& path) const;
};

// encoder plus pretraining heads; labeled heads exist only when the task data
// carries the annotation
struct PretrainModel {
  EncoderConfig config;
  EncoderWeightsT<float> encoder;
  MlmHeadT<float> mlm;
  std::optional<XposHeadT<float>> xpos;
  std::optional<BiaffineHeadT<float>> parse;

  static PretrainModel init(const EncoderConfig& cfg, int32_t n_xpos_tags, int32_t n_deprels,
                            Rng& rng);
  static PretrainModel from_checkpoint(const CheckpointData& data);

  std::vector<NamedTensor<float>> named_tensors();
  ParamList params();
};

// checkpoint assembly: model tensors (+ optimizer moments when given)
// the vocabulary in checkpoint text form (one piece per line)
std::string vocab_as_text(const Vocabulary& vocab);

CheckpointData model_to_checkpoint(PretrainModel& model, const std::string& vocab_text,
                                   const std::map<std::string, double>& scalars,
                                   const std::string& config_text, AdamW* optimizer = nullptr);
void load_optimizer_state(AdamW& optimizer, const CheckpointData& data);

// exp(mean masked-position NLL) under a fixed mask seed, so values are
// comparable across epochs
double validation_perplexity(PretrainModel& model, const std::vector<EncodedSentence>& val,
                             float mask_rate, uint64_t mask_seed, int64_t batch_size);

struct PretrainResult {
  RunLog log;
  std::string best_dir;  // directory of the best checkpoint
  double best_ppl = 0.0;
  int64_t best_epoch = -1;
  bool stopped_early = false;
};

PretrainResult pretrain(const PretrainConfig& cfg, const std::vector<TaskData>& tasks,
                        const std::vector<EncodedSentence>& validation, const Vocabulary& vocab,
                        int32_t n_xpos_tags, int32_t n_deprels,
                        const std::string& config_text = "");

}  // namespace microbert
