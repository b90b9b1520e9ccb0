#include "microbert/pretrainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

namespace microbert {

namespace {

namespace fs = std::filesystem;

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

struct BatchLosses {
  double mlm = 0.0, xpos = 0.0, parse = 0.0;
  bool has_xpos = false, has_parse = false;
};

}  // namespace

std::string vocab_as_text(const Vocabulary& vocab) {
  std::string text;
  for (const auto& p : vocab.pieces()) {
    text += p;
    text += '\n';
  }
  return text;
}

void PretrainConfig::validate() const {
  encoder.validate();
  op_check(lr > 0.0f, "pretrain config: lr must be positive");
  op_check(weight_decay >= 0.0f, "pretrain config: negative weight decay");
  op_check(plateau_patience > 0, "pretrain config: plateau patience must be positive");
  op_check(plateau_factor > 0.0f && plateau_factor < 1.0f,
           "pretrain config: plateau factor must lie in (0,1)");
  op_check(lr_floor > 0.0f, "pretrain config: lr floor must be positive");
  op_check(epochs > 0, "pretrain config: epochs must be positive");
  op_check(batches_per_epoch > 0, "pretrain config: batches_per_epoch must be positive");
  op_check(batch_size > 0, "pretrain config: batch_size must be positive");
  op_check(early_stop_patience > 0, "pretrain config: early stop patience must be positive");
  op_check(mask_rate > 0.0f && mask_rate < 1.0f, "pretrain config: mask rate must lie in (0,1)");
  op_check(clip_norm >= 0.0f, "pretrain config: negative clip norm");
}

std::string RunLog::to_csv() const {
  std::string csv = "epoch,loss_mlm,loss_xpos,loss_parse,val_ppl,lr,seconds\n";
  for (const auto& r : records) {
    csv += std::to_string(r.epoch) + "," + fmt_g(r.loss_mlm) + "," + fmt_g(r.loss_xpos) + "," +
           fmt_g(r.loss_parse) + "," + fmt_g(r.val_ppl) + "," + fmt_g(r.lr) + "," +
           fmt_g(r.seconds) + "\n";
  }
  return csv;
}

void RunLog::save_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("run log: cannot write " + path);
  out << to_csv();
  if (!out) throw std::runtime_error("run log: write failed for " + path);
}

PretrainModel PretrainModel::init(const EncoderConfig& cfg, int32_t n_xpos_tags,
                                  int32_t n_deprels, Rng& rng) {
  PretrainModel m{cfg, EncoderWeightsT<float>::init(cfg, rng),
                  MlmHeadT<float>::init(cfg.vocab_size), std::nullopt, std::nullopt};
  if (n_xpos_tags > 0) m.xpos = XposHeadT<float>::init(cfg.hidden, n_xpos_tags, rng);
  if (n_deprels > 0) m.parse = BiaffineHeadT<float>::init(cfg.hidden, 100, 100, n_deprels, rng);
  return m;
}

std::vector<NamedTensor<float>> PretrainModel::named_tensors() {
  auto named = encoder.named_tensors();
  for (auto nt : mlm.named_tensors()) named.push_back(nt);
  if (xpos)
    for (auto nt : xpos->named_tensors()) named.push_back(nt);
  if (parse)
    for (auto nt : parse->named_tensors()) named.push_back(nt);
  return named;
}

ParamList PretrainModel::params() {
  ParamList params;
  for (auto nt : named_tensors()) params.push_back({nt.name, *nt.tensor, nt.no_decay, 1.0f});
  return params;
}

PretrainModel PretrainModel::from_checkpoint(const CheckpointData& data) {
  const auto scalar = [&](const std::string& key) {
    auto it = data.scalars.find(key);
    return it == data.scalars.end() ? 0.0 : it->second;
  };
  Rng rng(0);  // shapes only; every tensor is overwritten below
  auto model = init(data.config, static_cast<int32_t>(scalar("n_xpos_tags")),
                    static_cast<int32_t>(scalar("n_deprels")), rng);
  for (auto nt : model.named_tensors()) {
    auto it = data.tensors.find(nt.name);
    op_check(it != data.tensors.end(), "checkpoint: missing tensor '" + nt.name + "'");
    op_check(it->second.shape() == nt.tensor->shape(),
             "checkpoint: shape mismatch for '" + nt.name + "'");
    std::copy(it->second.data().begin(), it->second.data().end(), nt.tensor->data().begin());
  }
  return model;
}

CheckpointData model_to_checkpoint(PretrainModel& model, const std::string& vocab_text,
                                   const std::map<std::string, double>& scalars,
                                   const std::string& config_text, AdamW* optimizer) {
  CheckpointData data;
  data.config = model.config;
  data.scalars = scalars;
  data.vocab_text = vocab_text;
  data.config_text = config_text;
  for (auto nt : model.named_tensors()) {
    std::vector<float> copy(nt.tensor->data());
    data.tensors.emplace(nt.name, Tensor::from(nt.tensor->shape(), std::move(copy)));
  }
  if (optimizer) {
    auto& params = optimizer->params();
    for (size_t i = 0; i < params.size(); ++i) {
      data.tensors.emplace("optim/m/" + params[i].name,
                           Tensor::from(params[i].tensor.shape(),
                                        std::vector<float>(optimizer->moments_m()[i])));
      data.tensors.emplace("optim/v/" + params[i].name,
                           Tensor::from(params[i].tensor.shape(),
                                        std::vector<float>(optimizer->moments_v()[i])));
    }
    data.scalars["adam_steps"] = static_cast<double>(optimizer->steps());
  }
  return data;
}

void load_optimizer_state(AdamW& optimizer, const CheckpointData& data) {
  auto& params = optimizer.params();
  for (size_t i = 0; i < params.size(); ++i) {
    auto m = data.tensors.find("optim/m/" + params[i].name);
    auto v = data.tensors.find("optim/v/" + params[i].name);
    op_check(m != data.tensors.end() && v != data.tensors.end(),
             "checkpoint: missing optimizer state for '" + params[i].name + "'");
    optimizer.moments_m()[i] = m->second.data();
    optimizer.moments_v()[i] = v->second.data();
  }
  auto it = data.scalars.find("adam_steps");
  if (it != data.scalars.end()) optimizer.set_steps(static_cast<int64_t>(it->second));
}

double validation_perplexity(PretrainModel& model, const std::vector<EncodedSentence>& val,
                             float mask_rate, uint64_t mask_seed, int64_t batch_size) {
  op_check(!val.empty(), "validation_perplexity: empty validation set");
  NoGradGuard guard;
  double nll_sum = 0.0;
  int64_t positions = 0;
  for (size_t start = 0; start < val.size(); start += batch_size) {
    const size_t end = std::min(val.size(), start + static_cast<size_t>(batch_size));
    std::vector<const EncodedSentence*> batch;
    std::vector<std::vector<int32_t>> masked_ids;
    std::vector<std::vector<std::pair<int64_t, int32_t>>> targets;
    int64_t batch_positions = 0;
    for (size_t s = start; s < end; ++s) {
      const auto& sent = val[s];
      batch.push_back(&sent);
      auto plan = make_mask_plan(sent, mask_rate, Rng::mix(mask_seed, s));
      targets.emplace_back();
      masked_ids.push_back(apply_mask_plan(sent, plan, model.config.vocab_size, &targets.back()));
      batch_positions += static_cast<int64_t>(targets.back().size());
    }
    ForwardOptions<float> opts;
    opts.piece_ids_override = &masked_ids;
    auto out = encoder_forward(model.encoder, batch, opts);
    auto loss = mlm_loss(out, model.encoder.tok_emb, model.mlm, targets);
    nll_sum += double(loss.item()) * static_cast<double>(batch_positions);
    positions += batch_positions;
  }
  return std::exp(nll_sum / static_cast<double>(positions));
}

namespace {

BatchLosses run_batch(PretrainModel& model, AdamW& opt, const PretrainConfig& cfg,
                      const std::vector<const EncodedSentence*>& batch, HeadSet heads,
                      int64_t epoch, int64_t batch_index) {
  std::vector<std::vector<int32_t>> masked_ids;
  std::vector<std::vector<std::pair<int64_t, int32_t>>> targets;
  for (size_t s = 0; s < batch.size(); ++s) {
    auto plan = make_mask_plan(*batch[s], cfg.mask_rate,
                               Rng::mix(cfg.seed ^ 0x3ad5u, epoch, batch_index, s));
    targets.emplace_back();
    masked_ids.push_back(
        apply_mask_plan(*batch[s], plan, model.config.vocab_size, &targets.back()));
  }

  ForwardOptions<float> masked;
  masked.training = true;
  masked.dropout_seed = Rng::mix(cfg.seed ^ 0xd409u, epoch, batch_index, 0);
  masked.piece_ids_override = &masked_ids;
  auto masked_out = encoder_forward(model.encoder, batch, masked);

  std::vector<Tensor> losses;
  losses.push_back(mlm_loss(masked_out, model.encoder.tok_emb, model.mlm, targets));

  BatchLosses out;
  if (heads.xpos || heads.parse) {
    // labeled heads read the unmasked pass (the footnote's double forward)
    ForwardOptions<float> clean;
    clean.training = true;
    clean.dropout_seed = Rng::mix(cfg.seed ^ 0xd409u, epoch, batch_index, 1);
    auto clean_out = encoder_forward(model.encoder, batch, clean);
    if (heads.xpos) {
      losses.push_back(xpos_loss(clean_out, *model.xpos, batch));
      out.xpos = losses.back().item();
      out.has_xpos = true;
    }
    if (heads.parse) {
      losses.push_back(parse_loss(clean_out, *model.parse, batch));
      out.parse = losses.back().item();
      out.has_parse = true;
    }
  }
  out.mlm = losses.front().item();

  auto total = aggregate(losses);
  const float value = total.item();
  if (!std::isfinite(value))
    throw std::runtime_error("pretrain: non-finite loss at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batch_index));
  opt.zero_grad();
  backward(total);
  ParamList& params = opt.params();
  if (cfg.clip_norm > 0.0f) clip_gradients(params, cfg.clip_norm);
  if (!opt.step())
    throw std::runtime_error("pretrain: non-finite gradient at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batch_index));
  return out;
}

}  // namespace

PretrainResult pretrain(const PretrainConfig& cfg, const std::vector<TaskData>& tasks,
                        const std::vector<EncodedSentence>& validation, const Vocabulary& vocab,
                        int32_t n_xpos_tags, int32_t n_deprels, const std::string& config_text) {
  cfg.validate();
  op_check(!tasks.empty(), "pretrain: no tasks");
  op_check(!validation.empty(), "pretrain: empty validation set");
  op_check(!cfg.out_dir.empty(), "pretrain: out_dir not set");
  for (const auto& t : tasks)
    op_check(t.data != nullptr, "pretrain: task '" + t.name + "' has no dataset");

  std::vector<std::string> names;
  std::vector<int64_t> sizes, ratios;
  for (const auto& t : tasks) {
    names.push_back(t.name);
    sizes.push_back(static_cast<int64_t>(t.data->size()));
    ratios.push_back(t.ratio);
  }
  auto plan =
      TrainPlan::make(names, sizes, ratios, cfg.batches_per_epoch, cfg.batch_size, cfg.seed);
  std::vector<const std::vector<EncodedSentence>*> datasets;
  for (const auto& t : tasks)
    if (std::find(plan.tasks.begin(), plan.tasks.end(), t.name) != plan.tasks.end())
      datasets.push_back(t.data);

  Rng init_rng(Rng::mix(cfg.seed, 0x1b17));
  auto model = PretrainModel::init(cfg.encoder, n_xpos_tags, n_deprels, init_rng);
  AdamW opt(model.params(),
            {cfg.lr, cfg.beta1, cfg.beta2, 1e-8f, cfg.weight_decay});
  PlateauSchedule schedule(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.lr_floor);
  const uint64_t val_seed = Rng::mix(cfg.seed, 0x7a11);

  fs::create_directories(cfg.out_dir);
  const std::string best_dir = (fs::path(cfg.out_dir) / "best").string();
  const std::string vocab_text = vocab_as_text(vocab);

  PretrainResult result;
  result.best_ppl = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto sched = build_epoch(plan, epoch);

    double sum_mlm = 0.0, sum_xpos = 0.0, sum_parse = 0.0;
    int64_t n_mlm = 0, n_xpos = 0, n_parse = 0;
    for (size_t bi = 0; bi < sched.batches.size(); ++bi) {
      const auto& ref = sched.batches[bi];
      const auto& dataset = *datasets[ref.dataset];
      std::vector<const EncodedSentence*> batch;
      batch.reserve(ref.instances.size());
      bool has_xpos = true, has_parse = true;
      for (int64_t idx : ref.instances) {
        batch.push_back(&dataset[idx]);
        has_xpos = has_xpos && batch.back()->has_xpos();
        has_parse = has_parse && batch.back()->has_parse();
      }
      auto heads = route(has_xpos, has_parse, model.xpos.has_value(), model.parse.has_value());
      BatchLosses losses;
      try {
        losses = run_batch(model, opt, cfg, batch, heads, epoch, static_cast<int64_t>(bi));
      } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string(e.what()) + ", dataset '" +
                                 plan.tasks[ref.dataset] + "'");
      }
      sum_mlm += losses.mlm;
      ++n_mlm;
      if (losses.has_xpos) {
        sum_xpos += losses.xpos;
        ++n_xpos;
      }
      if (losses.has_parse) {
        sum_parse += losses.parse;
        ++n_parse;
      }
    }

    const double ppl =
        validation_perplexity(model, validation, cfg.mask_rate, val_seed, cfg.batch_size);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss_mlm = n_mlm ? sum_mlm / n_mlm : 0.0;
    rec.loss_xpos = n_xpos ? sum_xpos / n_xpos : 0.0;
    rec.loss_parse = n_parse ? sum_parse / n_parse : 0.0;
    rec.val_ppl = ppl;
    rec.lr = opt.lr();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.records.push_back(rec);

    opt.set_lr(schedule.step(ppl));

    if (ppl < result.best_ppl) {
      result.best_ppl = ppl;
      result.best_epoch = epoch;
      epochs_since_best = 0;
      std::map<std::string, double> scalars = {
          {"epoch", static_cast<double>(epoch)},
          {"val_ppl", ppl},
          {"lr", opt.lr()},
          {"plateau_best", schedule.best_metric()},
          {"plateau_since", static_cast<double>(schedule.epochs_since_improvement())},
          {"n_xpos_tags", static_cast<double>(n_xpos_tags)},
          {"n_deprels", static_cast<double>(n_deprels)},
      };
      auto data = model_to_checkpoint(model, vocab_text, scalars, config_text, &opt);
      // write to a scratch directory first so a failed write keeps the old best
      const std::string tmp_dir = best_dir + ".tmp";
      save_checkpoint(tmp_dir, data);
      fs::remove_all(best_dir);
      fs::rename(tmp_dir, best_dir);
      result.best_dir = best_dir;
    } else {
      ++epochs_since_best;
    }

    result.log.save_csv((fs::path(cfg.out_dir) / "runlog.csv").string());

    if (epochs_since_best >= cfg.early_stop_patience) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace microbert
