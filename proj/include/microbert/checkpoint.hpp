#pragma once

#include <map>
#include <string>

#include "microbert/encoder.hpp"
#include "microbert/tensor.hpp"

namespace microbert {

// On-disk model snapshot. A checkpoint directory holds:
//   manifest.json  config, scalar trainer state, tensor name -> shape/offset
//   weights.bin    raw little-endian float32 blob, tensors at their offsets
//   vocab.txt      the vocabulary, one piece per line
//   config.cfg     copy of the run configuration (only when one was given)
// Saving what load_checkpoint returned reproduces every file byte for byte.
struct CheckpointData {
  EncoderConfig config;
  std::map<std::string, Tensor> tensors;     // sorted by name
  std::map<std::string, double> scalars;     // epoch, val_ppl, lr, ...
  std::string vocab_text;
  std::string config_text;                   // empty = no config.cfg file
};

void save_checkpoint(const std::string& dir, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& dir);

}  // namespace microbert
