#include "microbert/encoder.hpp"

namespace microbert {

int64_t count_parameters(const EncoderConfig& cfg) {
  cfg.validate();
  const int64_t h = cfg.hidden, f = cfg.ffn;
  const int64_t embeddings = cfg.vocab_size * h + cfg.max_positions * h + 2 * h;
  const int64_t attention = 4 * (h * h + h);
  const int64_t ffn = h * f + f + f * h + h;
  const int64_t per_layer = attention + ffn + 4 * h;  // + two layer norms
  return embeddings + cfg.layers * per_layer;
}

}  // namespace microbert
