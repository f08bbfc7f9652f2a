#pragma once

#include <cstdint>
#include <vector>

#include "reprompt/model.hpp"

namespace reprompt {

/// Adam on next-token cross-entropy. Each drawn document is trained as
/// [BOS] doc [EOS] with probability bos_rate and as doc [EOS] otherwise,
/// truncated to max_seq_len inputs. The BOS-free framing is what lets a
/// prompt sit at position 0; the BOS framing serves the prompt-fluency term.
struct TrainConfig {
  int steps = 600;
  int batch_size = 16;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;       // global-norm clip; <= 0 disables
  double bos_rate = 0.5;
  std::uint64_t data_seed = 0;  // batch order and framing, shared across suite sizes
};

template <typename Real>
struct TrainResult {
  ModelParameters<Real> params;
  std::vector<double> loss_trace;  // mean per-token NLL before each update
};

/// Throws kArgument on an empty corpus and kNumeric (naming the step) when the
/// loss stops being finite.
template <typename Real>
TrainResult<Real> train_model(const std::vector<Document>& corpus, const ModelConfig& config,
                              const TrainConfig& train);

/// Mean per-token NLL of the corpus under the training framing.
template <typename Real>
double corpus_token_nll(const ModelParameters<Real>& params, const std::vector<Document>& corpus);

}  // namespace reprompt
