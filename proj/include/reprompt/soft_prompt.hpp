#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "reprompt/trace.hpp"

namespace reprompt {

struct GDConfig {
  double step_size = 0.1;
  int epochs = 200;
  std::uint64_t seed = 0;
  int eval_every = 10;    // held-out KL cadence; the final epoch is always evaluated
  bool adaptive = false;  // Adam-style steps instead of plain descent

  void validate() const;
};

/// k_p rows drawn uniformly, with replacement, from the rows of W_E.
template <typename Real>
Matrix<Real> init_soft(const ModelParameters<Real>& params, int k_p, std::uint64_t seed);

template <typename Real>
struct SoftResult {
  Matrix<Real> prompt;  // the best-loss iterate
  Matrix<Real> last;    // final iterate (last finite one after divergence)
  OptimizationTrace trace;
};

/// Gradient descent Z <- Z - eta * grad on the mean document NLL. Starts
/// from `init` when given, else init_soft(config.seed). On a non-finite
/// loss the run stops, `trace.diverged` is set and the last finite state is
/// returned.
template <typename Real>
SoftResult<Real> reconstruct_soft(const ModelParameters<Real>& params, const DocumentSet& docs,
                                  int k_p, const GDConfig& config,
                                  const std::optional<GroundTruth>& eval = std::nullopt,
                                  const std::optional<Matrix<Real>>& init = std::nullopt);

void save_soft_prompt(const std::filesystem::path& path, const Matrix<float>& prompt,
                      const nlohmann::json& metadata = nlohmann::json::object());
Matrix<float> load_soft_prompt(const std::filesystem::path& path);

}  // namespace reprompt
