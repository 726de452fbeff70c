#pragma once

#include <vector>

#include "maos/models.hpp"
#include "maos/tensor.hpp"

namespace maos {

// Probabilities are clamped at this floor before log so every loss term stays
// finite for arbitrary finite logits.
inline constexpr double kLogGuard = 1e-12;

enum class LossForm { NonSaturatingLog, LeastSquares };

// Adversarial objective of one discriminator, split per thread.
// Losses are stored in minimization convention: d_loss is the negated
// discriminator objective, averaged over the threads; the generator term is
// the non-saturating form (or the least-squares form when selected).
struct AdvLossBundle {
  Tensor d_loss;  // mean of per_thread_d_losses
  Tensor g_loss;  // generator adversarial term, averaged over threads
  std::vector<Tensor> per_thread_d_losses;
};

struct BalanceConfig {
  double alpha = 0.1;
  double cycle_weight = 10.0;
};

AdvLossBundle adv_loss_global(Tape* tape, const DiscriminatorNet& d, const Tensor& real_batch,
                              const Tensor& fake_batch, LossForm form);

// Same functional form applied to random part crops. Crops must be produced
// by a differentiable slice so the generator gradient routes back into the
// cropped window.
AdvLossBundle adv_loss_part(Tape* tape, const DiscriminatorNet& d_p, const Tensor& real_crops,
                            const Tensor& fake_crops, LossForm form);

// Mean absolute reconstruction error.
Tensor cycle_loss(Tape* tape, const Tensor& x, const Tensor& reconstructed);

// Balanced objective: target-side terms (global and part, equal contribution)
// scaled by alpha, source side unscaled, cycle terms weighted by cycle_weight.
struct BalancedObjective {
  Tensor total_g;
  std::vector<Tensor> d_updates_global;  // alpha-scaled per-thread scalars
  std::vector<Tensor> d_updates_part;    // alpha-scaled per-thread scalars
  std::vector<Tensor> d_updates_source;  // unscaled per-thread scalars
};

BalancedObjective balanced_total(Tape* tape, const AdvLossBundle& target_global,
                                 const AdvLossBundle& target_part, const AdvLossBundle& source,
                                 const BalanceConfig& cfg, const std::vector<Tensor>& cycle_terms);

}  // namespace maos
