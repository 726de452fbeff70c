#include "maos/losses.hpp"

#include <stdexcept>

namespace maos {

namespace {

// mean(log max(sigmoid(z), guard))
Tensor mean_log_d(Tape* tape, const Tensor& logits) {
  return mean(tape, log(tape, clamp_min(tape, sigmoid(tape, logits), kLogGuard)));
}

// mean(log max(1 - sigmoid(z), guard))
Tensor mean_log_one_minus_d(Tape* tape, const Tensor& logits) {
  Tensor ones = Tensor::full(logits.shape(), 1.0);
  return mean(tape, log(tape, clamp_min(tape, sub(tape, ones, sigmoid(tape, logits)), kLogGuard)));
}

// mean((z - 1)^2)
Tensor mean_sq_err_one(Tape* tape, const Tensor& logits) {
  Tensor ones = Tensor::full(logits.shape(), 1.0);
  Tensor d = sub(tape, logits, ones);
  return mean(tape, mul(tape, d, d));
}

Tensor mean_sq(Tape* tape, const Tensor& logits) { return mean(tape, mul(tape, logits, logits)); }

Tensor mean_of_scalars(Tape* tape, const std::vector<Tensor>& xs) {
  Tensor acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(tape, acc, xs[i]);
  return scale(tape, acc, 1.0 / static_cast<double>(xs.size()));
}

AdvLossBundle adv_loss(Tape* tape, const DiscriminatorNet& d, const Tensor& real,
                       const Tensor& fake, LossForm form) {
  if (real.shape() != fake.shape()) {
    throw std::invalid_argument("adv_loss: real " + shape_str(real.shape()) + " vs fake " +
                                shape_str(fake.shape()) + " shape mismatch");
  }
  const std::vector<Tensor> real_maps = forward_threads(tape, d, real);
  const std::vector<Tensor> fake_maps = forward_threads(tape, d, fake);

  AdvLossBundle bundle;
  std::vector<Tensor> g_terms;
  for (std::int64_t i = 0; i < d.n_threads; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    if (form == LossForm::NonSaturatingLog) {
      // Discriminator maximizes L_i = E[log D_i(y)] + E[log(1 - D_i(F(x)))];
      // stored negated for minimization.
      Tensor li = add(tape, mean_log_d(tape, real_maps[idx]),
                      mean_log_one_minus_d(tape, fake_maps[idx]));
      bundle.per_thread_d_losses.push_back(neg(tape, li));
      g_terms.push_back(neg(tape, mean_log_d(tape, fake_maps[idx])));
    } else {
      Tensor li = add(tape, mean_sq_err_one(tape, real_maps[idx]), mean_sq(tape, fake_maps[idx]));
      bundle.per_thread_d_losses.push_back(li);
      g_terms.push_back(mean_sq_err_one(tape, fake_maps[idx]));
    }
  }
  bundle.d_loss = mean_of_scalars(tape, bundle.per_thread_d_losses);
  bundle.g_loss = mean_of_scalars(tape, g_terms);
  return bundle;
}

}  // namespace

AdvLossBundle adv_loss_global(Tape* tape, const DiscriminatorNet& d, const Tensor& real_batch,
                              const Tensor& fake_batch, LossForm form) {
  return adv_loss(tape, d, real_batch, fake_batch, form);
}

AdvLossBundle adv_loss_part(Tape* tape, const DiscriminatorNet& d_p, const Tensor& real_crops,
                            const Tensor& fake_crops, LossForm form) {
  if (real_crops.shape() != fake_crops.shape()) {
    throw std::invalid_argument("adv_loss_part: crop size mismatch, real " +
                                shape_str(real_crops.shape()) + " vs fake " +
                                shape_str(fake_crops.shape()));
  }
  return adv_loss(tape, d_p, real_crops, fake_crops, form);
}

Tensor cycle_loss(Tape* tape, const Tensor& x, const Tensor& reconstructed) {
  if (x.shape() != reconstructed.shape()) {
    throw std::invalid_argument("cycle_loss: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(reconstructed.shape()));
  }
  return mean(tape, abs(tape, sub(tape, reconstructed, x)));
}

BalancedObjective balanced_total(Tape* tape, const AdvLossBundle& target_global,
                                 const AdvLossBundle& target_part, const AdvLossBundle& source,
                                 const BalanceConfig& cfg, const std::vector<Tensor>& cycle_terms) {
  BalancedObjective out;
  Tensor target_g = add(tape, target_global.g_loss, target_part.g_loss);
  out.total_g = add(tape, scale(tape, target_g, cfg.alpha), source.g_loss);
  if (!cycle_terms.empty()) {
    Tensor cyc = cycle_terms[0];
    for (std::size_t i = 1; i < cycle_terms.size(); ++i) cyc = add(tape, cyc, cycle_terms[i]);
    out.total_g = add(tape, out.total_g, scale(tape, cyc, cfg.cycle_weight));
  }
  for (const Tensor& t : target_global.per_thread_d_losses) {
    out.d_updates_global.push_back(scale(tape, t, cfg.alpha));
  }
  for (const Tensor& t : target_part.per_thread_d_losses) {
    out.d_updates_part.push_back(scale(tape, t, cfg.alpha));
  }
  out.d_updates_source = source.per_thread_d_losses;
  return out;
}

}  // namespace maos
