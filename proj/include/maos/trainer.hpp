#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "maos/data.hpp"
#include "maos/losses.hpp"
#include "maos/models.hpp"
#include "maos/tensor.hpp"

namespace maos {

struct TrainingConfig {
  double alpha = 0.1;
  std::int64_t n_threads = 4;
  std::int64_t part_size = 0;  // 0 resolves to image_size / 2
  double lr = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double cycle_weight = 10.0;
  std::int64_t iterations = 2000;
  std::int64_t batch_size = 1;
  std::uint64_t seed = 1;
  std::int64_t image_size = 32;
  LossForm loss_form = LossForm::NonSaturatingLog;
  std::int64_t gen_base_width = 8;
  std::int64_t gen_res_blocks = 2;
  std::int64_t disc_base_width = 8;
  std::int64_t disc_depth_global = 4;
  std::int64_t disc_depth_part = 3;
  std::int64_t checkpoint_interval = 500;
  AugmentFlags augment;

  std::int64_t resolved_part_size() const { return part_size > 0 ? part_size : image_size / 2; }
  // All violations at once; empty when valid.
  std::vector<std::string> validate() const;
};

std::string training_config_to_json(const TrainingConfig& cfg);
TrainingConfig training_config_from_json(const std::string& text);

// Bias-corrected Adam moments for one parameter tensor.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
};

// theta <- theta - lr * mhat / (sqrt(vhat) + eps), t is the 1-based step.
void adam_step(std::vector<double>& param, const std::vector<double>& grad, AdamState& state,
               std::int64_t t, double lr, double b1, double b2, double eps);

class AdamOpt {
 public:
  AdamOpt(double lr, double b1, double b2, double eps) : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}
  void attach(const std::string& name, Tensor param);
  void step();
  std::int64_t step_count() const { return t_; }

  struct Slot {
    std::string name;
    Tensor param;
    AdamState state;
  };
  std::vector<Slot>& slots() { return slots_; }
  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  std::vector<Slot> slots_;
  std::int64_t t_ = 0;
  double lr_, b1_, b2_, eps_;
};

struct Nets {
  GeneratorNet f;  // source -> target
  GeneratorNet g;  // target -> source
  DiscriminatorNet d_global;
  DiscriminatorNet d_part;
  DiscriminatorNet d_source;
};

Nets build_nets(const TrainingConfig& cfg);

struct StepReport {
  std::vector<double> d_global_threads;  // per-thread minimization losses, unscaled
  std::vector<double> d_part_threads;
  std::vector<double> d_source_threads;
  double g_adv_global = 0;
  double g_adv_part = 0;
  double g_adv_source = 0;
  double cycle_x = 0;
  double cycle_y = 0;
  double total_g = 0;
  double grad_norm_d_global = 0;  // post-backward, pre-Adam (alpha included)
  double grad_norm_d_part = 0;
  double grad_norm_d_source = 0;
  double grad_norm_gen = 0;
};

// Drops individual thread losses from the discriminator update; used by the
// isolation checks and ablations.
struct StepOptions {
  std::vector<bool> mask_global;
  std::vector<bool> mask_part;
  std::vector<bool> mask_source;
};

// Raw little-endian f32 payloads keyed by name; the on-disk format is
// magic "MAOS", u16 version, a count-prefixed entry table and the payload.
struct Checkpoint {
  std::uint16_t version = 1;
  struct Entry {
    Shape shape;
    std::vector<float> values;
  };
  std::map<std::string, Entry> tensors;

  void put(const std::string& name, const Shape& shape, const std::vector<float>& values);
  void put_u64(const std::string& name, std::uint64_t v);
  void put_string(const std::string& name, const std::string& s);
  const Entry& get(const std::string& name) const;  // schema error naming the key
  std::uint64_t get_u64(const std::string& name) const;
  std::string get_string(const std::string& name) const;
};

void write_checkpoint_file(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint_file(const std::string& path);

class Trainer {
 public:
  Trainer(const OneShotDataset& ds, const TrainingConfig& cfg);
  static Trainer resume(const OneShotDataset& ds, const Checkpoint& ckpt);

  StepReport step(const StepOptions* opts = nullptr);

  std::int64_t iteration() const { return iteration_; }
  const TrainingConfig& config() const { return cfg_; }
  Nets& nets() { return nets_; }
  const Nets& nets() const { return nets_; }

  // Serializes all state as f32 and rounds the live state through f32 at the
  // same time, so a resumed run replays the saved trajectory bitwise.
  Checkpoint make_checkpoint();

 private:
  Trainer(const OneShotDataset& ds, const TrainingConfig& cfg, bool init_params);
  void attach_optimizers();
  OneShotDataset ds_;
  TrainingConfig cfg_;
  Nets nets_;
  AdamOpt opt_g_;
  AdamOpt opt_d_;
  Rng rng_data_;
  CropSpec crop_spec_;
  BatchSampler sampler_;
  std::int64_t iteration_ = 0;
};

// Rebuilds the networks recorded in a checkpoint (inference use).
Nets nets_from_checkpoint(const Checkpoint& ckpt, TrainingConfig* out_cfg = nullptr);

struct TrainLoopResult {
  std::string final_checkpoint;
  std::int64_t rows_written = 0;
};

// Runs cfg.iterations steps, appending one telemetry row per step to
// telemetry.csv (deterministic columns only; wall-clock times go to
// timing.csv) and checkpointing every cfg.checkpoint_interval iterations.
TrainLoopResult train_loop(const OneShotDataset& ds, const TrainingConfig& cfg,
                           const std::string& out_dir,
                           const std::optional<Checkpoint>& resume_from = std::nullopt);

std::string telemetry_header(std::int64_t n_threads);
std::string telemetry_row(std::int64_t iteration, const StepReport& rep);

}  // namespace maos
