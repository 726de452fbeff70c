#include "maos/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "maos/errors.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace maos {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::vector<std::string> TrainingConfig::validate() const {
  std::vector<std::string> bad;
  if (!(alpha > 0.0 && alpha <= 1.0)) bad.push_back("alpha must be in (0,1]");
  if (n_threads < 1) bad.push_back("n_threads must be >= 1");
  if (!(lr > 0.0)) bad.push_back("lr must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) bad.push_back("adam_beta1 must be in [0,1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) bad.push_back("adam_beta2 must be in [0,1)");
  if (!(adam_eps > 0.0)) bad.push_back("adam_eps must be > 0");
  if (cycle_weight < 0.0) bad.push_back("cycle_weight must be >= 0");
  if (iterations < 0) bad.push_back("iterations must be >= 0");
  if (batch_size < 1) bad.push_back("batch_size must be >= 1");
  if (image_size != 32 && image_size != 64 && image_size != 128) {
    bad.push_back("image_size must be one of 32, 64, 128");
  }
  if (part_size < 0 || resolved_part_size() > image_size || resolved_part_size() < 1) {
    bad.push_back("part_size must be in [1, image_size]");
  }
  if (gen_base_width < 4) bad.push_back("gen_base_width must be >= 4");
  if (gen_res_blocks < 1) bad.push_back("gen_res_blocks must be >= 1");
  if (disc_base_width < 1 || (n_threads >= 1 && disc_base_width % std::max<std::int64_t>(n_threads, 1) != 0)) {
    bad.push_back("disc_base_width must be divisible by n_threads");
  }
  if (disc_depth_part < 2) bad.push_back("disc_depth_part must be >= 2");
  if (disc_depth_global < 2) bad.push_back("disc_depth_global must be >= 2");
  if (disc_depth_part >= disc_depth_global) {
    bad.push_back("disc_depth_part must be smaller than disc_depth_global");
  }
  if (checkpoint_interval < 0) bad.push_back("checkpoint_interval must be >= 0");
  return bad;
}

std::string training_config_to_json(const TrainingConfig& c) {
  json j;
  j["alpha"] = c.alpha;
  j["n_threads"] = c.n_threads;
  j["part_size"] = c.part_size;
  j["lr"] = c.lr;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["cycle_weight"] = c.cycle_weight;
  j["iterations"] = c.iterations;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["image_size"] = c.image_size;
  j["loss_form"] = c.loss_form == LossForm::NonSaturatingLog ? "nonsaturating_log" : "least_squares";
  j["gen_base_width"] = c.gen_base_width;
  j["gen_res_blocks"] = c.gen_res_blocks;
  j["disc_base_width"] = c.disc_base_width;
  j["disc_depth_global"] = c.disc_depth_global;
  j["disc_depth_part"] = c.disc_depth_part;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["augment_flip"] = c.augment.flip;
  j["augment_rotate"] = c.augment.rotate;
  j["augment_center_crop"] = c.augment.center_crop;
  return j.dump(2);
}

TrainingConfig training_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  TrainingConfig c;
  try {
    c.alpha = j.value("alpha", c.alpha);
    c.n_threads = j.value("n_threads", c.n_threads);
    c.part_size = j.value("part_size", c.part_size);
    c.lr = j.value("lr", c.lr);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.cycle_weight = j.value("cycle_weight", c.cycle_weight);
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.image_size = j.value("image_size", c.image_size);
    const std::string lf = j.value("loss_form", "nonsaturating_log");
    if (lf == "nonsaturating_log") {
      c.loss_form = LossForm::NonSaturatingLog;
    } else if (lf == "least_squares") {
      c.loss_form = LossForm::LeastSquares;
    } else {
      throw ConfigError("config: loss_form '" + lf +
                        "' unknown (nonsaturating_log | least_squares)");
    }
    c.gen_base_width = j.value("gen_base_width", c.gen_base_width);
    c.gen_res_blocks = j.value("gen_res_blocks", c.gen_res_blocks);
    c.disc_base_width = j.value("disc_base_width", c.disc_base_width);
    c.disc_depth_global = j.value("disc_depth_global", c.disc_depth_global);
    c.disc_depth_part = j.value("disc_depth_part", c.disc_depth_part);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.augment.flip = j.value("augment_flip", c.augment.flip);
    c.augment.rotate = j.value("augment_rotate", c.augment.rotate);
    c.augment.center_crop = j.value("augment_center_crop", c.augment.center_crop);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad field type: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_step(std::vector<double>& param, const std::vector<double>& grad, AdamState& state,
               std::int64_t t, double lr, double b1, double b2, double eps) {
  const std::size_t n = param.size();
  if (!grad.empty() && grad.size() != n) {
    throw std::invalid_argument("adam_step: grad size " + std::to_string(grad.size()) +
                                " != param size " + std::to_string(n));
  }
  if (state.m.size() != n) state.m.assign(n, 0.0);
  if (state.v.size() != n) state.v.assign(n, 0.0);
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad.empty() ? 0.0 : grad[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

void AdamOpt::attach(const std::string& name, Tensor param) {
  slots_.push_back(Slot{name, std::move(param), AdamState{}});
}

void AdamOpt::step() {
  ++t_;
  for (Slot& s : slots_) {
    adam_step(s.param.values(), s.param.has_grad() ? s.param.grad() : std::vector<double>{},
              s.state, t_, lr_, b1_, b2_, eps_);
  }
}

// ---------------------------------------------------------------------------
// Nets
// ---------------------------------------------------------------------------

Nets build_nets(const TrainingConfig& cfg) {
  Nets n;
  const Rng root(cfg.seed);
  n.f = build_generator(cfg.gen_base_width, cfg.gen_res_blocks,
                        root.derive(Rng::hash_name("gen.f")).seed());
  n.g = build_generator(cfg.gen_base_width, cfg.gen_res_blocks,
                        root.derive(Rng::hash_name("gen.g")).seed());
  n.d_global = build_discriminator(DiscKind::Global, cfg.n_threads, cfg.disc_base_width,
                                   cfg.disc_depth_global, root.derive(Rng::hash_name("d.global")).seed());
  n.d_part = build_discriminator(DiscKind::Part, cfg.n_threads, cfg.disc_base_width,
                                 cfg.disc_depth_part, root.derive(Rng::hash_name("d.part")).seed());
  n.d_source = build_discriminator(DiscKind::Source, cfg.n_threads, cfg.disc_base_width,
                                   cfg.disc_depth_global, root.derive(Rng::hash_name("d.source")).seed());
  return n;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

void zero_param_grads(std::map<std::string, Tensor>& params) {
  for (auto& [name, t] : params) {
    t.grad();  // allocate
    t.zero_grad();
  }
}

double param_grad_norm(const std::map<std::string, Tensor>& params) {
  double acc = 0.0;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (const double g : t.grad()) acc += g * g;
  }
  return std::sqrt(acc);
}

void check_finite(double v, const char* term, std::int64_t iteration) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string("train_step: non-finite ") + term + " at iteration " +
                       std::to_string(iteration + 1));
  }
}

Tensor masked_update_sum(Tape* tape, const std::vector<Tensor>& updates,
                         const std::vector<bool>* mask, Tensor acc) {
  for (std::size_t i = 0; i < updates.size(); ++i) {
    if (mask && i < mask->size() && !(*mask)[i]) continue;
    acc = acc.defined() ? add(tape, acc, updates[i]) : updates[i];
  }
  return acc;
}

}  // namespace

Trainer::Trainer(const OneShotDataset& ds, const TrainingConfig& cfg) : Trainer(ds, cfg, true) {}

Trainer::Trainer(const OneShotDataset& ds, const TrainingConfig& cfg, bool /*init_params*/)
    : ds_(ds),
      cfg_(cfg),
      nets_(build_nets(cfg)),
      opt_g_(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
      opt_d_(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
      rng_data_(Rng(cfg.seed).derive(Rng::hash_name("data"))),
      crop_spec_{cfg.resolved_part_size(), Rng(cfg.seed).derive(Rng::hash_name("crop"))} {
  ds_.augmentation = cfg.augment;
  attach_optimizers();
}

void Trainer::attach_optimizers() {
  for (auto& [name, t] : nets_.f.params) opt_g_.attach("f." + name, t);
  for (auto& [name, t] : nets_.g.params) opt_g_.attach("g." + name, t);
  for (auto& [name, t] : nets_.d_global.params) opt_d_.attach("dg." + name, t);
  for (auto& [name, t] : nets_.d_part.params) opt_d_.attach("dp." + name, t);
  for (auto& [name, t] : nets_.d_source.params) opt_d_.attach("dx." + name, t);
}

StepReport Trainer::step(const StepOptions* opts) {
  BatchSampler::Batch batch = sampler_.next(ds_, cfg_.batch_size, rng_data_);
  const BalanceConfig bal_cfg{cfg_.alpha, cfg_.cycle_weight};
  StepReport rep;

  // --- discriminator phase: fakes are constants, one loss per thread ---
  Tensor fake_y = forward_generator(nullptr, nets_.f, batch.source);
  Tensor fake_x = forward_generator(nullptr, nets_.g, batch.target);
  {
    Tape tape;
    AdvLossBundle bg = adv_loss_global(&tape, nets_.d_global, batch.target, fake_y, cfg_.loss_form);
    CropResult real_crops = random_part_crop(&tape, batch.target, crop_spec_);
    CropResult fake_crops = random_part_crop(&tape, fake_y, crop_spec_);
    AdvLossBundle bp =
        adv_loss_part(&tape, nets_.d_part, real_crops.crops, fake_crops.crops, cfg_.loss_form);
    AdvLossBundle bs = adv_loss_global(&tape, nets_.d_source, batch.source, fake_x, cfg_.loss_form);
    BalancedObjective bal = balanced_total(&tape, bg, bp, bs, bal_cfg, {});

    Tensor d_total;
    d_total = masked_update_sum(&tape, bal.d_updates_global, opts ? &opts->mask_global : nullptr,
                                d_total);
    d_total = masked_update_sum(&tape, bal.d_updates_part, opts ? &opts->mask_part : nullptr,
                                d_total);
    d_total = masked_update_sum(&tape, bal.d_updates_source, opts ? &opts->mask_source : nullptr,
                                d_total);

    for (std::int64_t i = 0; i < cfg_.n_threads; ++i) {
      const auto idx = static_cast<std::size_t>(i);
      rep.d_global_threads.push_back(bg.per_thread_d_losses[idx].item());
      rep.d_part_threads.push_back(bp.per_thread_d_losses[idx].item());
      rep.d_source_threads.push_back(bs.per_thread_d_losses[idx].item());
      check_finite(rep.d_global_threads.back(), "d_global thread loss", iteration_);
      check_finite(rep.d_part_threads.back(), "d_part thread loss", iteration_);
      check_finite(rep.d_source_threads.back(), "d_source thread loss", iteration_);
    }

    zero_param_grads(nets_.d_global.params);
    zero_param_grads(nets_.d_part.params);
    zero_param_grads(nets_.d_source.params);
    if (d_total.defined()) backward(d_total, tape);
    rep.grad_norm_d_global = param_grad_norm(nets_.d_global.params);
    rep.grad_norm_d_part = param_grad_norm(nets_.d_part.params);
    rep.grad_norm_d_source = param_grad_norm(nets_.d_source.params);
    opt_d_.step();
  }

  // --- generator phase: discriminators frozen ---
  set_params_requires_grad(nets_.d_global.params, false);
  set_params_requires_grad(nets_.d_part.params, false);
  set_params_requires_grad(nets_.d_source.params, false);
  {
    Tape tape;
    Tensor fy = forward_generator(&tape, nets_.f, batch.source);
    Tensor rx = forward_generator(&tape, nets_.g, fy);
    Tensor fx = forward_generator(&tape, nets_.g, batch.target);
    Tensor ry = forward_generator(&tape, nets_.f, fx);

    AdvLossBundle bg = adv_loss_global(&tape, nets_.d_global, batch.target, fy, cfg_.loss_form);
    CropResult real_crops = random_part_crop(&tape, batch.target, crop_spec_);
    CropResult fake_crops = random_part_crop(&tape, fy, crop_spec_);
    AdvLossBundle bp =
        adv_loss_part(&tape, nets_.d_part, real_crops.crops, fake_crops.crops, cfg_.loss_form);
    AdvLossBundle bs = adv_loss_global(&tape, nets_.d_source, batch.source, fx, cfg_.loss_form);
    Tensor cyc_x = cycle_loss(&tape, batch.source, rx);
    Tensor cyc_y = cycle_loss(&tape, batch.target, ry);
    BalancedObjective bal = balanced_total(&tape, bg, bp, bs, bal_cfg, {cyc_x, cyc_y});

    rep.g_adv_global = bg.g_loss.item();
    rep.g_adv_part = bp.g_loss.item();
    rep.g_adv_source = bs.g_loss.item();
    rep.cycle_x = cyc_x.item();
    rep.cycle_y = cyc_y.item();
    rep.total_g = bal.total_g.item();
    check_finite(rep.g_adv_global, "g_adv_global", iteration_);
    check_finite(rep.g_adv_part, "g_adv_part", iteration_);
    check_finite(rep.g_adv_source, "g_adv_source", iteration_);
    check_finite(rep.cycle_x, "cycle_x", iteration_);
    check_finite(rep.cycle_y, "cycle_y", iteration_);
    check_finite(rep.total_g, "total_g", iteration_);

    zero_param_grads(nets_.f.params);
    zero_param_grads(nets_.g.params);
    backward(bal.total_g, tape);
    rep.grad_norm_gen = param_grad_norm(nets_.f.params) + param_grad_norm(nets_.g.params);
    opt_g_.step();
  }
  set_params_requires_grad(nets_.d_global.params, true);
  set_params_requires_grad(nets_.d_part.params, true);
  set_params_requires_grad(nets_.d_source.params, true);

  ++iteration_;
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void Checkpoint::put(const std::string& name, const Shape& shape,
                     const std::vector<float>& values) {
  tensors[name] = Entry{shape, values};
}

void Checkpoint::put_u64(const std::string& name, std::uint64_t v) {
  std::vector<float> quads(4);
  for (int i = 0; i < 4; ++i) quads[static_cast<std::size_t>(i)] = static_cast<float>((v >> (16 * i)) & 0xFFFFULL);
  put(name, {4}, quads);
}

void Checkpoint::put_string(const std::string& name, const std::string& s) {
  std::vector<float> bytes(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) bytes[i] = static_cast<float>(static_cast<unsigned char>(s[i]));
  put(name, {static_cast<std::int64_t>(s.size())}, bytes);
}

const Checkpoint::Entry& Checkpoint::get(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) {
    throw IoError("checkpoint: missing tensor key '" + name + "'");
  }
  return it->second;
}

std::uint64_t Checkpoint::get_u64(const std::string& name) const {
  const Entry& e = get(name);
  if (e.values.size() != 4) throw IoError("checkpoint: key '" + name + "' is not a u64 record");
  std::uint64_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<std::uint16_t>(e.values[static_cast<std::size_t>(i)]))
         << (16 * i);
  }
  return v;
}

std::string Checkpoint::get_string(const std::string& name) const {
  const Entry& e = get(name);
  std::string s(e.values.size(), '\0');
  for (std::size_t i = 0; i < e.values.size(); ++i) s[i] = static_cast<char>(static_cast<unsigned char>(e.values[i]));
  return s;
}

namespace {

constexpr char kMagic[4] = {'M', 'A', 'O', 'S'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::string& path) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (in.gcount() != sizeof(T)) throw IoError(path + ": truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void write_checkpoint_file(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot open checkpoint for writing");
  out.write(kMagic, 4);
  write_le<std::uint16_t>(out, ckpt.version);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, e] : ckpt.tensors) {
    write_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le<std::uint8_t>(out, 0);  // dtype 0 = f32
    write_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (const std::int64_t d : e.shape) write_le<std::int64_t>(out, d);
    write_le<std::uint64_t>(out, offset);
    offset += e.values.size() * sizeof(float);
  }
  for (const auto& [name, e] : ckpt.tensors) {
    for (const float v : e.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      write_le<std::uint32_t>(out, bits);
    }
  }
  if (!out) throw IoError(path + ": checkpoint write failed");
}

Checkpoint read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open checkpoint");
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError(path + ": corrupt checkpoint (bad magic)");
  }
  Checkpoint ckpt;
  ckpt.version = read_le<std::uint16_t>(in, path);
  if (ckpt.version != kVersion) {
    throw IoError(path + ": checkpoint version " + std::to_string(ckpt.version) +
                  " unsupported (expected " + std::to_string(kVersion) + ")");
  }
  const std::uint32_t count = read_le<std::uint32_t>(in, path);
  struct Meta {
    std::string name;
    Shape shape;
    std::uint64_t offset;
    std::uint64_t numel;
  };
  std::vector<Meta> metas;
  for (std::uint32_t i = 0; i < count; ++i) {
    Meta m;
    const std::uint16_t len = read_le<std::uint16_t>(in, path);
    m.name.resize(len);
    in.read(m.name.data(), len);
    if (in.gcount() != len) throw IoError(path + ": truncated checkpoint");
    const std::uint8_t dtype = read_le<std::uint8_t>(in, path);
    if (dtype != 0) throw IoError(path + ": unsupported dtype " + std::to_string(dtype));
    const std::uint8_t rank = read_le<std::uint8_t>(in, path);
    std::uint64_t numel = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      const std::int64_t d = read_le<std::int64_t>(in, path);
      m.shape.push_back(d);
      numel *= static_cast<std::uint64_t>(d);
    }
    m.offset = read_le<std::uint64_t>(in, path);
    m.numel = numel;
    metas.push_back(std::move(m));
  }
  const std::streampos payload_start = in.tellg();
  for (const Meta& m : metas) {
    in.seekg(payload_start + static_cast<std::streamoff>(m.offset));
    Checkpoint::Entry e;
    e.shape = m.shape;
    e.values.resize(m.numel);
    for (std::uint64_t i = 0; i < m.numel; ++i) {
      const std::uint32_t bits = read_le<std::uint32_t>(in, path);
      float v;
      std::memcpy(&v, &bits, 4);
      e.values[i] = v;
    }
    ckpt.tensors[m.name] = std::move(e);
  }
  return ckpt;
}

namespace {

// Store as f32 and round the live values through f32 in the same pass.
void put_and_quantize(Checkpoint& ckpt, const std::string& name, const Shape& shape,
                      std::vector<double>& live) {
  std::vector<float> f(live.size());
  for (std::size_t i = 0; i < live.size(); ++i) {
    f[i] = static_cast<float>(live[i]);
    live[i] = static_cast<double>(f[i]);
  }
  ckpt.put(name, shape, f);
}

void restore_values(const Checkpoint& ckpt, const std::string& name, Tensor& t) {
  const Checkpoint::Entry& e = ckpt.get(name);
  if (e.shape != t.shape()) {
    throw IoError("checkpoint: tensor '" + name + "' shape " + shape_str(e.shape) +
                  " does not match expected " + shape_str(t.shape()));
  }
  for (std::size_t i = 0; i < e.values.size(); ++i) t.values()[i] = static_cast<double>(e.values[i]);
}

}  // namespace

Checkpoint Trainer::make_checkpoint() {
  Checkpoint ckpt;
  ckpt.put_string("config", training_config_to_json(cfg_));
  ckpt.put_u64("iteration", static_cast<std::uint64_t>(iteration_));
  ckpt.put_u64("rng.data.seed", rng_data_.seed());
  ckpt.put_u64("rng.data.draws", rng_data_.draws());
  ckpt.put_u64("rng.crop.seed", crop_spec_.rng.seed());
  ckpt.put_u64("rng.crop.draws", crop_spec_.rng.draws());
  ckpt.put_u64("sampler.pos", static_cast<std::uint64_t>(sampler_.cursor()));
  {
    const auto& perm = sampler_.permutation();
    std::vector<float> f(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) f[i] = static_cast<float>(perm[i]);
    ckpt.put("sampler.perm", {static_cast<std::int64_t>(perm.size())}, f);
  }
  ckpt.put_u64("adam.g.t", static_cast<std::uint64_t>(opt_g_.step_count()));
  ckpt.put_u64("adam.d.t", static_cast<std::uint64_t>(opt_d_.step_count()));
  auto dump_opt = [&](AdamOpt& opt, const std::string& prefix) {
    for (auto& slot : opt.slots()) {
      put_and_quantize(ckpt, "param." + slot.name, slot.param.shape(), slot.param.values());
      if (slot.state.m.empty()) slot.state.m.assign(slot.param.values().size(), 0.0);
      if (slot.state.v.empty()) slot.state.v.assign(slot.param.values().size(), 0.0);
      put_and_quantize(ckpt, prefix + ".m." + slot.name, slot.param.shape(), slot.state.m);
      put_and_quantize(ckpt, prefix + ".v." + slot.name, slot.param.shape(), slot.state.v);
    }
  };
  dump_opt(opt_g_, "adam.g");
  dump_opt(opt_d_, "adam.d");
  return ckpt;
}

Trainer Trainer::resume(const OneShotDataset& ds, const Checkpoint& ckpt) {
  const TrainingConfig cfg = training_config_from_json(ckpt.get_string("config"));
  Trainer t(ds, cfg);
  t.iteration_ = static_cast<std::int64_t>(ckpt.get_u64("iteration"));
  t.rng_data_ = Rng::restore(ckpt.get_u64("rng.data.seed"), ckpt.get_u64("rng.data.draws"));
  t.crop_spec_.rng = Rng::restore(ckpt.get_u64("rng.crop.seed"), ckpt.get_u64("rng.crop.draws"));
  {
    const auto& e = ckpt.get("sampler.perm");
    std::vector<std::int64_t> perm(e.values.size());
    for (std::size_t i = 0; i < e.values.size(); ++i) perm[i] = static_cast<std::int64_t>(e.values[i]);
    t.sampler_.restore(std::move(perm), static_cast<std::int64_t>(ckpt.get_u64("sampler.pos")));
  }
  t.opt_g_.set_step_count(static_cast<std::int64_t>(ckpt.get_u64("adam.g.t")));
  t.opt_d_.set_step_count(static_cast<std::int64_t>(ckpt.get_u64("adam.d.t")));
  auto load_opt = [&](AdamOpt& opt, const std::string& prefix) {
    for (auto& slot : opt.slots()) {
      restore_values(ckpt, "param." + slot.name, slot.param);
      const auto& em = ckpt.get(prefix + ".m." + slot.name);
      const auto& ev = ckpt.get(prefix + ".v." + slot.name);
      slot.state.m.resize(em.values.size());
      slot.state.v.resize(ev.values.size());
      for (std::size_t i = 0; i < em.values.size(); ++i) slot.state.m[i] = static_cast<double>(em.values[i]);
      for (std::size_t i = 0; i < ev.values.size(); ++i) slot.state.v[i] = static_cast<double>(ev.values[i]);
    }
  };
  load_opt(t.opt_g_, "adam.g");
  load_opt(t.opt_d_, "adam.d");
  return t;
}

Nets nets_from_checkpoint(const Checkpoint& ckpt, TrainingConfig* out_cfg) {
  const TrainingConfig cfg = training_config_from_json(ckpt.get_string("config"));
  Nets nets = build_nets(cfg);
  auto restore_map = [&](std::map<std::string, Tensor>& params, const std::string& prefix) {
    for (auto& [name, t] : params) restore_values(ckpt, "param." + prefix + "." + name, t);
  };
  restore_map(nets.f.params, "f");
  restore_map(nets.g.params, "g");
  restore_map(nets.d_global.params, "dg");
  restore_map(nets.d_part.params, "dp");
  restore_map(nets.d_source.params, "dx");
  if (out_cfg) *out_cfg = cfg;
  return nets;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {
std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

std::string telemetry_header(std::int64_t n_threads) {
  std::ostringstream os;
  os << "iter";
  for (const char* d : {"d_global", "d_part", "d_source"}) {
    for (std::int64_t i = 0; i < n_threads; ++i) os << "," << d << "_t" << i;
  }
  os << ",d_global_mean,d_part_mean,d_source_mean";
  os << ",g_adv_global,g_adv_part,g_adv_source,cycle_x,cycle_y,total_g";
  os << ",grad_norm_d_global,grad_norm_d_part,grad_norm_d_source,grad_norm_gen";
  return os.str();
}

std::string telemetry_row(std::int64_t iteration, const StepReport& rep) {
  std::ostringstream os;
  os << iteration;
  auto mean_of = [](const std::vector<double>& v) {
    double a = 0;
    for (const double x : v) a += x;
    return a / static_cast<double>(v.size());
  };
  for (const auto* v : {&rep.d_global_threads, &rep.d_part_threads, &rep.d_source_threads}) {
    for (const double x : *v) os << "," << fmt_double(x);
  }
  os << "," << fmt_double(mean_of(rep.d_global_threads)) << ","
     << fmt_double(mean_of(rep.d_part_threads)) << "," << fmt_double(mean_of(rep.d_source_threads));
  os << "," << fmt_double(rep.g_adv_global) << "," << fmt_double(rep.g_adv_part) << ","
     << fmt_double(rep.g_adv_source) << "," << fmt_double(rep.cycle_x) << ","
     << fmt_double(rep.cycle_y) << "," << fmt_double(rep.total_g);
  os << "," << fmt_double(rep.grad_norm_d_global) << "," << fmt_double(rep.grad_norm_d_part) << ","
     << fmt_double(rep.grad_norm_d_source) << "," << fmt_double(rep.grad_norm_gen);
  return os.str();
}

TrainLoopResult train_loop(const OneShotDataset& ds, const TrainingConfig& cfg,
                           const std::string& out_dir,
                           const std::optional<Checkpoint>& resume_from) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir + ": cannot create output directory: " + ec.message());

  Trainer trainer = resume_from ? Trainer::resume(ds, *resume_from) : Trainer(ds, cfg);
  // On resume, the checkpoint is authoritative for everything except the
  // iteration target, which the caller may extend.
  TrainingConfig eff = trainer.config();
  eff.iterations = cfg.iterations;
  {
    std::ofstream cfg_out(fs::path(out_dir) / "config.echo.json");
    if (!cfg_out) throw IoError(out_dir + ": cannot write config echo");
    cfg_out << training_config_to_json(eff) << "\n";
  }

  const fs::path telemetry_path = fs::path(out_dir) / "telemetry.csv";
  const bool fresh = !fs::exists(telemetry_path) || fs::file_size(telemetry_path, ec) == 0;
  std::ofstream tel(telemetry_path, std::ios::app);
  if (!tel) throw IoError(telemetry_path.string() + ": cannot open telemetry for writing");
  if (fresh) tel << telemetry_header(eff.n_threads) << "\n";
  std::ofstream timing(fs::path(out_dir) / "timing.csv", std::ios::app);
  if (timing.tellp() == 0) timing << "iter,wall_ms\n";

  TrainLoopResult result;
  while (trainer.iteration() < eff.iterations) {
    const auto t0 = std::chrono::steady_clock::now();
    const StepReport rep = trainer.step();
    const auto t1 = std::chrono::steady_clock::now();
    tel << telemetry_row(trainer.iteration(), rep) << "\n";
    if (!tel) throw IoError(telemetry_path.string() + ": telemetry write failed");
    ++result.rows_written;
    timing << trainer.iteration() << ","
           << std::chrono::duration<double, std::milli>(t1 - t0).count() << "\n";
    if (eff.checkpoint_interval > 0 && trainer.iteration() % eff.checkpoint_interval == 0 &&
        trainer.iteration() < eff.iterations) {
      const std::string path =
          (fs::path(out_dir) / ("ckpt_" + std::to_string(trainer.iteration()) + ".ckpt")).string();
      write_checkpoint_file(trainer.make_checkpoint(), path);
    }
  }
  result.final_checkpoint = (fs::path(out_dir) / "final.ckpt").string();
  write_checkpoint_file(trainer.make_checkpoint(), result.final_checkpoint);
  return result;
}

}  // namespace maos
