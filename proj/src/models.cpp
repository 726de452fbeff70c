#include "maos/models.hpp"

#include <stdexcept>

#include "maos/errors.hpp"

namespace maos {

namespace {

void init_conv_params(std::map<std::string, Tensor>& params, const ConvSpec& c,
                      std::uint64_t seed) {
  Shape wshape;
  if (c.transposed) {
    wshape = {c.in_ch, c.out_ch, c.kernel, c.kernel};
  } else {
    wshape = {c.out_ch, c.in_ch / c.groups, c.kernel, c.kernel};
  }
  const std::string wname = c.name + ".weight";
  const std::string bname = c.name + ".bias";
  Rng wr = Rng(seed).derive(Rng::hash_name(wname.c_str()));
  params[wname] = Tensor::gaussian(wshape, wr, kInitStddev, true);
  params[bname] = Tensor::zeros({c.out_ch}, true);
}

Tensor apply_conv(Tape* tape, const std::map<std::string, Tensor>& params, const ConvSpec& c,
                  const Tensor& x) {
  const Tensor& w = params.at(c.name + ".weight");
  const Tensor& b = params.at(c.name + ".bias");
  Tensor y = c.transposed ? conv_transpose2d(tape, x, w, b, c.stride, c.pad)
                          : conv2d(tape, x, w, b, c.stride, c.pad, c.groups);
  if (c.norm) y = instance_norm(tape, y, kInstanceNormEps);
  switch (c.act) {
    case Activation::ReLU:
      return relu(tape, y);
    case Activation::LeakyReLU:
      return leaky_relu(tape, y, kLeakySlope);
    case Activation::Tanh:
      return tanh(tape, y);
    case Activation::None:
      return y;
  }
  return y;
}

}  // namespace

std::int64_t default_disc_depth(DiscKind kind) { return kind == DiscKind::Part ? 3 : 4; }

const char* disc_kind_name(DiscKind kind) {
  switch (kind) {
    case DiscKind::Global:
      return "global";
    case DiscKind::Part:
      return "part";
    case DiscKind::Source:
      return "source";
  }
  return "?";
}

GeneratorNet build_generator(std::int64_t base_width, std::int64_t n_res_blocks,
                             std::uint64_t seed) {
  if (base_width < 4) {
    throw std::invalid_argument("build_generator: base_width " + std::to_string(base_width) +
                                " below minimum 4");
  }
  if (n_res_blocks < 1) {
    throw std::invalid_argument("build_generator: n_res_blocks " + std::to_string(n_res_blocks) +
                                " below minimum 1");
  }
  GeneratorNet net;
  net.base_width = base_width;
  net.n_res_blocks = n_res_blocks;
  const std::int64_t w = base_width;
  net.layers.push_back(ConvSpec{"stem", 3, w, 7, 1, 3, 1, false, true, Activation::ReLU});
  net.layers.push_back(ConvSpec{"down1", w, 2 * w, 3, 2, 1, 1, false, true, Activation::ReLU});
  net.layers.push_back(ConvSpec{"down2", 2 * w, 4 * w, 3, 2, 1, 1, false, true, Activation::ReLU});
  for (std::int64_t i = 1; i <= n_res_blocks; ++i) {
    net.layers.push_back(ResBlockSpec{"res" + std::to_string(i), 4 * w});
  }
  net.layers.push_back(ConvSpec{"up1", 4 * w, 2 * w, 4, 2, 1, 1, true, true, Activation::ReLU});
  net.layers.push_back(ConvSpec{"up2", 2 * w, w, 4, 2, 1, 1, true, true, Activation::ReLU});
  net.layers.push_back(ConvSpec{"head", w, 3, 7, 1, 3, 1, false, false, Activation::Tanh});

  for (const auto& layer : net.layers) {
    if (const auto* c = std::get_if<ConvSpec>(&layer)) {
      init_conv_params(net.params, *c, seed);
    } else {
      const auto& r = std::get<ResBlockSpec>(layer);
      ConvSpec c1{r.name + ".conv1", r.channels, r.channels, 3, 1, 1, 1, false, true,
                  Activation::ReLU};
      ConvSpec c2{r.name + ".conv2", r.channels, r.channels, 3, 1, 1, 1, false, true,
                  Activation::None};
      init_conv_params(net.params, c1, seed);
      init_conv_params(net.params, c2, seed);
    }
  }
  return net;
}

Tensor forward_generator(Tape* tape, const GeneratorNet& net, const Tensor& x) {
  if (x.shape().size() != 4 || x.shape()[1] != 3) {
    throw std::invalid_argument("generator: input must be [N,3,H,W], got " + shape_str(x.shape()));
  }
  if (x.shape()[2] % 4 != 0 || x.shape()[3] % 4 != 0) {
    throw std::invalid_argument("generator: spatial size " + std::to_string(x.shape()[2]) + "x" +
                                std::to_string(x.shape()[3]) + " must be divisible by 4");
  }
  Tensor h = x;
  for (const auto& layer : net.layers) {
    if (const auto* c = std::get_if<ConvSpec>(&layer)) {
      h = apply_conv(tape, net.params, *c, h);
    } else {
      const auto& r = std::get<ResBlockSpec>(layer);
      ConvSpec c1{r.name + ".conv1", r.channels, r.channels, 3, 1, 1, 1, false, true,
                  Activation::ReLU};
      ConvSpec c2{r.name + ".conv2", r.channels, r.channels, 3, 1, 1, 1, false, true,
                  Activation::None};
      Tensor inner = apply_conv(tape, net.params, c2, apply_conv(tape, net.params, c1, h));
      h = add(tape, h, inner);
    }
  }
  return h;
}

DiscriminatorNet build_discriminator(DiscKind kind, std::int64_t n_threads,
                                     std::int64_t base_width, std::int64_t depth,
                                     std::uint64_t seed) {
  if (n_threads < 1) {
    throw std::invalid_argument("build_discriminator: n_threads must be >= 1");
  }
  if (base_width % n_threads != 0) {
    throw std::invalid_argument("build_discriminator: base_width " + std::to_string(base_width) +
                                " not divisible by n_threads " + std::to_string(n_threads));
  }
  if (depth < 2) {
    throw std::invalid_argument("build_discriminator: depth " + std::to_string(depth) +
                                " below minimum 2");
  }
  DiscriminatorNet d;
  d.kind = kind;
  d.n_threads = n_threads;
  d.depth = depth;
  d.base_width = base_width;
  d.layers.push_back(
      ConvSpec{"stem", 3, base_width, 4, 2, 1, 1, false, false, Activation::LeakyReLU});
  std::int64_t ch = base_width;
  for (std::int64_t i = 1; i < depth; ++i) {
    d.layers.push_back(ConvSpec{"blk" + std::to_string(i), ch, 2 * ch, 4, 2, 1, n_threads, false,
                                true, Activation::LeakyReLU});
    ch *= 2;
  }
  d.layers.push_back(
      ConvSpec{"head", ch, n_threads, 3, 1, 1, n_threads, false, false, Activation::None});
  for (const auto& c : d.layers) init_conv_params(d.params, c, seed);
  return d;
}

std::vector<Tensor> forward_threads(Tape* tape, const DiscriminatorNet& d, const Tensor& batch) {
  if (batch.shape().size() != 4 || batch.shape()[1] != 3) {
    throw std::invalid_argument("discriminator: input must be [N,3,H,W], got " +
                                shape_str(batch.shape()));
  }
  // All layers must keep at least one output pixel.
  std::int64_t h = batch.shape()[2];
  std::int64_t w = batch.shape()[3];
  for (const auto& c : d.layers) {
    const std::int64_t nh = (h + 2 * c.pad - c.kernel) / c.stride + 1;
    const std::int64_t nw = (w + 2 * c.pad - c.kernel) / c.stride + 1;
    if (c.kernel > h + 2 * c.pad || c.kernel > w + 2 * c.pad || nh < 1 || nw < 1) {
      throw std::invalid_argument("discriminator: spatial underflow at layer '" + c.name +
                                  "' for input " + std::to_string(batch.shape()[2]) + "x" +
                                  std::to_string(batch.shape()[3]) + " (depth " +
                                  std::to_string(d.depth) + ")");
    }
    h = nh;
    w = nw;
  }
  Tensor t = batch;
  for (const auto& c : d.layers) t = apply_conv(tape, d.params, c, t);
  std::vector<Tensor> maps;
  maps.reserve(static_cast<std::size_t>(d.n_threads));
  for (std::int64_t i = 0; i < d.n_threads; ++i) {
    maps.push_back(slice_channels(tape, t, i, i + 1));
  }
  return maps;
}

std::int64_t parameter_count(const std::map<std::string, Tensor>& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

std::vector<ThreadSlice> thread_param_slices(const DiscriminatorNet& d, std::int64_t thread) {
  if (thread < 0 || thread >= d.n_threads) {
    throw std::invalid_argument("thread_param_slices: thread " + std::to_string(thread) +
                                " out of range");
  }
  std::vector<ThreadSlice> out;
  for (const auto& c : d.layers) {
    if (c.groups != d.n_threads) continue;  // shared stem
    const Tensor& w = d.params.at(c.name + ".weight");
    const std::int64_t rows_per_thread = c.out_ch / d.n_threads;
    const std::int64_t row_elems = w.size() / c.out_ch;
    out.push_back(ThreadSlice{c.name + ".weight", thread * rows_per_thread * row_elems,
                              (thread + 1) * rows_per_thread * row_elems});
    out.push_back(
        ThreadSlice{c.name + ".bias", thread * rows_per_thread, (thread + 1) * rows_per_thread});
  }
  return out;
}

void set_params_requires_grad(std::map<std::string, Tensor>& params, bool value) {
  for (auto& [name, t] : params) t.set_requires_grad(value);
}

}  // namespace maos
